"""Create a simulated benchmark for desk-scale experiments.

Writes into the output directory:
matrix.csv - models x items responses drawn from the 3PL model;
items.csv - the true item parameters;
bank.json - an item bank holding the true parameters;
truths.csv - the true ability of every simulated model.

Run as `python -m bin.fixture_create`; the default output is data/fixture.
"""
import pathlib
import click
import numpy as np
import pandas as pd
from benchcat.calibration import export_calibration
from benchcat.config import DATA_FOLDER
from benchcat.model import bank_from_arrays
from benchcat.process import write_matrix
from benchcat.respondents import simulate_matrix, substream


N_MODELS = 2000
N_ITEMS = 200
SEED = 20240601


def draw_items(n_items, seed):
    """Draw a ~ U[0.5, 2.5], b ~ U[-2.5, 2.5], c ~ U[0, 0.3]."""
    rng = substream(seed, "items")
    width = len(str(n_items - 1))
    item_ids = [f"q{idx:0{width}d}" for idx in range(n_items)]
    a = rng.uniform(0.5, 2.5, n_items)
    b = rng.uniform(-2.5, 2.5, n_items)
    c = rng.uniform(0.0, 0.3, n_items)
    return item_ids, a, b, c


def draw_models(n_models, seed):
    """Draw model abilities from N(0, 1)."""
    rng = substream(seed, "models")
    width = len(str(n_models - 1))
    return {f"m{idx:0{width}d}": float(theta)
            for idx, theta in enumerate(rng.normal(0.0, 1.0, n_models))}


@click.command()
@click.option("--out", default=str(DATA_FOLDER/"fixture"), show_default=True,
              type=click.Path(file_okay=False))
@click.option("--models", "n_models", default=N_MODELS, show_default=True)
@click.option("--items", "n_items", default=N_ITEMS, show_default=True)
@click.option("--seed", default=SEED, show_default=True)
def create_fixture(out, n_models, n_items, seed):
    """Write the simulated matrix, true parameters and true abilities."""
    out = pathlib.Path(out)
    out.mkdir(parents=True, exist_ok=True)
    item_ids, a, b, c = draw_items(n_items, seed)
    thetas = draw_models(n_models, seed)
    matrix = simulate_matrix(item_ids, a, b, c, thetas, seed)
    write_matrix(matrix, out/"matrix.csv")
    pd.DataFrame({"item_id": item_ids, "a": a, "b": b, "c": c}).to_csv(
        out/"items.csv", index=False, float_format="%.17g"
    )
    export_calibration(bank_from_arrays(item_ids, a, b, c), out/"bank.json")
    pd.DataFrame(
        {"model_id": list(thetas), "theta_true": list(thetas.values())}
    ).to_csv(out/"truths.csv", index=False, float_format="%.17g")
    click.echo(
        f"Fixture with {n_models} models x {n_items} items written to {out} "
        f"(mean accuracy {np.mean(matrix.values):.3f})."
    )


if __name__ == "__main__":
    create_fixture()  # pylint: disable=no-value-for-parameter
