"""Test the simulated fixture script."""
import pandas as pd
from click.testing import CliRunner
import bin.fixture_create as fixture
from benchcat.calibration import import_calibration
from benchcat.process import load_matrix


def test_create_fixture(tmp_path):
    """Outputs agree with each other and with the requested sizes."""
    result = CliRunner().invoke(fixture.create_fixture, [
        "--out", str(tmp_path), "--models", "50", "--items", "12",
        "--seed", "3",
    ])
    assert result.exit_code == 0, result.output
    matrix = load_matrix(tmp_path/"matrix.csv")
    assert matrix.shape == (50, 12)
    items = pd.read_csv(tmp_path/"items.csv")
    bank = import_calibration(tmp_path/"bank.json")
    assert list(bank.item_ids) == list(items["item_id"]) == \
        list(matrix.item_ids)
    assert bank["q00"].a == items["a"].iloc[0]
    truths = pd.read_csv(tmp_path/"truths.csv")
    assert list(truths["model_id"]) == list(matrix.model_ids)


def test_draws_are_reproducible():
    """Equal seeds draw equal parameters."""
    first = fixture.draw_items(20, 7)
    second = fixture.draw_items(20, 7)
    assert first[0] == second[0]
    assert (first[1] == second[1]).all()
    assert fixture.draw_models(5, 7) == fixture.draw_models(5, 7)
    assert fixture.draw_items(20, 8)[1].tolist() != first[1].tolist()
