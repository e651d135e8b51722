"""Command-line interface: preprocess, calibrate, run, simulate, metrics.

Logs go to standard error and data to files. Exit codes: 0 success,
2 input validation, 3 fatal calibration error, 4 no session completed.
"""
import functools
import json
import logging
import pathlib
import sys
import click
import pandas as pd
from pydantic import ValidationError  # pylint: disable=no-name-in-module
from benchcat import analytics, calibration, engine, process, storage
from benchcat.config import BANK_SCHEMA_VERSION, INFO_FORMS, \
    MANIFEST_SCHEMA_VERSION, METRICS_SCHEMA_VERSION, \
    SESSION_LOG_SCHEMA_VERSION, RunConfig, load_config, merge_overrides
from benchcat.errors import BenchcatError, CalibrationError, \
    ConfigurationError, DegenerateLinkError
from benchcat.logger import add_file_handler, logger, set_verbosity
from benchcat.respondents import ResponderSpec, build_responder, \
    load_content, sample_population


EXIT_VALIDATION = 2
EXIT_CALIBRATION = 3
EXIT_NO_SESSIONS = 4
VERSION = "1.0.0"


class NoSessionsCompleted(click.ClickException):
    """Every session of a run was aborted."""

    exit_code = EXIT_NO_SESSIONS


def handle_errors(function):
    """Map domain errors onto exit codes with a readable message."""
    @functools.wraps(function)
    def wrapper(*args, **kwargs):
        try:
            return function(*args, **kwargs)
        except (CalibrationError, DegenerateLinkError) as error:
            logger.critical("Calibration failed: %s", error)
            sys.exit(EXIT_CALIBRATION)
        except (BenchcatError, ValidationError, KeyError, OSError) as error:
            logger.critical("%s", error)
            sys.exit(EXIT_VALIDATION)
    return wrapper


def print_version(ctx, _, value):
    """Print the package and file-format versions."""
    if not value or ctx.resilient_parsing:
        return
    click.echo(
        f"benchcat {VERSION} (bank schema {BANK_SCHEMA_VERSION}, "
        f"session log schema {SESSION_LOG_SCHEMA_VERSION}, "
        f"manifest schema {MANIFEST_SCHEMA_VERSION}, "
        f"metrics schema {METRICS_SCHEMA_VERSION})"
    )
    ctx.exit()


@click.group()
@click.option("--version", is_flag=True, expose_value=False, is_eager=True,
              callback=print_version, help="Print versions and exit.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON configuration file.")
@click.option("--log-file", type=click.Path(), help="Also log to this file.")
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages.")
@click.pass_context
def main(ctx, config_path, log_file, verbose):
    """Calibrate item banks and run adaptive evaluations of models."""
    if verbose:
        set_verbosity(logging.DEBUG)
    if log_file:
        add_file_handler(log_file)
    try:
        ctx.obj = load_config(config_path)
    except (BenchcatError, ValidationError) as error:
        logger.critical("Invalid configuration %s: %s", config_path, error)
        sys.exit(EXIT_VALIDATION)


def out_directory(path):
    """Create and return an output directory."""
    path = pathlib.Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ============================ preprocess =====================================
@main.command("preprocess")
@click.argument("matrix_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Output directory (matrix.csv, report.json).")
@click.option("--percentile-floor", type=float)
@click.option("--sd-floor", type=float)
@click.option("--acc-ceiling", type=float)
@click.option("--rpb-floor", type=float)
@click.pass_obj
@handle_errors
def cmd_preprocess(file_config, matrix_path, out, **flags):
    """Filter a response matrix and write the filter report."""
    config = merge_overrides(file_config.preprocess, flags)
    matrix = process.load_matrix(matrix_path)
    filtered, report = process.preprocess(matrix, config)
    out = out_directory(out)
    process.write_matrix(filtered, out/"matrix.csv")
    process.write_report(report, out/"report.json")
    logger.info("Preprocessing outputs written to %s.", out)


# ============================ calibrate ======================================
@main.command("calibrate")
@click.argument("matrix_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Output directory (bank.json, refs.csv).")
@click.option("--partition-min-size", type=int)
@click.option("--max-em-iterations", type=int)
@click.option("--em-tolerance", type=float)
@click.option("--info-form", type=click.Choice(INFO_FORMS))
@click.option("--no-c-prior", is_flag=True,
              help="Fit guessing without the Beta prior.")
@click.pass_obj
@handle_errors
def cmd_calibrate(file_config, matrix_path, out, no_c_prior, **flags):
    """Calibrate a preprocessed matrix into a linked item bank."""
    config = merge_overrides(file_config.calibration, flags)
    if no_c_prior:
        config = config.copy(update={"c_prior": None})
    matrix = process.load_matrix(matrix_path)
    bank, references = calibration.calibrate_bank(matrix, config)
    if not bank.metadata["converged"]:
        logger.warning("Some partitions did not converge; see bank metadata.")
    out = out_directory(out)
    calibration.export_calibration(bank, out/"bank.json")
    storage.write_references(references, out/"refs.csv")


# ============================ run and simulate ===============================
def cat_options(function):
    """Adaptive-session flags shared by run and simulate."""
    options = [
        click.option("--se-threshold", "se_thresholds", type=float,
                     multiple=True,
                     help="Stopping SE; repeat for several batches."),
        click.option("--min-items", type=int),
        click.option("--max-items", type=int),
        click.option("--top-k", type=int),
        click.option("--info-form", type=click.Choice(INFO_FORMS)),
        click.option("--seed", "rng_seed", type=int),
        click.option("--random-form", is_flag=True,
                     help="Administer fixed random forms instead."),
    ]
    for option in reversed(options):
        function = option(function)
    return function


def resolve_run(file_config, bank, out, se_thresholds, matrix=None,
                command=None, **cat_flags):
    """Merge file values and flags into a RunConfig."""
    cat = merge_overrides(file_config.cat, cat_flags)
    return RunConfig(
        bank_path=bank, out_dir=out, matrix_path=matrix, command=command,
        cat=cat, se_thresholds=tuple(se_thresholds) or (cat.se_threshold,),
    )


def run_batches(run_config, bank, make_responders, random_form,
                references=None, accuracies=None, truths=None):
    """Run one batch per threshold; return (threshold, mae, avg_items) rows.

    A single threshold writes into out_dir; several write into
    out_dir/tau_<value>.
    """
    out = out_directory(run_config.out_dir)
    rows, completed, total = [], 0, 0
    for se_threshold in run_config.se_thresholds:
        cat = run_config.cat_for(se_threshold)
        target = out if len(run_config.se_thresholds) == 1 else \
            out_directory(out/f"tau_{se_threshold:g}")
        results, manifest = engine.batch_run(
            bank, cat, make_responders(), random_form
        )
        for result in results:
            storage.write_session_log(result, target/"sessions")
        storage.write_manifest(manifest, target/"manifest.json")
        report = analytics.metrics_report(
            analytics.batch_summary(results, bank), references, accuracies,
            truths=truths,
        )
        analytics.write_metrics(report, target/"metrics.json")
        total += len(results)
        completed += sum(result.status != engine.ABORTED
                         for result in results)
        rows.append({"threshold": se_threshold, "mae": report["mae"],
                     "avg_items": report["avg_items"],
                     "stop_rate": report["stop_rate"]})
    if references is not None:
        pd.DataFrame(rows).to_csv(out/"table.csv", index=False,
                                  lineterminator="\n")
    if total and not completed:
        raise NoSessionsCompleted("No session completed.")
    return rows


@main.command("run")
@click.option("--bank", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--matrix", type=click.Path(exists=True, dir_okay=False),
              help="Replay models of this response matrix.")
@click.option("--model", "models", multiple=True,
              help="Restrict replay to these models (default: all).")
@click.option("--command",
              help="External responder command; may use {respondent_id}.")
@click.option("--respondent", "respondents", multiple=True,
              help="Respondent ids for the external responder.")
@click.option("--content", type=click.Path(exists=True, dir_okay=False),
              help="Item metadata passed to external responders.")
@click.option("--timeout", type=float, default=120.0, show_default=True)
@click.option("--references", type=click.Path(exists=True, dir_okay=False),
              help="Whole-bank abilities (refs.csv) for MAE.")
@cat_options
@click.pass_obj
@handle_errors
# pylint: disable=too-many-arguments,too-many-locals
def cmd_run(file_config, bank, out, matrix, models, command, respondents,
            content, timeout, references, se_thresholds, random_form,
            **cat_flags):
    """Run adaptive sessions for stored models or an external responder."""
    if (matrix is None) == (command is None):
        raise click.UsageError("Give exactly one of --matrix or --command.")
    run_config = resolve_run(file_config, bank, out, se_thresholds, matrix,
                             command, **cat_flags)
    item_bank = calibration.import_calibration(run_config.bank_path)
    accuracies = None
    if matrix is not None:
        response_matrix = process.load_matrix(matrix)
        model_ids = list(models) or list(response_matrix.model_ids)
        accuracies = response_matrix.select(model_ids=model_ids).accuracy()

        def make_responders():
            return [build_responder(
                ResponderSpec(kind="matrix", respondent_id=model_id,
                              model_id=model_id),
                matrix=response_matrix,
            ) for model_id in model_ids]
    else:
        item_content = load_content(content)
        ids = list(respondents) or ["external"]

        def make_responders():
            return [build_responder(
                ResponderSpec(kind="external", respondent_id=key,
                              command=command, timeout=timeout),
                content=item_content,
            ) for key in ids]
    refs = storage.read_references(references) if references else None
    run_batches(run_config, item_bank, make_responders, random_form,
                refs, accuracies)


@main.command("simulate")
@click.option("--bank", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n", type=int, help="Number of simulated respondents.")
@click.option("--distribution", type=click.Choice(["normal", "uniform"]))
@click.option("--loc", type=float)
@click.option("--scale", type=float)
@cat_options
@click.pass_obj
@handle_errors
# pylint: disable=too-many-arguments
def cmd_simulate(file_config, bank, out, n, distribution, loc, scale,
                 se_thresholds, random_form, **cat_flags):
    """Run simulated respondents and report ability recovery."""
    population = merge_overrides(file_config.population, {
        "n": n, "distribution": distribution, "loc": loc, "scale": scale,
    })
    run_config = resolve_run(file_config, bank, out, se_thresholds,
                             **cat_flags)
    item_bank = calibration.import_calibration(run_config.bank_path)
    truths = sample_population(population, run_config.cat.rng_seed)
    out_dir = out_directory(run_config.out_dir)
    pd.DataFrame(
        sorted(truths.items()), columns=["respondent_id", "theta_true"]
    ).to_csv(out_dir/"truths.csv", index=False, lineterminator="\n",
             float_format="%.17g")

    def make_responders():
        return [build_responder(
            ResponderSpec(kind="simulated", respondent_id=key,
                          theta_true=theta, seed=run_config.cat.rng_seed),
            bank=item_bank,
        ) for key, theta in truths.items()]
    run_batches(run_config, item_bank, make_responders, random_form,
                truths=truths)


# ============================ metrics and quality ============================
@main.command("metrics")
@click.argument("sessions_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Metrics JSON path.")
@click.option("--references", type=click.Path(dir_okay=False),
              help="Whole-bank abilities (refs.csv).")
@click.option("--bank", type=click.Path(exists=True, dir_okay=False),
              help="Bank whose operational items form the exposure base.")
@click.option("--matrix", type=click.Path(exists=True, dir_okay=False),
              help="Response matrix for accuracy rank shifts.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False),
              help="Also write a flat CSV.")
@click.option("--threshold", type=int, default=10, show_default=True,
              help="Rank positions counted as a shift.")
@handle_errors
# pylint: disable=too-many-arguments
def cmd_metrics(sessions_dir, out, references, bank, matrix, csv_path,
                threshold):
    """Compute evaluation metrics from stored session logs.

    SESSIONS_DIR is a run directory or its sessions/ subdirectory. The
    exposure base is the operational bank: --bank, else the run manifest.
    """
    sessions_dir = pathlib.Path(sessions_dir)
    if (sessions_dir/"sessions").is_dir():
        run_dir, sessions_dir = sessions_dir, sessions_dir/"sessions"
    else:
        run_dir = sessions_dir.parent
    manifest = storage.read_manifest(run_dir/"manifest.json") \
        if (run_dir/"manifest.json").is_file() else {}
    if bank:
        item_ids = calibration.import_calibration(bank).operational_ids
    elif "operational_ids" in manifest:
        item_ids = manifest["operational_ids"]
    else:
        raise ConfigurationError(
            f"No run manifest next to {sessions_dir}; pass --bank so "
            "exposure covers the operational bank."
        )
    sessions = storage.read_session_logs(sessions_dir)
    summary = analytics.summary_from_logs(sessions, item_ids,
                                          manifest.get("timing"))
    refs = None
    if references and pathlib.Path(references).is_file():
        refs = storage.read_references(references)
    elif references:
        logger.warning("References %s not found; MAE omitted.", references)
    accuracies = process.load_matrix(matrix).accuracy() if matrix else None
    report = analytics.metrics_report(summary, refs, accuracies, threshold)
    analytics.write_metrics(report, out)
    if csv_path:
        analytics.write_metrics_csv(report, csv_path)
    logger.info("Metrics for %d sessions written to %s.",
                summary.n_sessions, out)


@main.command("quality")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False),
              help="Write the report here instead of standard output.")
@handle_errors
def cmd_quality(bank_path, out):
    """Report filtered items by reason and effective item weights."""
    report = analytics.item_quality_report(
        calibration.import_calibration(bank_path)
    )
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        with open(out, "w", encoding="utf-8") as file:
            file.write(text + "\n")
    else:
        click.echo(text)
