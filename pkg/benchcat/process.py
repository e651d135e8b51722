"""Functions that ingest and filter response matrices.

The filters run in a fixed order: models (completeness, extreme scores),
items by variance (standard deviation floor, accuracy ceiling), then items by
point-biserial discrimination computed on the totals of the surviving items.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict
import numpy as np
import pandas as pd
from benchcat.config import PreprocessConfig
from benchcat.errors import EmptyBankError, EmptyPopulationError, \
    MatrixParseError, UndefinedCorrelationError
from benchcat.logger import logger
from benchcat.model import ResponseMatrix


HEADER_FIRST_CELL = "model_id"


@dataclass
class FilterReport:
    """Counts of removed models and items, plus per-item r_pb values."""

    input_models: int = 0
    input_items: int = 0
    models_removed_incomplete: int = 0
    models_removed_extreme: int = 0
    items_removed_low_variance: int = 0
    items_removed_ceiling: int = 0
    items_removed_discrimination: int = 0
    output_models: int = 0
    output_items: int = 0
    per_item_rpb: Dict[str, float] = field(default_factory=dict)

    def merge(self, other):
        """Aggregate a later stage's report into this one."""
        self.models_removed_incomplete += other.models_removed_incomplete
        self.models_removed_extreme += other.models_removed_extreme
        self.items_removed_low_variance += other.items_removed_low_variance
        self.items_removed_ceiling += other.items_removed_ceiling
        self.items_removed_discrimination += \
            other.items_removed_discrimination
        self.per_item_rpb.update(other.per_item_rpb)
        self.output_models = other.output_models
        self.output_items = other.output_items
        return self

    def to_dict(self):
        """Return a JSON-friendly dictionary (NaN r_pb become null)."""
        values = asdict(self)
        values["per_item_rpb"] = {
            key: (None if math.isnan(value) else value)
            for key, value in sorted(self.per_item_rpb.items())
        }
        return values


def new_report(matrix):
    """Return an empty report sized to matrix."""
    n_models, n_items = matrix.shape
    return FilterReport(
        input_models=n_models, input_items=n_items,
        output_models=n_models, output_items=n_items,
    )


# ============================ file formats ===================================
def load_matrix(source):
    """Load a response matrix CSV.

    Format: UTF-8; first header cell `model_id`, the rest are item ids; body
    cells `0`/`1`, empty for missing.

    Raises MatrixParseError naming the row and column of the problem.
    """
    try:
        frame = pd.read_csv(
            source, header=None, dtype=str, keep_default_na=False,
            encoding="utf-8", skipinitialspace=False,
        )
    except pd.errors.EmptyDataError as error:
        raise MatrixParseError(f"Empty matrix file: {source}", 0) from error
    except pd.errors.ParserError as error:
        raise MatrixParseError(f"Malformed matrix file {source}: {error}") \
            from error
    except UnicodeDecodeError as error:
        raise MatrixParseError(
            f"Matrix file {source} is not UTF-8: {error}"
        ) from error
    # Short rows come back as NaN; they read as missing responses.
    frame = frame.fillna("")

    header = [cell.strip() for cell in frame.iloc[0].tolist()]
    if header[0] != HEADER_FIRST_CELL:
        raise MatrixParseError(
            f"Malformed header in {source}: first cell is '{header[0]}', "
            f"expected '{HEADER_FIRST_CELL}'.", row=1, column=header[0],
        )
    item_ids = header[1:]
    check_identifiers(item_ids, "item", row=1)
    body = frame.iloc[1:]
    model_ids = [cell.strip() for cell in body.iloc[:, 0].tolist()]
    check_identifiers(model_ids, "model", row=None)

    values = np.full((len(model_ids), len(item_ids)), np.nan)
    cells = body.iloc[:, 1:].to_numpy()
    for row_idx in range(cells.shape[0]):
        for col_idx in range(cells.shape[1]):
            cell = cells[row_idx, col_idx].strip()
            if cell == "1":
                values[row_idx, col_idx] = 1.0
            elif cell == "0":
                values[row_idx, col_idx] = 0.0
            elif cell != "":
                raise MatrixParseError(
                    f"Invalid cell '{cell}' at row {row_idx + 2}, column "
                    f"'{item_ids[col_idx]}'. Expected 0, 1 or empty.",
                    row=row_idx + 2, column=item_ids[col_idx],
                )
    return ResponseMatrix(model_ids, item_ids, values)


def check_identifiers(identifiers, kind, row):
    """Reject empty and duplicate identifiers with a located message."""
    seen = {}
    for idx, identifier in enumerate(identifiers):
        location = f"row {row}" if row is not None else f"row {idx + 2}"
        if identifier == "":
            raise MatrixParseError(
                f"Empty {kind} identifier at {location}.", row=row or idx + 2
            )
        if identifier in seen:
            raise MatrixParseError(
                f"Duplicate {kind} identifier '{identifier}' at {location}.",
                row=row or idx + 2,
                column=identifier if kind == "item" else HEADER_FIRST_CELL,
            )
        seen[identifier] = idx


def write_matrix(matrix, path):
    """Write a matrix in the format read by load_matrix."""
    frame = pd.DataFrame(
        matrix.values,
        index=pd.Index(matrix.model_ids, name=HEADER_FIRST_CELL),
        columns=list(matrix.item_ids),
    )
    frame = frame.apply(
        lambda column: column.map(
            lambda value: "" if np.isnan(value) else str(int(value))
        )
    )
    frame.to_csv(path, encoding="utf-8", lineterminator="\n")


def write_report(report, path):
    """Write a filter report as JSON with sorted keys."""
    with open(path, "w", encoding="utf-8") as file:
        json.dump(report.to_dict(), file, indent=2, sort_keys=True)
        file.write("\n")


# ============================ model filters ==================================
def filter_models(matrix, percentile_floor=0.001):
    """Remove incomplete models, then the lowest-scoring tail.

    The extreme-score rule removes the floor(percentile_floor * N) models
    with the lowest totals (nearest-rank quantile); ties are broken by
    model id.

    Raises EmptyPopulationError if no model remains.
    """
    if not 0 <= percentile_floor < 1:
        raise ValueError(f"percentile_floor {percentile_floor} not in [0, 1).")
    report = new_report(matrix)

    complete = ~np.any(np.isnan(matrix.values), axis=1)
    kept = [model_id for model_id, keep in zip(matrix.model_ids, complete)
            if keep]
    report.models_removed_incomplete = len(matrix.model_ids) - len(kept)
    if not kept:
        raise EmptyPopulationError("Every model has a missing response.")
    matrix = matrix.select(model_ids=kept)

    n_remove = int(math.floor(percentile_floor * len(kept)))
    if n_remove > 0:
        totals = matrix.totals()
        order = sorted(
            range(len(kept)), key=lambda idx: (totals[idx], kept[idx])
        )
        removed = {kept[idx] for idx in order[:n_remove]}
        kept = [model_id for model_id in kept if model_id not in removed]
        matrix = matrix.select(model_ids=kept)
    report.models_removed_extreme = n_remove

    report.output_models, report.output_items = matrix.shape
    logger.info(
        "Model filter: %d incomplete and %d extreme models removed.",
        report.models_removed_incomplete, report.models_removed_extreme,
    )
    return matrix, report


# ============================ item filters ===================================
def filter_items_variance(matrix, sd_floor=0.01, acc_ceiling=0.95):
    """Remove items with population SD < sd_floor or accuracy > acc_ceiling.

    An item violating both rules counts as low variance.

    Raises EmptyBankError if no item remains.
    """
    if matrix.values.size == 0:
        raise EmptyBankError("Cannot filter an empty matrix.")
    report = new_report(matrix)
    accuracy = np.nanmean(matrix.values, axis=0)
    spread = np.nanstd(matrix.values, axis=0)
    low_variance = spread < sd_floor
    ceiling = (accuracy > acc_ceiling) & ~low_variance
    kept = [item_id for item_id, drop in
            zip(matrix.item_ids, low_variance | ceiling) if not drop]
    report.items_removed_low_variance = int(low_variance.sum())
    report.items_removed_ceiling = int(ceiling.sum())
    if not kept:
        raise EmptyBankError("Variance filtering removed every item.")
    matrix = matrix.select(item_ids=kept)
    report.output_models, report.output_items = matrix.shape
    logger.info(
        "Variance filter: %d low-variance and %d ceiling items removed.",
        report.items_removed_low_variance, report.items_removed_ceiling,
    )
    return matrix, report


def point_biserial(item_column, totals):
    """Return r_pb = ((mean T | y=1 - mean T | y=0) / s_T) sqrt(p q).

    s_T is the population standard deviation of totals.

    Raises UndefinedCorrelationError for constant items or totals.
    """
    item_column = np.asarray(item_column, dtype=float)
    totals = np.asarray(totals, dtype=float)
    correct = item_column == 1
    p_correct = correct.mean()
    if p_correct in (0.0, 1.0):
        raise UndefinedCorrelationError("Item column is constant.")
    spread = totals.std()
    if spread == 0:
        raise UndefinedCorrelationError("Total scores are constant.")
    mean_difference = totals[correct].mean() - totals[~correct].mean()
    return float(
        mean_difference / spread * math.sqrt(p_correct * (1 - p_correct))
    )


def filter_items_discrimination(matrix, rpb_floor=0.1):
    """Remove items whose r_pb against total scores is below rpb_floor.

    Totals are sums over the items currently in matrix, so removing items
    changes them; passes repeat until no item falls below the floor. Items
    with an undefined r_pb are removed as non-diagnostic. per_item_rpb holds
    the last r_pb computed for every input item.
    """
    if matrix.shape[0] < 2:
        raise EmptyPopulationError(
            "Discrimination filtering needs at least two models."
        )
    report = new_report(matrix)
    n_passes = 0
    while True:
        n_passes += 1
        totals = matrix.totals()
        kept = []
        for item_id in matrix.item_ids:
            try:
                rpb = point_biserial(matrix.column(item_id), totals)
            except UndefinedCorrelationError:
                rpb = math.nan
            report.per_item_rpb[item_id] = rpb
            if not math.isnan(rpb) and rpb >= rpb_floor:
                kept.append(item_id)
        removed = len(matrix.item_ids) - len(kept)
        report.items_removed_discrimination += removed
        if not kept:
            raise EmptyBankError(
                "Discrimination filtering removed every item."
            )
        if not removed:
            break
        matrix = matrix.select(item_ids=kept)
    report.output_models, report.output_items = matrix.shape
    logger.info(
        "Discrimination filter: %d items below r_pb %.3f removed in %d "
        "passes.", report.items_removed_discrimination, rpb_floor, n_passes,
    )
    return matrix, report


def preprocess(matrix, config=None):
    """Run the model filter, the variance filter and the r_pb filter.

    Return the filtered matrix and a report aggregating all stages.
    """
    config = config or PreprocessConfig()
    logger.info("Preprocessing %d models x %d items.", *matrix.shape)
    matrix, report = filter_models(matrix, config.percentile_floor)
    matrix, stage = filter_items_variance(
        matrix, config.sd_floor, config.acc_ceiling
    )
    report.merge(stage)
    matrix, stage = filter_items_discrimination(matrix, config.rpb_floor)
    report.merge(stage)
    logger.info(
        "Preprocessing complete: %d models x %d items retained.",
        *matrix.shape
    )
    return matrix, report
