"""Benchcat configuration.

Module constants are the default settings of the pipeline. Structured
configuration (file sections and CLI flags) is validated by the pydantic
models below; flags override file values, file values override defaults.
"""
import json
import pathlib
from typing import Optional, Tuple
from pydantic import BaseModel, validator  # pylint: disable=no-name-in-module
from benchcat.errors import ConfigurationError


PACKAGE_ROOT = pathlib.Path(__file__).resolve().parent.parent
DATA_FOLDER = PACKAGE_ROOT/"data"

# Versions of every file format benchcat writes.
BANK_SCHEMA_VERSION = 1
SESSION_LOG_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
METRICS_SCHEMA_VERSION = 1

# Quadrature shared by EAP scoring and the EM E-step.
QUADRATURE_NODES = 81
QUADRATURE_BOUND = 6.0

# Information form used for selection, SE and the WLE correction.
INFO_FORMS = ("paper", "exact3pl")
DEFAULT_INFO_FORM = "paper"

# WLE root finding.
WLE_BRACKET = (-6.0, 6.0)
WLE_TOLERANCE = 1e-8
WLE_MAX_ITERATIONS = 100

# Operational bank constraints (post-calibration filter).
MAX_ABS_DIFFICULTY = 4.0
MAX_GUESSING = 0.5

# Adaptive testing defaults.
DEFAULT_SE_THRESHOLD = 0.2
DEFAULT_MIN_ITEMS = 30
DEFAULT_MAX_ITEMS = 500
DEFAULT_TOP_K = 5
DEFAULT_SEED = 20240601
RANDOM_FORM_ITEMS = 100

# External responder.
DEFAULT_RESPONDER_TIMEOUT = 120.0

# Thread pool size for partitions and batch sessions.
MAX_WORKERS = 4


# pylint: disable=too-few-public-methods
class PreprocessConfig(BaseModel):
    """Thresholds of the model- and item-level filters."""

    percentile_floor: float = 0.001
    sd_floor: float = 0.01
    acc_ceiling: float = 0.95
    rpb_floor: float = 0.1

    class Config:
        """Reject unknown keys."""

        extra = "forbid"

    @validator("percentile_floor")
    def check_percentile_floor(cls, value):  # pylint: disable=E0213
        """percentile_floor has to be in [0, 1)."""
        if not 0 <= value < 1:
            raise ValueError(f"percentile_floor {value} not in [0, 1).")
        return value

    @validator("sd_floor", "acc_ceiling")
    def check_fraction(cls, value):  # pylint: disable=E0213
        """Variance thresholds are fractions."""
        if not 0 <= value <= 1:
            raise ValueError(f"Threshold {value} not in [0, 1].")
        return value


class CalibrationConfig(BaseModel):
    """Settings of the partitioned MML-EM calibration."""

    partition_min_size: int = 100
    n_quadrature: int = QUADRATURE_NODES
    quadrature_bound: float = QUADRATURE_BOUND
    max_em_iterations: int = 500
    em_tolerance: float = 1e-3
    # Beta(alpha, beta) prior on guessing; None turns it off.
    c_prior: Optional[Tuple[float, float]] = (2.0, 8.0)
    a_bounds: Tuple[float, float] = (0.05, 5.0)
    b_bounds: Tuple[float, float] = (-6.0, 6.0)
    c_bounds: Tuple[float, float] = (0.0, 0.5)
    info_form: str = DEFAULT_INFO_FORM
    min_models_warning: int = 100

    class Config:
        """Reject unknown keys."""

        extra = "forbid"

    @validator("partition_min_size")
    def check_partition_min_size(cls, value):  # pylint: disable=E0213
        """Each partition holds at least 100 items."""
        if value < 100:
            raise ValueError(
                f"partition_min_size {value} is below the minimum of 100."
            )
        return value

    @validator("max_em_iterations", "n_quadrature")
    def check_positive_count(cls, value):  # pylint: disable=E0213
        """Counts must be positive."""
        if value < 1:
            raise ValueError(f"Expected a positive count, got {value}.")
        return value

    @validator("info_form")
    def check_info_form(cls, value):  # pylint: disable=E0213
        """info_form is paper or exact3pl."""
        if value not in INFO_FORMS:
            raise ValueError(f"Invalid info_form: {value}.")
        return value


class CatConfig(BaseModel):
    """Adaptive session settings."""

    se_threshold: float = DEFAULT_SE_THRESHOLD
    min_items: int = DEFAULT_MIN_ITEMS
    max_items: int = DEFAULT_MAX_ITEMS
    top_k: int = DEFAULT_TOP_K
    info_form: str = DEFAULT_INFO_FORM
    rng_seed: int = DEFAULT_SEED
    n_quadrature: int = QUADRATURE_NODES
    quadrature_bound: float = QUADRATURE_BOUND

    class Config:
        """Reject unknown keys and freeze instances."""

        extra = "forbid"
        allow_mutation = False

    @validator("se_threshold")
    def check_se_threshold(cls, value):  # pylint: disable=E0213
        """tau must be positive."""
        if value <= 0:
            raise ValueError(f"se_threshold {value} must be positive.")
        return value

    @validator("min_items", "top_k")
    def check_at_least_one(cls, value):  # pylint: disable=E0213
        """Counts must be at least 1."""
        if value < 1:
            raise ValueError(f"Expected a count >= 1, got {value}.")
        return value

    @validator("max_items")
    def check_max_items(cls, value, values):  # pylint: disable=E0213
        """0 < min_items <= max_items."""
        if "min_items" in values and value < values["min_items"]:
            raise ValueError(
                f"max_items {value} is smaller than "
                f"min_items {values['min_items']}."
            )
        return value

    @validator("info_form")
    def check_info_form(cls, value):  # pylint: disable=E0213
        """info_form is paper or exact3pl."""
        if value not in INFO_FORMS:
            raise ValueError(f"Invalid info_form: {value}.")
        return value

    @validator("rng_seed")
    def check_seed(cls, value):  # pylint: disable=E0213
        """Seeds are unsigned 64-bit integers."""
        if not 0 <= value < 2**64:
            raise ValueError(f"rng_seed {value} is not a 64-bit integer.")
        return value


class PopulationConfig(BaseModel):
    """Distribution of true abilities for simulation runs."""

    n: int = 500
    distribution: str = "normal"
    loc: float = 0.0
    scale: float = 1.0

    class Config:
        """Reject unknown keys."""

        extra = "forbid"

    @validator("n")
    def check_n(cls, value):  # pylint: disable=E0213
        """n may be zero (empty run) but not negative."""
        if value < 0:
            raise ValueError(f"Population size {value} is negative.")
        return value

    @validator("distribution")
    def check_distribution(cls, value):  # pylint: disable=E0213
        """normal(loc, scale) or uniform(loc, loc + scale)."""
        if value not in ("normal", "uniform"):
            raise ValueError(f"Invalid distribution: {value}.")
        return value


class FileConfig(BaseModel):
    """Layout of a JSON configuration file."""

    preprocess: PreprocessConfig = PreprocessConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    cat: CatConfig = CatConfig()
    population: PopulationConfig = PopulationConfig()

    class Config:
        """Reject unknown sections."""

        extra = "forbid"


class RunConfig(BaseModel):
    """Resolved settings of one `run` or `simulate` invocation."""

    bank_path: pathlib.Path
    out_dir: pathlib.Path
    matrix_path: Optional[pathlib.Path] = None
    command: Optional[str] = None
    cat: CatConfig = CatConfig()
    se_thresholds: Tuple[float, ...] = (DEFAULT_SE_THRESHOLD,)

    class Config:
        """Reject unknown keys."""

        extra = "forbid"

    @validator("bank_path", "matrix_path")
    def check_exists(cls, value):  # pylint: disable=E0213
        """Referenced input files exist."""
        if value is not None and not value.is_file():
            raise ValueError(f"No such file: {value}")
        return value

    @validator("out_dir")
    def check_out_dir(cls, value):  # pylint: disable=E0213
        """The output directory is creatable."""
        if value.exists() and not value.is_dir():
            raise ValueError(f"Output path {value} is not a directory.")
        return value

    @validator("se_thresholds")
    def check_thresholds(cls, value):  # pylint: disable=E0213
        """At least one positive threshold."""
        if not value or any(tau <= 0 for tau in value):
            raise ValueError(f"Invalid se thresholds: {value}.")
        return value

    def cat_for(self, se_threshold):
        """CatConfig of one threshold."""
        return merge_overrides(self.cat, {"se_threshold": se_threshold})


def load_config(config_path=None):
    """Load and validate a JSON configuration file.

    Parameter:
    config_path - path to the file, or None for the defaults.
    """
    if config_path is None:
        return FileConfig()
    with open(config_path, "r", encoding="utf-8") as file:
        try:
            raw = json.load(file)
        except json.JSONDecodeError as error:
            raise ConfigurationError(
                f"Invalid JSON in {config_path}: {error}"
            ) from error
    return FileConfig.parse_obj(raw)


def merge_overrides(model, overrides):
    """Return a copy of a config model with non-None overrides applied.

    Validation runs again on the merged values.
    """
    values = model.dict()
    values.update(
        {key: value for key, value in overrides.items() if value is not None}
    )
    return type(model).parse_obj(values)
