"""Session logs, run manifests and reference-ability files.

Every writer validates what it writes and every reader validates what it
reads, so a malformed file fails at the first command that touches it.
"""
import hashlib
import json
import math
import pathlib
import re
import pandas as pd
from benchcat.config import MANIFEST_SCHEMA_VERSION, \
    SESSION_LOG_SCHEMA_VERSION
from benchcat.errors import BenchcatError, SchemaVersionError


EVENT_KEYS = ("step", "item_id", "response", "theta", "se",
              "posterior_sd", "info_of_item", "rng_draw")
TERMINAL_KEYS = ("status", "theta", "se", "n_items")
REFERENCE_COLUMNS = ["model_id", "theta", "se"]


class StorageError(BenchcatError):
    """A stored file does not follow its documented layout."""


def finite_or_none(value):
    """JSON has no infinity; non-finite floats are written as null."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def encode_line(record):
    """One deterministic JSON line."""
    return json.dumps(
        {key: finite_or_none(value) for key, value in record.items()},
        sort_keys=True, allow_nan=False,
    ) + "\n"


def log_filename(respondent_id):
    """File name of a respondent's session log.

    Ids made only of letters, digits, `.`, `_` and `-` are used as is. Other
    ids have those characters replaced by `_` and gain a `~` and the first 8
    hex digits of their SHA-256, so distinct ids get distinct names.
    """
    respondent_id = str(respondent_id)
    stem = re.sub(r"[^A-Za-z0-9._-]", "_", respondent_id)
    if stem != respondent_id:
        digest = hashlib.sha256(respondent_id.encode("utf-8")).hexdigest()
        stem = f"{stem}~{digest[:8]}"
    return stem + ".jsonl"


# ============================ session logs ===================================
def write_session_log(result, directory):
    """Write one SessionResult as JSON Lines; return the file path."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory/log_filename(result.respondent_id)
    if path.exists():
        existing, _, _ = read_session_log(path)
        if existing != result.respondent_id:
            raise StorageError(
                f"Session log {path} already holds respondent {existing}, "
                f"not {result.respondent_id}."
            )
    terminal = result.terminal_event()
    terminal.update({
        "respondent_id": result.respondent_id,
        "schema_version": SESSION_LOG_SCHEMA_VERSION,
    })
    lines = [encode_line(event) for event in result.events]
    lines.append(encode_line(terminal))
    with open(path, "w", encoding="utf-8") as file:
        file.writelines(lines)
    return path


def read_session_log(path):
    """Return (respondent_id, events, terminal) from a session log."""
    with open(path, "r", encoding="utf-8") as file:
        try:
            records = [json.loads(line) for line in file if line.strip()]
        except json.JSONDecodeError as error:
            raise StorageError(f"Invalid JSON line in {path}: {error}") \
                from error
    if not records:
        raise StorageError(f"Empty session log {path}.")
    *events, terminal = records
    missing = [key for key in TERMINAL_KEYS + ("respondent_id",)
               if key not in terminal]
    if missing:
        raise StorageError(f"Terminal line of {path} lacks {missing}.")
    version = terminal.get("schema_version")
    if version != SESSION_LOG_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"Session log {path} has schema_version {version}, "
            f"expected {SESSION_LOG_SCHEMA_VERSION}."
        )
    for number, event in enumerate(events, start=1):
        absent = [key for key in EVENT_KEYS if key not in event]
        if absent or event["step"] != number:
            raise StorageError(
                f"Event {number} of {path} is malformed (missing {absent})."
            )
    if terminal["n_items"] != len(events):
        raise StorageError(
            f"{path} declares {terminal['n_items']} items but logs "
            f"{len(events)}."
        )
    for record in events + [terminal]:
        if record.get("se") is None:
            record["se"] = math.inf
    return terminal["respondent_id"], events, terminal


def read_session_logs(directory):
    """Read every *.jsonl file of a directory keyed by respondent id."""
    directory = pathlib.Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"No session directory {directory}.")
    sessions = {}
    for path in sorted(directory.glob("*.jsonl")):
        respondent_id, events, terminal = read_session_log(path)
        if respondent_id in sessions:
            raise StorageError(f"Duplicate respondent {respondent_id}.")
        sessions[respondent_id] = (events, terminal)
    return sessions


# ============================ manifest =======================================
def write_manifest(manifest, path):
    """Write a run manifest as JSON with sorted keys."""
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise StorageError("Manifest lacks the current schema_version.")
    document = json.loads(
        json.dumps(manifest), parse_constant=lambda _: None
    )
    with open(path, "w", encoding="utf-8") as file:
        json.dump(document, file, indent=2, sort_keys=True, allow_nan=False)
        file.write("\n")


def read_manifest(path):
    """Read and version-check a run manifest."""
    with open(path, "r", encoding="utf-8") as file:
        try:
            manifest = json.load(file)
        except json.JSONDecodeError as error:
            raise StorageError(f"Invalid JSON in {path}: {error}") from error
    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"Manifest {path} has schema_version {version}, "
            f"expected {MANIFEST_SCHEMA_VERSION}."
        )
    return manifest


# ============================ reference abilities ============================
def write_references(references, path):
    """Write {model_id: AbilityEstimate} as CSV (model_id, theta, se)."""
    frame = pd.DataFrame(
        [(model_id, estimate.theta, estimate.se)
         for model_id, estimate in sorted(references.items())],
        columns=REFERENCE_COLUMNS,
    )
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def read_references(path):
    """Return {model_id: theta} from a references CSV."""
    frame = pd.read_csv(path, dtype={"model_id": str},
                        keep_default_na=False)
    missing = [name for name in REFERENCE_COLUMNS[:2]
               if name not in frame.columns]
    if missing:
        raise StorageError(f"References {path} lack columns {missing}.")
    if frame["model_id"].duplicated().any():
        raise StorageError(f"Duplicate model ids in {path}.")
    try:
        thetas = pd.to_numeric(frame["theta"])
    except ValueError as error:
        raise StorageError(f"Non-numeric theta in {path}: {error}") \
            from error
    return dict(zip(frame["model_id"], thetas.astype(float)))
