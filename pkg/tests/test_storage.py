"""Test session logs, manifests and reference files."""
import json
import math
import numpy as np
import pytest
from benchcat.config import CatConfig
from benchcat.engine import batch_run
from benchcat.errors import SchemaVersionError
from benchcat.model import WLE, AbilityEstimate, bank_from_arrays
from benchcat.respondents import SimulatedResponder
from benchcat.storage import StorageError, log_filename, read_manifest, \
    read_references, read_session_log, read_session_logs, write_manifest, \
    write_references, write_session_log


def small_batch():
    """Two simulated sessions on a 60-item bank."""
    rng = np.random.default_rng(1)
    item_ids = [f"q{idx:02d}" for idx in range(60)]
    bank = bank_from_arrays(item_ids, rng.uniform(1.0, 2.0, 60),
                            rng.uniform(-2.0, 2.0, 60))
    responders = [SimulatedResponder(0.2, bank, 1, "model/a"),
                  SimulatedResponder(-0.8, bank, 1, "model-b")]
    return batch_run(bank, CatConfig(se_threshold=0.3), responders)


def test_session_log(tmp_path):
    """Logs hold one event per step and a terminal line."""
    results, _ = small_batch()
    path = write_session_log(results[0], tmp_path)
    assert path.name == log_filename("model/a")
    assert path.name.startswith("model_a~") and path.name.endswith(".jsonl")
    respondent_id, events, terminal = read_session_log(path)
    assert respondent_id == "model/a"
    assert len(events) == results[0].n_items
    assert [event["step"] for event in events] == \
        list(range(1, len(events) + 1))
    assert terminal["status"] == results[0].status
    assert terminal["theta"] == results[0].estimate.theta
    lines = path.read_text("utf-8").splitlines()
    assert lines[0] == json.dumps(json.loads(lines[0]), sort_keys=True)

    write_session_log(results[1], tmp_path)
    sessions = read_session_logs(tmp_path)
    assert set(sessions) == {"model/a", "model-b"}


def test_session_log_validation(tmp_path):
    """Version, step numbering and item counts are checked."""
    results, _ = small_batch()
    path = write_session_log(results[0], tmp_path)
    lines = path.read_text("utf-8").splitlines()
    terminal = json.loads(lines[-1])

    terminal["schema_version"] = 2
    path.write_text("\n".join(lines[:-1] + [json.dumps(terminal)]) + "\n",
                    encoding="utf-8")
    with pytest.raises(SchemaVersionError):
        read_session_log(path)

    path.write_text("\n".join(lines[1:]) + "\n", encoding="utf-8")
    with pytest.raises(StorageError):
        read_session_log(path)

    path.write_text("", encoding="utf-8")
    with pytest.raises(StorageError):
        read_session_log(path)
    with pytest.raises(FileNotFoundError):
        read_session_logs(tmp_path/"missing")


def test_manifest(tmp_path):
    """Manifests round-trip; infinite values become null."""
    _, manifest = small_batch()
    manifest["sessions"].append({"respondent_id": "x", "se": math.inf})
    write_manifest(manifest, tmp_path/"manifest.json")
    stored = read_manifest(tmp_path/"manifest.json")
    assert stored["sessions"][-1]["se"] is None
    assert stored["config"]["se_threshold"] == 0.3
    assert set(stored["timing"]) == {"model/a", "model-b"}

    with pytest.raises(StorageError):
        write_manifest({"sessions": []}, tmp_path/"bad.json")
    (tmp_path/"old.json").write_text('{"schema_version": 0}',
                                     encoding="utf-8")
    with pytest.raises(SchemaVersionError):
        read_manifest(tmp_path/"old.json")


def test_references(tmp_path):
    """Reference abilities keep full precision."""
    references = {
        "m2": AbilityEstimate(-0.123456789012345, 0.31, WLE, 40),
        "m1": AbilityEstimate(1.5, 0.2, WLE, 40),
    }
    write_references(references, tmp_path/"refs.csv")
    assert read_references(tmp_path/"refs.csv") == {
        "m1": 1.5, "m2": -0.123456789012345,
    }
    (tmp_path/"bad.csv").write_text("model_id,score\nm1,1\n",
                                    encoding="utf-8")
    with pytest.raises(StorageError):
        read_references(tmp_path/"bad.csv")


def test_log_filenames_distinct(tmp_path):
    """Ids that sanitize alike still get their own log files."""
    assert log_filename("model-b") == "model-b.jsonl"
    names = {log_filename(key) for key in
             ("org/model", "org_model", "org model", "org:model")}
    assert len(names) == 4

    results, _ = small_batch()
    first = write_session_log(results[0], tmp_path)
    second = write_session_log(results[1], tmp_path)
    assert first != second
    assert set(read_session_logs(tmp_path)) == {"model/a", "model-b"}

    second.rename(tmp_path/"moved.jsonl")
    first.rename(second)
    with pytest.raises(StorageError):
        write_session_log(results[1], tmp_path)
