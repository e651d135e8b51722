"""Test adaptive sessions: selection, updates, stopping and batches."""
import math
import numpy as np
import pytest
from benchcat.config import CatConfig
from benchcat.engine import ABORTED, ACTIVE, BANK_EXHAUSTED, COMPLETED, \
    CONVERGED, EXHAUSTED_MAX, batch_run, check_stopping, \
    random_form_session, run_session, select_first_item, select_item, \
    select_next_item, start_session, submit_response
from benchcat.errors import ConfigurationError, ProtocolError, \
    ResponderError
from benchcat.irt import info_arrays
from benchcat.model import EAP, AbilityEstimate, TestRecord, \
    bank_from_arrays
from benchcat.respondents import SimulatedResponder, substream


def rich_bank(n_items=300, seed=5):
    """Bank with a ~ U[1, 2], b ~ U[-3, 3], c = 0.1."""
    rng = np.random.default_rng(seed)
    item_ids = [f"q{idx:03d}" for idx in range(n_items)]
    return bank_from_arrays(item_ids, rng.uniform(1.0, 2.0, n_items),
                            rng.uniform(-3.0, 3.0, n_items),
                            np.full(n_items, 0.1))


class FixedResponder:
    """Answer every item the same way."""

    def __init__(self, answer, respondent_id="fixed"):
        self.answer = answer
        self.respondent_id = respondent_id

    def __call__(self, item_id):
        return self.answer


class FailingResponder:
    """Fail after a number of answers."""

    def __init__(self, after, error, respondent_id="failing"):
        self.after = after
        self.error = error
        self.calls = 0
        self.respondent_id = respondent_id

    def __call__(self, item_id):
        self.calls += 1
        if self.calls > self.after:
            raise self.error
        return 1


def test_start_session():
    """Sessions start at theta = 0 with no items."""
    bank = rich_bank(40)
    session = start_session(bank, CatConfig(), substream(1, "a"))
    assert session.current.theta == 0.0
    assert session.step == 0
    assert session.status == ACTIVE
    assert math.isinf(session.current.se)
    with pytest.raises(ConfigurationError):
        start_session(rich_bank(29), CatConfig())


def test_select_first_item():
    """Nearest difficulty to zero; ties go to the larger a."""
    config = CatConfig(min_items=1, max_items=5)
    bank = bank_from_arrays(["x", "y", "z"], [1.0, 1.0, 1.0],
                            [-1.0, 0.2, 0.7])
    session = start_session(bank, config, substream(1, "first"))
    assert select_first_item(session, bank) == "y"

    bank = bank_from_arrays(["lo", "hi"], [1.0, 1.5], [-0.2, 0.2])
    session = start_session(bank, config, substream(1, "first"))
    assert select_item(session, bank) == "hi"

    bank = bank_from_arrays(["only"], [1.0], [2.0])
    session = start_session(bank, config, substream(1, "first"))
    assert select_item(session, bank) == "only"


def test_select_next_item_top_one():
    """top_k = 1 picks the maximum-information item."""
    bank = rich_bank(60)
    config = CatConfig(top_k=1)
    session = start_session(bank, config, substream(1, "top1"))
    item_id = select_next_item(session, bank)
    a, b, c = bank.arrays(bank.operational_ids)
    best = bank.operational_ids[int(np.argmax(info_arrays(a, b, c, 0.0)))]
    assert item_id == best


def test_randomesque_frequencies():
    """Each of the top five items is drawn with frequency 0.2."""
    item_ids = ["d", "e1", "e2", "e3", "e4", "e5", "e6", "e7"]
    bank = bank_from_arrays(item_ids, [3.0, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5,
                                       0.4], [0.0] * 8)
    config = CatConfig(min_items=1, top_k=5)
    session = start_session(bank, config, substream(7, "freq"))
    a, b, c = bank.arrays(bank.operational_ids)
    info = info_arrays(a, b, c, 0.0)
    order = np.argsort(-info, kind="stable")
    top = {bank.operational_ids[idx] for idx in order[:5]}
    assert "d" in top
    counts = {}
    for _ in range(10000):
        item_id = select_next_item(session, bank)
        counts[item_id] = counts.get(item_id, 0) + 1
    assert set(counts) == top
    for count in counts.values():
        assert abs(count / 10000 - 0.2) <= 0.02


def test_randomesque_truncation():
    """With four items left and top_k = 5 all four are drawn uniformly."""
    bank = bank_from_arrays(["p", "q", "r", "s"], [1.0, 1.2, 0.8, 2.0],
                            [0.0, 0.5, -0.5, 1.0])
    config = CatConfig(min_items=1, top_k=5)
    session = start_session(bank, config, substream(3, "trunc"))
    counts = {}
    for _ in range(4000):
        item_id = select_next_item(session, bank)
        counts[item_id] = counts.get(item_id, 0) + 1
    assert set(counts) == {"p", "q", "r", "s"}
    for count in counts.values():
        assert abs(count / 4000 - 0.25) <= 0.05


def test_submit_response():
    """A correct answer raises theta; protocol violations are rejected."""
    bank = bank_from_arrays(["q1", "q2"], [1.5, 1.5], [0.0, 0.5],
                            [0.2, 0.2])
    config = CatConfig(min_items=1, max_items=2)
    session = start_session(bank, config, substream(1, "submit"))
    item_id = select_item(session, bank)
    with pytest.raises(ProtocolError):
        submit_response(session, "q2" if item_id == "q1" else "q1", 1)
    with pytest.raises(ProtocolError):
        submit_response(session, item_id, 2)
    submit_response(session, item_id, 1)
    assert session.current.theta > 0.0
    assert session.current.estimator == EAP
    assert len(session.record.trajectory) == session.step == 1
    event = session.events[-1]
    assert event["step"] == 1 and event["response"] == 1
    assert event["rng_draw"] is None
    assert event["posterior_sd"] == session.current.posterior_sd
    with pytest.raises(ProtocolError):
        submit_response(session, item_id, 1)

    previous = session.current.theta
    next_item = select_item(session, bank)
    submit_response(session, next_item, 1)
    assert session.current.theta > previous
    assert session.events[-1]["rng_draw"] is not None


def test_check_stopping():
    """Minimum length, SE threshold and maximum length."""
    bank = rich_bank(40)
    config = CatConfig(se_threshold=0.1, min_items=30, max_items=500)
    session = start_session(bank, config, substream(1, "stop"))

    session.record = TestRecord.from_pairs(
        [(f"q{idx:03d}", 1) for idx in range(29)]
    )
    session.current = AbilityEstimate(0.0, 0.05, EAP, 29)
    assert check_stopping(session) == ACTIVE

    session.record = TestRecord.from_pairs(
        [(f"q{idx:03d}", 1) for idx in range(30)]
    )
    session.current = AbilityEstimate(0.0, 0.09, EAP, 30)
    assert check_stopping(session) == CONVERGED

    session.record = TestRecord.from_pairs(
        [(f"x{idx:03d}", 1) for idx in range(500)]
    )
    session.current = AbilityEstimate(0.0, 0.4, EAP, 500)
    assert check_stopping(session) == EXHAUSTED_MAX


def test_run_session_converges():
    """A simulated respondent at theta 0 converges on a rich bank."""
    bank = rich_bank()
    config = CatConfig(se_threshold=0.3)
    responder = SimulatedResponder(0.0, bank, 1, "sim-0")
    result = run_session(bank, config, responder, substream(1, "sim-0"))
    assert result.status == CONVERGED
    assert result.n_items >= 30
    assert result.estimate.se <= 0.3
    assert len(set(result.record.item_ids)) == result.n_items
    assert result.terminal_event()["n_items"] == result.n_items


def test_run_session_all_correct():
    """An always-correct responder gives a nondecreasing trajectory."""
    bank = rich_bank()
    config = CatConfig(max_items=60)
    result = run_session(bank, config, FixedResponder(1), substream(2, "x"))
    thetas = [theta for theta, _ in result.record.trajectory]
    assert all(later >= earlier - 1e-12
               for earlier, later in zip(thetas, thetas[1:]))
    assert math.isfinite(result.estimate.theta)
    assert len(thetas) == result.n_items


def test_run_session_small_bank():
    """A bank of exactly min_items ends converged or exhausted."""
    bank = rich_bank(30)
    result = run_session(bank, CatConfig(se_threshold=0.05),
                         SimulatedResponder(0.5, bank, 3, "s"),
                         substream(3, "s"))
    assert result.status in (CONVERGED, BANK_EXHAUSTED)
    assert result.status == BANK_EXHAUSTED
    assert sorted(result.record.item_ids) == list(bank.operational_ids)


def test_run_session_deterministic():
    """Equal seeds and banks replay identical item sequences."""
    bank = rich_bank()
    config = CatConfig(se_threshold=0.3)
    sequences = []
    for _ in range(2):
        responder = SimulatedResponder(0.7, bank, 11, "replay")
        result = run_session(bank, config, responder,
                             substream(11, "replay"))
        sequences.append(result.record.item_ids)
    assert sequences[0] == sequences[1]


def test_run_session_responder_failure():
    """A responder failure aborts and keeps the partial record."""
    bank = rich_bank()
    responder = FailingResponder(5, ResponderError("gone"))
    result = run_session(bank, CatConfig(), responder, substream(1, "f"))
    assert result.status == ABORTED
    assert result.n_items == 5
    assert "gone" in result.error
    assert result.terminal_event()["error"] == "gone"


def test_random_form_session():
    """Random forms administer n distinct items and score by EAP."""
    bank = rich_bank()
    result = random_form_session(
        bank, SimulatedResponder(0.0, bank, 4, "rf"), 100, substream(4, "rf")
    )
    assert result.status == COMPLETED
    assert result.n_items == 100
    assert len(set(result.record.item_ids)) == 100
    assert result.estimate.estimator == EAP


def test_batch_run():
    """Sessions are reproducible and isolated from each other's failures."""
    bank = rich_bank()
    config = CatConfig(se_threshold=0.3, rng_seed=77)

    def responders():
        return [
            SimulatedResponder(-0.5, bank, 77, "alpha"),
            SimulatedResponder(1.0, bank, 77, "beta"),
            FailingResponder(0, RuntimeError("boom"), "gamma"),
        ]

    first, manifest = batch_run(bank, config, responders())
    second, _ = batch_run(bank, config, responders())
    assert [result.respondent_id for result in first] == \
        ["alpha", "beta", "gamma"]
    for left, right in zip(first, second):
        assert left.record.item_ids == right.record.item_ids
    assert first[2].status == ABORTED
    assert "boom" in first[2].error
    assert first[0].status == CONVERGED
    assert manifest["seed"] == 77
    assert manifest["mode"] == "adaptive"
    assert len(manifest["sessions"]) == 3
    assert set(manifest["timing"]) == {"alpha", "beta", "gamma"}

    empty, manifest = batch_run(bank, config, [])
    assert empty == []
    assert manifest["sessions"] == []

    with pytest.raises(ConfigurationError):
        batch_run(bank, config, [FixedResponder(1, "dup"),
                                 FixedResponder(0, "dup")])


def test_batch_run_random_form():
    """Random-form batches record their mode."""
    bank = rich_bank()
    results, manifest = batch_run(
        bank, CatConfig(), [SimulatedResponder(0.0, bank, 1, "r1")],
        random_form=True,
    )
    assert manifest["mode"] == "random_form"
    assert results[0].status == COMPLETED


def test_selection_draws_independent_of_answers():
    """Randomesque draws look the same after correct and incorrect answers.

    Simulated respondents share the batch seed.
    """
    bank = rich_bank()
    config = CatConfig(se_threshold=0.001, max_items=80, rng_seed=31)
    responders = [SimulatedResponder(theta, bank, 31, f"sim-{idx:02d}")
                  for idx, theta in enumerate(np.linspace(-2, 2, 60))]
    results, _ = batch_run(bank, config, responders)
    draws = {0: [], 1: []}
    for result in results:
        for previous, event in zip(result.events, result.events[1:]):
            draws[previous["response"]].append(event["rng_draw"])
    for values in draws.values():
        assert len(values) > 500
        assert abs(np.mean(values) - 2.0) < 0.25
