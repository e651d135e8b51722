"""Adaptive test sessions: randomesque selection, EAP updates and stopping.

A Session is single-owner mutable state; banks are shared read-only. Batch
runs give every respondent an independent Philox selection substream from the
configured seed and the respondent id.
"""
import concurrent.futures
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional
import numpy as np
from benchcat.config import MANIFEST_SCHEMA_VERSION, MAX_WORKERS, \
    RANDOM_FORM_ITEMS, CatConfig
from benchcat.errors import ConfigurationError, ProtocolError, \
    ResponderError
from benchcat.irt import eap_from_log_likelihood, info_arrays, \
    log_probabilities, se_from_arrays
from benchcat.logger import logger
from benchcat.model import EAP, AbilityEstimate, QuadratureGrid, TestRecord
from benchcat.respondents import SELECTION_STREAM, respondent_stream


ACTIVE = "active"
CONVERGED = "converged"
EXHAUSTED_MAX = "exhausted_max"
BANK_EXHAUSTED = "bank_exhausted"
ABORTED = "aborted"
COMPLETED = "completed"  # fixed-length random forms
TERMINAL = (CONVERGED, EXHAUSTED_MAX, BANK_EXHAUSTED, ABORTED, COMPLETED)


class Session:
    """State of one adaptive test."""

    def __init__(self, bank, config, rng, respondent_id=None):
        self.bank = bank
        self.config = config
        self.rng = rng
        self.respondent_id = respondent_id
        self.grid = QuadratureGrid.standard_normal(
            config.n_quadrature, config.quadrature_bound
        )
        self.record = TestRecord()
        self.administered = set()
        self.status = ACTIVE
        self.pending = None
        self.events = []
        # Running log-likelihood of the record at every quadrature node.
        self.log_lik = np.zeros(len(self.grid.nodes))
        prior = eap_from_log_likelihood(self.log_lik, self.grid, 0)
        self.current = AbilityEstimate(
            theta=0.0, se=math.inf, estimator=EAP, items_used=0,
            posterior_sd=prior.posterior_sd,
        )
        self.selection = {}

    @property
    def step(self):
        """Number of answered items."""
        return len(self.record)

    def remaining(self):
        """Unadministered operational items in canonical order."""
        return [item_id for item_id in self.bank.operational_ids
                if item_id not in self.administered]


def start_session(bank, config=None, rng=None, respondent_id=None):
    """Open a session at theta = 0 with an empty record.

    Raises ConfigurationError if the bank has fewer operational items than
    min_items.
    """
    config = config or CatConfig()
    n_operational = len(bank.operational_ids)
    if n_operational < config.min_items:
        raise ConfigurationError(
            f"Bank has {n_operational} operational items; "
            f"min_items is {config.min_items}."
        )
    if rng is None:
        rng = np.random.Generator(np.random.Philox(config.rng_seed))
    return Session(bank, config, rng, respondent_id)


def select_first_item(session, bank):
    """Return the operational item with b nearest the initial ability.

    Ties go to the larger a, then to the smaller item id.
    """
    theta = session.current.theta
    item_id = min(
        session.remaining(),
        key=lambda key: (abs(bank[key].b - theta), -bank[key].a, key),
    )
    params = bank[item_id]
    info = info_arrays(params.a, params.b, params.c, theta,
                       session.config.info_form)
    return _solicit(session, item_id, info, None)


def select_next_item(session, bank):
    """Draw uniformly among the top_k most informative remaining items.

    Information is evaluated at the current ability; ties rank by item id.
    With no remaining item the session becomes bank_exhausted and None is
    returned.
    """
    remaining = session.remaining()
    if not remaining:
        session.status = BANK_EXHAUSTED
        session.pending = None
        return None
    a, b, c = bank.arrays(remaining)
    info = np.atleast_1d(info_arrays(
        a, b, c, session.current.theta, session.config.info_form
    ))
    order = np.argsort(-info, kind="stable")
    top = order[:session.config.top_k]
    draw = int(session.rng.integers(len(top)))
    chosen = int(top[draw])
    return _solicit(session, remaining[chosen], float(info[chosen]), draw)


def select_item(session, bank):
    """Dispatch to the first-item or the randomesque rule."""
    if session.status != ACTIVE:
        raise ProtocolError(f"Session is {session.status}.")
    if session.step == 0 and session.pending is None:
        return select_first_item(session, bank)
    return select_next_item(session, bank)


def _solicit(session, item_id, info, draw):
    session.pending = item_id
    session.selection = {
        "info_of_item": float(info), "rng_draw": draw,
    }
    return item_id


def submit_response(session, item_id, response):
    """Record the answer to the solicited item and update the estimate.

    The ability is the EAP on the quadrature grid; the SE used for stopping
    is 1 / sqrt(total information) at that ability.

    Raises ProtocolError for unsolicited or repeated items.
    """
    if item_id in session.administered:
        raise ProtocolError(f"Item {item_id} was already answered.")
    if item_id != session.pending:
        raise ProtocolError(
            f"Item {item_id} was not solicited (pending: {session.pending})."
        )
    if response not in (0, 1):
        raise ProtocolError(f"Response {response!r} is not binary.")
    params = session.bank[item_id]
    log_p, log_q = log_probabilities(
        params.a, params.b, params.c, session.grid.nodes
    )
    session.log_lik = session.log_lik + (log_p if response else log_q)
    n_items = session.step + 1
    posterior = eap_from_log_likelihood(session.log_lik, session.grid, n_items)
    a, b, c = session.bank.arrays(session.record.item_ids + [item_id])
    se = se_from_arrays(a, b, c, posterior.theta, session.config.info_form)
    session.record.add(item_id, response, posterior.theta, se)
    session.administered.add(item_id)
    session.pending = None
    session.current = AbilityEstimate(
        theta=posterior.theta, se=se, estimator=EAP, items_used=n_items,
        posterior_sd=posterior.posterior_sd,
    )
    session.events.append({
        "step": n_items, "item_id": item_id, "response": int(response),
        "theta": posterior.theta, "se": se,
        "posterior_sd": posterior.posterior_sd,
        **session.selection,
    })
    session.status = check_stopping(session)
    return session


def check_stopping(session):
    """Return converged, exhausted_max or active.

    Converged needs at least min_items answers and a finite SE <= tau.
    """
    n_items = session.step
    se = session.current.se
    if n_items >= session.config.min_items and math.isfinite(se) and \
            se <= session.config.se_threshold:
        return CONVERGED
    if n_items >= session.config.max_items:
        return EXHAUSTED_MAX
    return ACTIVE


# ============================ full sessions ==================================
@dataclass
class SessionResult:
    """Outcome of one session, adaptive or fixed-form."""

    respondent_id: Optional[str]
    estimate: AbilityEstimate
    record: TestRecord
    status: str
    events: List[dict] = field(default_factory=list)
    error: Optional[str] = None
    runtime: float = 0.0

    @property
    def n_items(self):
        """Number of administered items."""
        return len(self.record)

    def terminal_event(self):
        """Closing line of the session log."""
        event = {
            "status": self.status, "theta": self.estimate.theta,
            "se": self.estimate.se, "n_items": self.n_items,
        }
        if self.error is not None:
            event["error"] = self.error
        return event

    def summary(self):
        """Manifest entry (timing excluded)."""
        return {
            "respondent_id": self.respondent_id, "status": self.status,
            "theta": self.estimate.theta, "se": self.estimate.se,
            "n_items": self.n_items, "error": self.error,
        }


def run_session(bank, config, responder, rng=None):
    """Drive select, respond and submit until the session stops.

    A ResponderError aborts the session; the partial record is kept.
    """
    started = time.perf_counter()
    respondent_id = getattr(responder, "respondent_id", None)
    session = start_session(bank, config, rng, respondent_id)
    error = None
    while session.status == ACTIVE:
        item_id = select_item(session, bank)
        if item_id is None:
            break
        try:
            response = responder(item_id)
        except ResponderError as failure:
            session.status = ABORTED
            error = str(failure)
            logger.warning("Session %s aborted: %s", respondent_id, failure)
            break
        submit_response(session, item_id, response)
    return SessionResult(
        respondent_id=respondent_id, estimate=session.current,
        record=session.record, status=session.status, events=session.events,
        error=error, runtime=time.perf_counter() - started,
    )


def random_form_session(bank, responder, n_items=RANDOM_FORM_ITEMS, rng=None,
                        config=None):
    """Administer n_items drawn uniformly without replacement; score by EAP.

    The fixed-length random baseline for comparison with adaptive runs.
    """
    started = time.perf_counter()
    config = config or CatConfig()
    rng = rng or np.random.Generator(np.random.Philox(config.rng_seed))
    pool = list(bank.operational_ids)
    form = [pool[idx] for idx in
            rng.choice(len(pool), size=min(n_items, len(pool)), replace=False)]
    session = Session(bank, config, rng, getattr(responder, "respondent_id",
                                                 None))
    error = None
    for item_id in form:
        params = bank[item_id]
        session.pending = item_id
        session.selection = {
            "info_of_item": float(info_arrays(
                params.a, params.b, params.c, session.current.theta,
                config.info_form,
            )),
            "rng_draw": None,
        }
        try:
            response = responder(item_id)
        except ResponderError as failure:
            session.status = ABORTED
            error = str(failure)
            break
        submit_response(session, item_id, response)
        session.status = ACTIVE
    if session.status == ACTIVE:
        session.status = COMPLETED
    return SessionResult(
        respondent_id=session.respondent_id, estimate=session.current,
        record=session.record, status=session.status, events=session.events,
        error=error, runtime=time.perf_counter() - started,
    )


def batch_run(bank, config, responders, random_form=False):
    """Run one independent session per responder.

    Return (results, manifest). Results keep the responders' order; a
    failing session is logged and reported as aborted without stopping the
    batch. The manifest echoes the config and seeds; per-session runtimes
    go under its separate timing key.
    """
    ids = [responder.respondent_id for responder in responders]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("Respondent identifiers are not distinct.")
    logger.info("Running %d sessions.", len(responders))

    def run_one(responder):
        rng = respondent_stream(
            config.rng_seed, SELECTION_STREAM, responder.respondent_id
        )
        try:
            if random_form:
                return random_form_session(
                    bank, responder, RANDOM_FORM_ITEMS, rng, config
                )
            return run_session(bank, config, responder, rng)
        except Exception as error:  # pylint: disable=broad-except
            logger.exception(
                "Session %s failed: %s", responder.respondent_id, error
            )
            return SessionResult(
                respondent_id=responder.respondent_id,
                estimate=AbilityEstimate(0.0, math.inf, EAP, 0),
                record=TestRecord(), status=ABORTED, error=str(error),
            )

    with concurrent.futures.ThreadPoolExecutor(
            max_workers=MAX_WORKERS) as executor:
        results = list(executor.map(run_one, responders))

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config": config.dict(),
        "seed": config.rng_seed,
        "substreams": "sha256(<stream>/<respondent_id>)[:8] spawn key; "
                      "streams selection and response",
        "mode": "random_form" if random_form else "adaptive",
        "n_operational_items": len(bank.operational_ids),
        "operational_ids": list(bank.operational_ids),
        "sessions": [result.summary() for result in results],
        "timing": {result.respondent_id: result.runtime
                   for result in results},
    }
    completed = sum(result.status != ABORTED for result in results)
    logger.info(
        "Batch complete: %d of %d sessions finished.",
        completed, len(results),
    )
    return results, manifest
