"""Evaluation metrics over batches of sessions.

Reductions use compensated summation (math.fsum) so results do not depend on
respondent order.
"""
import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List
import numpy as np
import pandas as pd
from scipy.stats import rankdata
from benchcat.calibration import NOTE_DEGENERATE, NOTE_DIFFICULTY, \
    NOTE_GUESSING, NOTE_NON_POSITIVE, filter_notes
from benchcat.config import METRICS_SCHEMA_VERSION
from benchcat.engine import ABORTED, CONVERGED
from benchcat.errors import EmptyPopulationError, PairingError, \
    UndefinedCorrelationError, UndefinedOverlapError
from benchcat.logger import logger


DEFAULT_SHIFT_THRESHOLD = 10


@dataclass
class BatchSummary:
    """Per-respondent outcomes, their forms and per-item exposure counts."""

    respondents: Dict[str, dict] = field(default_factory=dict)
    forms: Dict[str, List[str]] = field(default_factory=dict)
    item_ids: tuple = ()
    runtimes: Dict[str, float] = field(default_factory=dict)

    @property
    def exposure_counts(self):
        """h_i: number of sessions administering item i (bank order)."""
        counts = Counter(itertools.chain.from_iterable(self.forms.values()))
        universe = sorted(set(self.item_ids) | set(counts))
        return {item_id: counts.get(item_id, 0) for item_id in universe}

    @property
    def n_sessions(self):
        """|L|."""
        return len(self.forms)

    def lengths(self):
        """Session lengths in respondent order."""
        return [len(form) for form in self.forms.values()]

    def estimates(self, completed_only=True):
        """Map respondent -> theta_cat, aborted sessions excluded."""
        return {
            key: entry["theta"] for key, entry in self.respondents.items()
            if not (completed_only and entry["status"] == ABORTED)
        }


def batch_summary(results, bank):
    """Summarize SessionResult objects against a bank."""
    summary = BatchSummary(item_ids=tuple(bank.operational_ids))
    for result in results:
        summary.respondents[result.respondent_id] = {
            "theta": result.estimate.theta, "se": result.estimate.se,
            "n_items": result.n_items, "status": result.status,
        }
        summary.forms[result.respondent_id] = list(result.record.item_ids)
        summary.runtimes[result.respondent_id] = result.runtime
    return summary


def summary_from_logs(sessions, item_ids, timing=None):
    """Summarize stored session logs.

    sessions maps respondent id -> (events, terminal) as read from the
    session log files.
    """
    summary = BatchSummary(item_ids=tuple(item_ids))
    for respondent_id, (events, terminal) in sorted(sessions.items()):
        summary.respondents[respondent_id] = {
            "theta": terminal["theta"], "se": terminal["se"],
            "n_items": terminal["n_items"], "status": terminal["status"],
        }
        summary.forms[respondent_id] = [event["item_id"] for event in events]
    summary.runtimes = dict(timing or {})
    return summary


# ============================ accuracy =======================================
def check_pairing(first, second):
    """Raise PairingError unless both maps have the same keys."""
    if set(first) != set(second):
        missing = sorted(set(first) ^ set(second))
        raise PairingError(
            f"Score maps differ on {len(missing)} respondents, e.g. "
            f"{missing[:3]}."
        )
    if not first:
        raise PairingError("Score maps are empty.")


def mae(estimates, references):
    """Mean absolute difference of paired abilities."""
    check_pairing(estimates, references)
    return math.fsum(
        abs(estimates[key] - references[key]) for key in estimates
    ) / len(estimates)


# ============================ exposure and overlap ===========================
def exposure_rates(batch):
    """Return ({item: h_i / |L|}, average over every bank item)."""
    if batch.n_sessions < 1:
        raise EmptyPopulationError("Exposure needs at least one session.")
    counts = batch.exposure_counts
    rates = {item_id: count / batch.n_sessions
             for item_id, count in counts.items()}
    if not rates:
        return rates, 0.0
    return rates, math.fsum(rates.values()) / len(rates)


def overlap_chen(batch):
    """Expected proportion of common items between two forms.

    Q = |L| sum_i P_i^2 / (L_bar (|L| - 1)) - 1 / (|L| - 1), evaluated as
    written.
    """
    n_sessions = batch.n_sessions
    if n_sessions < 2:
        raise UndefinedOverlapError(
            f"Overlap needs at least two sessions, got {n_sessions}."
        )
    mean_length = math.fsum(batch.lengths()) / n_sessions
    if mean_length <= 0:
        raise UndefinedOverlapError("Every session is empty.")
    rates, _ = exposure_rates(batch)
    squares = math.fsum(rate ** 2 for rate in rates.values())
    return n_sessions * squares / (mean_length * (n_sessions - 1)) - \
        1.0 / (n_sessions - 1)


def _incidence(batch):
    """Sessions x items 0/1 matrix and session lengths."""
    items = {item_id: idx for idx, item_id in
             enumerate(batch.exposure_counts)}
    incidence = np.zeros((batch.n_sessions, len(items)))
    for row, form in enumerate(batch.forms.values()):
        incidence[row, [items[item_id] for item_id in form]] = 1.0
    return incidence, incidence.sum(axis=1)


def overlap_jaccard(batch):
    """Mean over session pairs of |T1 & T2| / |T1 | T2|.

    Two empty forms count as identical.
    """
    if batch.n_sessions < 2:
        raise UndefinedOverlapError(
            f"Overlap needs at least two sessions, got {batch.n_sessions}."
        )
    incidence, sizes = _incidence(batch)
    shared = incidence @ incidence.T
    union = sizes[:, np.newaxis] + sizes[np.newaxis, :] - shared
    upper = np.triu_indices(batch.n_sessions, k=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(union[upper] > 0,
                          shared[upper] / union[upper], 1.0)
    return math.fsum(ratios) / len(ratios)


def overlap_pairwise(batch):
    """Mean over session pairs of shared items / shorter form length."""
    if batch.n_sessions < 2:
        raise UndefinedOverlapError(
            f"Overlap needs at least two sessions, got {batch.n_sessions}."
        )
    incidence, sizes = _incidence(batch)
    shared = incidence @ incidence.T
    shorter = np.minimum(sizes[:, np.newaxis], sizes[np.newaxis, :])
    upper = np.triu_indices(batch.n_sessions, k=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(shorter[upper] > 0,
                          shared[upper] / shorter[upper], 1.0)
    return math.fsum(ratios) / len(ratios)


# ============================ rank statistics ================================
def _paired_vectors(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("Score vectors must be 1-D of equal length.")
    if x.size < 2:
        raise UndefinedCorrelationError(
            f"Rank correlation needs at least two scores, got {x.size}."
        )
    return x, y


def spearman(x, y):
    """Spearman's rho: Pearson correlation of average ranks."""
    x, y = _paired_vectors(x, y)
    rank_x = rankdata(x) - (len(x) + 1) / 2.0
    rank_y = rankdata(y) - (len(y) + 1) / 2.0
    spread = math.sqrt(math.fsum(rank_x ** 2) * math.fsum(rank_y ** 2))
    if spread == 0:
        raise UndefinedCorrelationError("A score vector has constant ranks.")
    return float(np.clip(math.fsum(rank_x * rank_y) / spread, -1.0, 1.0))


def kendall(x, y):
    """Kendall's tau-a: (concordant - discordant) / (n (n - 1) / 2).

    Tied pairs count as neither.
    """
    x, y = _paired_vectors(x, y)
    n_scores = len(x)
    balance = 0
    for idx in range(n_scores - 1):
        balance += int(np.sum(
            np.sign(x[idx + 1:] - x[idx]) * np.sign(y[idx + 1:] - y[idx])
        ))
    return balance / (n_scores * (n_scores - 1) / 2.0)


def descending_ranks(scores):
    """Rank 1 = highest score; ties share their average rank."""
    return rankdata(-np.asarray(scores, dtype=float))


def rank_shift_report(acc_scores, thetas, threshold=DEFAULT_SHIFT_THRESHOLD):
    """Compare accuracy ranks with ability ranks.

    Reports per-respondent rank deltas (accuracy rank - ability rank), the
    fraction shifted by more than threshold positions, and every pair of
    respondents with identical accuracy but different abilities.
    """
    check_pairing(acc_scores, thetas)
    if len(acc_scores) < 2:
        raise UndefinedCorrelationError("Rank shifts need two respondents.")
    keys = sorted(acc_scores)
    acc_rank = descending_ranks([acc_scores[key] for key in keys])
    theta_rank = descending_ranks([thetas[key] for key in keys])
    deltas = {key: float(a_rank - t_rank)
              for key, a_rank, t_rank in zip(keys, acc_rank, theta_rank)}
    shifted = sum(abs(delta) > threshold for delta in deltas.values())
    theta_ranks = dict(zip(keys, theta_rank.tolist()))

    groups = {}
    for key in keys:
        groups.setdefault(acc_scores[key], []).append(key)
    pairs = []
    for accuracy, members in sorted(groups.items()):
        for first, second in itertools.combinations(members, 2):
            if thetas[first] != thetas[second]:
                pairs.append({
                    "respondents": [first, second], "accuracy": accuracy,
                    "thetas": [thetas[first], thetas[second]],
                    "theta_ranks": [theta_ranks[first], theta_ranks[second]],
                })
    return {
        "threshold": threshold,
        "n": len(keys),
        "fraction": shifted / len(keys),
        "unshifted_fraction": (len(keys) - shifted) / len(keys),
        "deltas": deltas,
        "pairs": pairs,
    }


# ============================ item quality ===================================
def item_quality_report(bank):
    """Count filtered items by reason and report effective weights a^2.

    Reasons come from the provenance notes and from the parameters, so
    hand-written banks without notes are classified too.
    """
    reasons = Counter()
    for item_id in bank.item_ids:
        notes = {note for note in bank.provenance[item_id].notes.split("; ")
                 if note}
        notes |= set(filter_notes(bank[item_id], False))
        reasons.update(notes)
    operational = list(bank.operational_ids)
    weights = {item_id: bank[item_id].a ** 2 for item_id in operational}
    total_weight = math.fsum(weights.values())
    return {
        "n_items": len(bank),
        "n_operational": len(operational),
        "n_filtered": len(bank) - len(operational),
        "filtered_by_reason": {
            NOTE_NON_POSITIVE: reasons[NOTE_NON_POSITIVE],
            NOTE_DIFFICULTY: reasons[NOTE_DIFFICULTY],
            NOTE_GUESSING: reasons[NOTE_GUESSING],
            NOTE_DEGENERATE: reasons[NOTE_DEGENERATE],
        },
        "non_positive_fraction": reasons[NOTE_NON_POSITIVE] / len(bank)
        if len(bank) else 0.0,
        "effective_weights": weights,
        "max_weight_share": max(weights.values()) / total_weight
        if total_weight > 0 else 0.0,
    }


# ============================ reports ========================================
def _optional(metric, *args):
    """Evaluate a metric; None when it is undefined for this batch."""
    try:
        return metric(*args)
    except (UndefinedCorrelationError, UndefinedOverlapError,
            EmptyPopulationError) as error:
        logger.warning("%s omitted: %s", metric.__name__, error)
        return None


# pylint: disable=too-many-locals
def metrics_report(summary, references=None, accuracies=None,
                   threshold=DEFAULT_SHIFT_THRESHOLD, truths=None):
    """Build the metrics document.

    references - {respondent: whole-bank theta}; enables mae, spearman and
        kendall. Missing references leave those fields null.
    accuracies - {respondent: proportion correct}; enables rank_shift.
    truths - {respondent: true theta} of simulated respondents; adds
        recovery_mae.
    """
    estimates = summary.estimates()
    lengths = summary.lengths()
    rates, average = exposure_rates(summary) if summary.n_sessions \
        else ({}, None)
    report = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "n_sessions": summary.n_sessions,
        "n_completed": len(estimates),
        "stop_rate": (
            sum(entry["status"] == CONVERGED
                for entry in summary.respondents.values())
            / summary.n_sessions if summary.n_sessions else None
        ),
        "avg_items": math.fsum(lengths) / len(lengths) if lengths else None,
        "avg_runtime": (
            math.fsum(summary.runtimes.values()) / len(summary.runtimes)
            if summary.runtimes else None
        ),
        "exposure": {
            "avg": average,
            "max": max(rates.values()) if rates else None,
            "per_item": rates,
        },
        "overlap": {
            "chen": _optional(overlap_chen, summary),
            "jaccard": _optional(overlap_jaccard, summary),
            "pairwise": _optional(overlap_pairwise, summary),
        },
        "mae": None, "spearman": None, "kendall": None, "rank_shift": None,
    }
    if references is not None and estimates:
        paired = {key: references[key] for key in estimates
                  if key in references}
        if len(paired) < len(estimates):
            logger.warning(
                "%d sessions have no reference ability.",
                len(estimates) - len(paired),
            )
        if paired:
            cat = {key: estimates[key] for key in paired}
            keys = sorted(paired)
            report["mae"] = mae(cat, paired)
            report["spearman"] = _optional(
                spearman, [cat[key] for key in keys],
                [paired[key] for key in keys],
            )
            report["kendall"] = _optional(
                kendall, [cat[key] for key in keys],
                [paired[key] for key in keys],
            )
    if truths is not None and estimates:
        report["recovery_mae"] = mae(
            estimates, {key: truths[key] for key in estimates}
        )
    if accuracies is not None and len(estimates) >= 2:
        scored = {key: accuracies[key] for key in estimates
                  if key in accuracies}
        if len(scored) >= 2:
            report["rank_shift"] = rank_shift_report(
                scored, {key: estimates[key] for key in scored}, threshold
            )
    return report


def write_metrics(report, path):
    """Write a metrics report as JSON with sorted keys."""
    with open(path, "w", encoding="utf-8") as file:
        json.dump(report, file, indent=2, sort_keys=True, allow_nan=False)
        file.write("\n")


def flatten_report(report):
    """One-row flat view of the scalar metrics."""
    scalars = {key: value for key, value in report.items()
               if key not in ("exposure", "overlap", "rank_shift")}
    scalars["exposure_avg"] = report["exposure"]["avg"]
    scalars["exposure_max"] = report["exposure"]["max"]
    for name, value in report["overlap"].items():
        scalars[f"overlap_{name}"] = value
    shift = report.get("rank_shift")
    scalars["rank_shift_fraction"] = shift["fraction"] if shift else None
    return scalars


def write_metrics_csv(report, path):
    """Write the flat scalar metrics as a one-row CSV."""
    pd.DataFrame([flatten_report(report)]).to_csv(
        path, index=False, lineterminator="\n"
    )
