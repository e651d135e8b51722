"""Partitioned 3PL calibration with common-person mean-sigma linking.

Items are split into contiguous partitions, each partition is fitted by
marginal maximum likelihood (EM on a quadrature grid), every partition is
linked onto the scale of partition 0 through the WLE abilities of the models
shared by all partitions, and finally whole-bank WLE reference abilities are
computed over the operational items.
"""
import concurrent.futures
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple
import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit, logsumexp
from benchcat.config import BANK_SCHEMA_VERSION, MAX_WORKERS, \
    CalibrationConfig
from benchcat.errors import BankParseError, CalibrationError, \
    DegenerateLinkError, EmptyBankError, SchemaVersionError
from benchcat.irt import log_probabilities, wle_from_arrays
from benchcat.logger import logger
from benchcat.model import ItemBank, ItemParameters, ItemProvenance, \
    QuadratureGrid


# Bound of the logit-scale guessing parameter in the M-step.
GUESSING_LOGIT_BOUND = 15.0
# Relative tolerance for an estimate sitting on a parameter bound.
BOUND_TOLERANCE = 1e-6
# Filter notes written to item provenance.
NOTE_NON_POSITIVE = "non-positive discrimination"
NOTE_DIFFICULTY = "extreme difficulty"
NOTE_GUESSING = "excessive guessing"
NOTE_DEGENERATE = "degenerate column"


# ============================ partitioning ===================================
def partition_items(item_ids, partition_min_size=100):
    """Split item ids into contiguous partitions of canonical (sorted) order.

    K = floor(N / partition_min_size) partitions of partition_min_size items;
    the remainder is appended to the last partition. With fewer than
    partition_min_size items a single partition is returned and a warning is
    logged.
    """
    if partition_min_size < 1:
        raise ValueError(
            f"partition_min_size {partition_min_size} must be positive."
        )
    ordered = sorted(item_ids)
    if not ordered:
        raise EmptyBankError("Cannot partition an empty item set.")
    n_partitions = len(ordered) // partition_min_size
    if n_partitions == 0:
        logger.warning(
            "Only %d items for partitions of %d; using one partition.",
            len(ordered), partition_min_size,
        )
        return [ordered]
    partitions = [
        ordered[idx * partition_min_size:(idx + 1) * partition_min_size]
        for idx in range(n_partitions)
    ]
    partitions[-1] = partitions[-1] + \
        ordered[n_partitions * partition_min_size:]
    return partitions


# ============================ MML-EM =========================================
@dataclass
class PartitionCalibration:
    """Result of one partition fit on its provisional scale."""

    params: Dict[str, ItemParameters]
    converged: bool
    iterations: int
    trace: List[float] = field(default_factory=list)
    flagged: List[str] = field(default_factory=list)
    lower_bound_a: List[str] = field(default_factory=list)

    def diagnostics(self):
        """Return JSON-friendly convergence diagnostics."""
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_objective": self.trace[-1] if self.trace else None,
            "objective_trace": list(self.trace),
            "flagged_items": list(self.flagged),
            "lower_bound_a": list(self.lower_bound_a),
        }


def log_beta_prior(c, prior):
    """Unnormalized Beta(alpha, beta) log-density of the guessing value."""
    if prior is None:
        return 0.0
    alpha, beta = prior
    with np.errstate(divide="ignore"):
        return (alpha - 1.0) * np.log(c) + (beta - 1.0) * np.log1p(-c)


class PartitionCalibrator:
    """Fit the 3PL model to one partition by MML-EM.

    The E-step computes each model's posterior weights over the quadrature
    nodes under a standard normal prior. The M-step maximizes each item's
    expected complete-data log-likelihood with L-BFGS-B on
    (log a, b, logit(c / c_max)).
    """

    def __init__(self, matrix, config=None):
        """Initialize the calibrator.

        Parameters:
        matrix - ResponseMatrix of one partition; NaN cells are unobserved.
        config - CalibrationConfig.
        """
        self.config = config or CalibrationConfig()
        self.matrix = matrix
        self.grid = QuadratureGrid.standard_normal(
            self.config.n_quadrature, self.config.quadrature_bound
        )
        observed = ~np.isnan(matrix.values)
        self.mask = observed.astype(float)
        self.y = np.where(observed, matrix.values, 0.0)
        self.c_max = self.config.c_bounds[1]
        self.flagged = self._find_degenerate_columns()
        self.a = self.b = self.c = None
        self.expected_total = self.expected_correct = None

    def start(self):
        """Run EM to convergence and return a PartitionCalibration."""
        n_models, n_items = self.matrix.shape
        if n_models < self.config.min_models_warning:
            logger.warning(
                "Calibrating %d items with only %d models.", n_items, n_models
            )
        self._initialize()
        trace = [self._e_step()]
        converged = False
        iteration = 0
        for iteration in range(1, self.config.max_em_iterations + 1):
            previous = np.concatenate([self.a, self.b, self.c])
            self._m_step()
            trace.append(self._e_step())
            change = np.max(np.abs(
                np.concatenate([self.a, self.b, self.c]) - previous
            ))
            if change < self.config.em_tolerance:
                converged = True
                break
        if not converged:
            logger.warning(
                "EM did not converge in %d iterations for %d items.",
                self.config.max_em_iterations, n_items,
            )
        else:
            logger.info(
                "EM converged in %d iterations for %d items.",
                iteration, n_items,
            )
        return self._result(converged, iteration, trace)

    def _find_degenerate_columns(self):
        """Return indices of columns whose observed responses are constant."""
        flagged = []
        for idx in range(self.y.shape[1]):
            observed = self.y[self.mask[:, idx] == 1, idx]
            if observed.size == 0 or np.all(observed == observed[0]):
                flagged.append(idx)
        return flagged

    def _initialize(self):
        """Start from a = 1, c = c_max / 5 and b from proportion correct."""
        n_items = self.y.shape[1]
        a_low, a_high = self.config.a_bounds
        b_low, b_high = self.config.b_bounds
        observed = np.maximum(self.mask.sum(axis=0), 1.0)
        prop = self.y.sum(axis=0) / observed
        self.c = np.full(n_items, self.c_max / 5.0)
        adjusted = np.clip((prop - self.c) / (1.0 - self.c), 0.02, 0.98)
        self.b = np.clip(-logit(adjusted), b_low, b_high)
        self.a = np.full(n_items, float(np.clip(1.0, a_low, a_high)))
        for idx in self.flagged:
            all_correct = prop[idx] >= 0.5
            self.a[idx] = a_low
            self.b[idx] = b_low if all_correct else b_high
            self.c[idx] = 0.0
        # Flagged columns do not inform the posterior.
        self.mask[:, self.flagged] = 0.0

    def _e_step(self):
        """Update expected counts; return the penalized marginal likelihood.

        expected_total[j, k] is the expected number of models at node k that
        answered item j; expected_correct[j, k] those that answered correctly.
        """
        log_p, log_q = log_probabilities(
            self.a, self.b, self.c, self.grid.nodes[:, np.newaxis]
        )
        log_lik = (self.y * self.mask) @ log_p.T + \
            ((1.0 - self.y) * self.mask) @ log_q.T
        log_joint = log_lik + np.log(self.grid.weights)
        log_marginal = logsumexp(log_joint, axis=1)
        posterior = np.exp(log_joint - log_marginal[:, np.newaxis])
        self.expected_total = self.mask.T @ posterior
        self.expected_correct = (self.y * self.mask).T @ posterior
        penalty = 0.0
        if self.config.c_prior is not None and self.c_max > 0:
            active = np.setdiff1d(np.arange(len(self.c)), self.flagged)
            penalty = math.fsum(np.atleast_1d(
                log_beta_prior(self.c[active], self.config.c_prior)
            ))
        return math.fsum(log_marginal) + penalty

    def _m_step(self):
        """Maximize each unflagged item's expected log-likelihood."""
        for idx in range(len(self.a)):
            if idx in self.flagged:
                continue
            self.a[idx], self.b[idx], self.c[idx] = self._fit_item(idx)

    def _fit_item(self, idx):
        """Run one bounded quasi-Newton fit; keep the start if it is better."""
        nodes = self.grid.nodes
        correct = self.expected_correct[idx]
        total = self.expected_total[idx]
        wrong = total - correct
        fit_guessing = self.c_max > 0
        prior = self.config.c_prior if fit_guessing else None

        def unpack(x):
            a = math.exp(x[0])
            b = x[1]
            c = self.c_max * expit(x[2]) if fit_guessing else 0.0
            return a, b, c

        def objective(x):
            a, b, c = unpack(x)
            sig = expit(a * (nodes - b))
            log_p, log_q = log_probabilities(a, b, c, nodes)
            value = np.dot(correct, log_p) + np.dot(wrong, log_q)
            weight = correct * np.exp(-log_p) - wrong * np.exp(-log_q)
            slope = (1.0 - c) * sig * (1.0 - sig)
            grad_a = np.dot(weight, slope * (nodes - b)) * a
            grad_b = -a * np.dot(weight, slope)
            gradient = [grad_a, grad_b]
            if fit_guessing:
                d_c = np.dot(weight, 1.0 - sig)
                if prior is not None:
                    value += log_beta_prior(c, prior)
                    d_c += (prior[0] - 1.0) / c - (prior[1] - 1.0) / (1.0 - c)
                gradient.append(d_c * c * (1.0 - c / self.c_max))
            return -value, -np.array(gradient)

        start = [math.log(self.a[idx]), self.b[idx]]
        bounds = [tuple(math.log(bound) for bound in self.config.a_bounds),
                  self.config.b_bounds]
        if fit_guessing:
            ratio = np.clip(self.c[idx] / self.c_max, 1e-7, 1 - 1e-7)
            start.append(float(np.clip(
                logit(ratio), -GUESSING_LOGIT_BOUND, GUESSING_LOGIT_BOUND
            )))
            bounds.append((-GUESSING_LOGIT_BOUND, GUESSING_LOGIT_BOUND))
        start = np.array(start)
        result = minimize(
            objective, start, jac=True, method="L-BFGS-B", bounds=bounds
        )
        best = result.x if result.fun <= objective(start)[0] else start
        return unpack(best)

    def _result(self, converged, iterations, trace):
        """Package the current iterate."""
        item_ids = self.matrix.item_ids
        a_low = self.config.a_bounds[0]
        flagged = {item_ids[idx] for idx in self.flagged}
        params = {
            item_id: ItemParameters(
                float(self.a[idx]), float(self.b[idx]), float(self.c[idx])
            )
            for idx, item_id in enumerate(item_ids)
        }
        lower_bound_a = [
            item_id for idx, item_id in enumerate(item_ids)
            if item_id not in flagged
            and self.a[idx] <= a_low * (1.0 + BOUND_TOLERANCE)
        ]
        return PartitionCalibration(
            params=params, converged=converged, iterations=iterations,
            trace=trace, flagged=sorted(flagged),
            lower_bound_a=sorted(lower_bound_a),
        )


def calibrate_partition(matrix_subset, config=None):
    """Fit one partition; return a PartitionCalibration.

    Its params map each item to ItemParameters on the partition's provisional
    scale (population mean 0, sd 1). A non-converged fit returns the last
    iterate with converged=False; degenerate columns are listed in flagged
    with parameters set to the bounds.
    """
    return PartitionCalibrator(matrix_subset, config).start()


# ============================ linking ========================================
@dataclass(frozen=True)
class LinkTransform:
    """Affine ability-metric change theta* = A theta + B, with A > 0."""

    A: float = 1.0  # pylint: disable=invalid-name
    B: float = 0.0  # pylint: disable=invalid-name

    def __post_init__(self):
        """Check A > 0 and finiteness."""
        if not (math.isfinite(self.A) and math.isfinite(self.B)):
            raise DegenerateLinkError(f"Non-finite link ({self.A}, {self.B}).")
        if self.A <= 0:
            raise DegenerateLinkError(f"Link scale A={self.A} not positive.")

    def inverse(self):
        """Return the transform mapping back to the original metric."""
        return LinkTransform(1.0 / self.A, -self.B / self.A)

    def transform_theta(self, theta):
        """Map abilities onto the target metric."""
        return self.A * np.asarray(theta) + self.B

    def as_tuple(self):
        """(A, B)."""
        return (self.A, self.B)


def mean_sigma_link(theta_ref, theta_k):
    """Return the transform placing theta_k on theta_ref's metric.

    A = sd(theta_ref) / sd(theta_k), B = mean(theta_ref) - A mean(theta_k),
    with population standard deviations over the common persons.
    """
    theta_ref = np.asarray(theta_ref, dtype=float)
    theta_k = np.asarray(theta_k, dtype=float)
    if theta_ref.shape != theta_k.shape or theta_ref.ndim != 1:
        raise ValueError("Link anchors must be 1-D vectors of equal length.")
    if theta_k.size == 0:
        raise DegenerateLinkError("No common persons to link on.")
    spread_k = theta_k.std()
    if spread_k == 0:
        raise DegenerateLinkError("Common-person abilities have zero spread.")
    scale = theta_ref.std() / spread_k
    return LinkTransform(scale, theta_ref.mean() - scale * theta_k.mean())


def apply_link(params, transform):
    """Return (a / A, A b + B, c)."""
    return ItemParameters(
        params.a / transform.A, transform.A * params.b + transform.B, params.c
    )


def wle_abilities(matrix, item_params, item_ids, info_form):
    """WLE ability of every model on item_ids (observed responses only)."""
    a = np.array([item_params[item_id].a for item_id in item_ids])
    b = np.array([item_params[item_id].b for item_id in item_ids])
    c = np.array([item_params[item_id].c for item_id in item_ids])
    sub = matrix.select(item_ids=item_ids).values
    estimates = {}
    for row, model_id in enumerate(matrix.model_ids):
        observed = ~np.isnan(sub[row])
        if not observed.any():
            continue
        estimates[model_id] = wle_from_arrays(
            a[observed], b[observed], c[observed], sub[row, observed],
            info_form,
        )
    return estimates


def link_partition(reference, estimates):
    """Mean-sigma link over models with unsaturated WLEs in both partitions.

    Falls back to every common model when fewer than two are unsaturated.
    """
    common = sorted(set(reference) & set(estimates))
    anchors = [model_id for model_id in common
               if not reference[model_id].saturated
               and not estimates[model_id].saturated]
    if len(anchors) < 2:
        anchors = common
    transform = mean_sigma_link(
        [reference[model_id].theta for model_id in anchors],
        [estimates[model_id].theta for model_id in anchors],
    )
    return transform, len(anchors)


# ============================ whole bank =====================================
def filter_notes(params, at_lower_bound):
    """Return the post-calibration filter reasons for one item."""
    notes = []
    if params.a <= 0 or at_lower_bound:
        notes.append(NOTE_NON_POSITIVE)
    if abs(params.b) > 4.0:
        notes.append(NOTE_DIFFICULTY)
    if params.c > 0.5:
        notes.append(NOTE_GUESSING)
    return notes


# pylint: disable=too-many-locals
def calibrate_bank(matrix, config=None):
    """Calibrate a preprocessed matrix into a linked, filtered ItemBank.

    Return (bank, references) where references maps model id to the WLE
    ability over all operational items on the partition-0 metric.
    """
    config = config or CalibrationConfig()
    partitions = partition_items(matrix.item_ids, config.partition_min_size)
    logger.info(
        "Calibrating %d items x %d models in %d partition(s).",
        matrix.shape[1], matrix.shape[0], len(partitions),
    )
    with concurrent.futures.ThreadPoolExecutor(
            max_workers=MAX_WORKERS) as executor:
        futures = [
            executor.submit(
                calibrate_partition, matrix.select(item_ids=item_ids), config
            ) for item_ids in partitions
        ]
        fits = [future.result() for future in futures]

    abilities = [
        wle_abilities(matrix, fit.params, item_ids, config.info_form)
        for fit, item_ids in zip(fits, partitions)
    ]
    items, provenance, diagnostics = {}, {}, []
    for index, (fit, item_ids) in enumerate(zip(fits, partitions)):
        transform, n_anchors = LinkTransform(), 0
        if index > 0:
            try:
                transform, n_anchors = link_partition(
                    abilities[0], abilities[index]
                )
            except DegenerateLinkError as error:
                raise CalibrationError(
                    f"Partition {index} ({item_ids[0]}..{item_ids[-1]}) "
                    f"cannot be linked: {error}"
                ) from error
            logger.info(
                "Partition %d linked with A=%.4f, B=%.4f over %d models.",
                index, transform.A, transform.B, n_anchors,
            )
        for item_id in item_ids:
            params = apply_link(fit.params[item_id], transform)
            notes = filter_notes(params, item_id in fit.lower_bound_a)
            if item_id in fit.flagged:
                notes.insert(0, NOTE_DEGENERATE)
            items[item_id] = params
            provenance[item_id] = ItemProvenance(
                partition=index, filtered=bool(notes),
                link=transform.as_tuple(), notes="; ".join(notes),
            )
        entry = fit.diagnostics()
        entry.update({
            "index": index, "n_items": len(item_ids),
            "first_item": item_ids[0], "last_item": item_ids[-1],
            "link": {"A": transform.A, "B": transform.B},
            "link_models": n_anchors,
        })
        diagnostics.append(entry)

    metadata = {
        "n_partitions": len(partitions),
        "partition_min_size": config.partition_min_size,
        "undersized_partition": len(partitions[0]) <
        config.partition_min_size,
        "restandardized": False,
        "converged": all(fit.converged for fit in fits),
        "info_form": config.info_form,
        "c_prior": list(config.c_prior) if config.c_prior else None,
        "n_models": matrix.shape[0],
        "partitions": diagnostics,
    }
    bank = ItemBank(items, provenance, scale=(0.0, 1.0), metadata=metadata)
    n_filtered = len(bank) - len(bank.operational_ids)
    logger.info(
        "Post-calibration filter flagged %d of %d items.",
        n_filtered, len(bank),
    )
    if not bank.operational_ids:
        raise CalibrationError("No operational items after calibration.")
    references = wle_abilities(
        matrix, bank.items, list(bank.operational_ids), config.info_form
    )
    return bank, references


# ============================ bank file ======================================
def bank_to_dict(bank):
    """Return the JSON document of a bank."""
    items = []
    for item_id in bank.item_ids:
        params, origin = bank[item_id], bank.provenance[item_id]
        items.append({
            "item_id": item_id, "a": params.a, "b": params.b, "c": params.c,
            "partition": origin.partition, "filtered": origin.filtered,
            "link": list(origin.link), "notes": origin.notes,
        })
    return {
        "schema_version": BANK_SCHEMA_VERSION,
        "scale": {"mean": bank.scale[0], "sd": bank.scale[1]},
        "metadata": dict(bank.metadata),
        "items": items,
    }


def export_calibration(bank, path):
    """Write a bank as JSON with sorted keys."""
    with open(path, "w", encoding="utf-8") as file:
        json.dump(bank_to_dict(bank), file, indent=2, sort_keys=True)
        file.write("\n")
    logger.info("Wrote %d items to %s.", len(bank), path)


def import_calibration(path):
    """Read a bank written by export_calibration (or by hand).

    Raises SchemaVersionError on a version mismatch and BankParseError naming
    the item whose fields are malformed.
    """
    with open(path, "r", encoding="utf-8") as file:
        try:
            document = json.load(file)
        except json.JSONDecodeError as error:
            raise BankParseError(f"Invalid JSON in {path}: {error}") \
                from error
    return bank_from_dict(document, source=path)


def bank_from_dict(document, source="<bank>"):
    """Validate and build an ItemBank from its JSON document."""
    version = document.get("schema_version")
    if version != BANK_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"Bank {source} has schema_version {version}, "
            f"expected {BANK_SCHEMA_VERSION}."
        )
    items, provenance = {}, {}
    for entry in document.get("items", []):
        item_id = str(entry.get("item_id", ""))
        if not item_id:
            raise BankParseError(f"Item without item_id in {source}.")
        if item_id in items:
            raise BankParseError(
                f"Duplicate item {item_id} in {source}.", item_id
            )
        items[item_id], provenance[item_id] = parse_item(entry, item_id)
    if not items:
        raise EmptyBankError(f"Bank {source} has no items.")
    scale = document.get("scale", {"mean": 0.0, "sd": 1.0})
    try:
        scale = (float(scale["mean"]), float(scale["sd"]))
    except (KeyError, TypeError, ValueError) as error:
        raise BankParseError(f"Malformed scale in {source}.") from error
    return ItemBank(
        items, provenance, scale=scale,
        metadata=document.get("metadata", {}),
    )


def parse_item(entry, item_id) -> Tuple[ItemParameters, ItemProvenance]:
    """Parse one item entry; errors name the item."""
    try:
        values = {name: entry[name] for name in ("a", "b")}
        values["c"] = entry.get("c", 0.0)
        for name, value in values.items():
            if isinstance(value, bool) or \
                    not isinstance(value, (int, float)):
                raise TypeError(f"{name}={value!r} is not a number")
        params = ItemParameters(
            float(values["a"]), float(values["b"]), float(values["c"])
        )
        link = entry.get("link", [1.0, 0.0])
        origin = ItemProvenance(
            partition=int(entry.get("partition", 0)),
            filtered=bool(entry.get("filtered", not params.is_operational())),
            link=(float(link[0]), float(link[1])),
            notes=str(entry.get("notes", "")),
        )
    except (KeyError, TypeError, ValueError, IndexError) as error:
        raise BankParseError(
            f"Malformed item {item_id}: {error}", item_id
        ) from error
    return params, origin
