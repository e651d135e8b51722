"""Domain types shared by every benchcat module.

ItemParameters, ItemBank, ResponseMatrix, TestRecord, AbilityEstimate and
QuadratureGrid. Banks and matrices are immutable after construction and may
be shared across concurrent sessions.
"""
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Optional, Tuple
import numpy as np
from scipy import stats
from benchcat.config import MAX_ABS_DIFFICULTY, MAX_GUESSING, \
    QUADRATURE_BOUND, QUADRATURE_NODES


EAP = "EAP"
WLE = "WLE"


@dataclass(frozen=True)
class ItemParameters:
    """3PL parameters: discrimination a, difficulty b, guessing c."""

    a: float
    b: float
    c: float = 0.0

    def __post_init__(self):
        """Check c in [0, 1) and finiteness."""
        for name in ("a", "b", "c"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"Item parameter {name}={value} not finite.")
        if not 0 <= self.c < 1:
            raise ValueError(f"Guessing c={self.c} not in [0, 1).")

    def is_operational(self):
        """Return True if the item passes the post-calibration filter."""
        return self.a > 0 and abs(self.b) <= MAX_ABS_DIFFICULTY and \
            self.c <= MAX_GUESSING


@dataclass(frozen=True)
class ItemProvenance:
    """Where an item's parameters came from."""

    partition: int = 0
    filtered: bool = False
    link: Tuple[float, float] = (1.0, 0.0)  # (A, B) applied to the item
    notes: str = ""


@dataclass(frozen=True)
class QuadratureGrid:
    """Ordered ability nodes with a normalized discrete prior."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        """Check strictly increasing nodes and a normalized prior."""
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape:
            raise ValueError("Nodes and weights must be 1-D of equal length.")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("Quadrature nodes must be strictly increasing.")
        if np.any(weights < 0):
            raise ValueError("Quadrature weights must be nonnegative.")
        total = weights.sum()
        if total <= 0:
            raise ValueError("Quadrature weights sum to zero.")
        nodes.setflags(write=False)
        weights = weights / total
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def standard_normal(cls, n_nodes=QUADRATURE_NODES,
                        bound=QUADRATURE_BOUND):
        """Equally spaced nodes on [-bound, bound] with N(0, 1) weights."""
        nodes = np.linspace(-bound, bound, n_nodes)
        return cls(nodes, stats.norm.pdf(nodes))


@dataclass(frozen=True)
class AbilityEstimate:
    """Latent ability with its standard error.

    posterior_sd is only set by EAP scoring; saturated marks a WLE solution
    that stopped at the bracket endpoint.
    """

    theta: float
    se: float
    estimator: str
    items_used: int
    posterior_sd: Optional[float] = None
    saturated: bool = False

    def to_dict(self):
        """Return a JSON-friendly dictionary."""
        return {
            "theta": self.theta, "se": self.se, "estimator": self.estimator,
            "items_used": self.items_used, "posterior_sd": self.posterior_sd,
            "saturated": self.saturated,
        }


@dataclass
class TestRecord:
    """Ordered (item, response) pairs with the per-step ability trajectory."""

    __test__ = False  # not a pytest class

    entries: List[Tuple[str, int]] = field(default_factory=list)
    trajectory: List[Tuple[float, float]] = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs):
        """Build a record without trajectory (scoring-only use)."""
        record = cls()
        for item_id, response in pairs:
            record.add(item_id, response)
        return record

    def add(self, item_id, response, theta=None, se=None):
        """Append one administered item.

        Parameters:
        item_id - identifier, must not already be in the record.
        response - 0 or 1.
        theta, se - ability after this step; when given they extend the
            trajectory so its length stays equal to the entries length.
        """
        if response not in (0, 1):
            raise ValueError(f"Response {response!r} is not binary.")
        if item_id in self.item_ids:
            raise ValueError(f"Item {item_id} already in the record.")
        self.entries.append((item_id, int(response)))
        if theta is not None:
            self.trajectory.append((float(theta), float(se)))

    @property
    def item_ids(self):
        """Identifiers in administration order."""
        return [item_id for item_id, _ in self.entries]

    @property
    def responses(self):
        """Responses in administration order as an int array."""
        return np.array([response for _, response in self.entries], dtype=int)

    def __len__(self):
        return len(self.entries)


class ItemBank:
    """Identified collection of calibrated items with provenance flags."""

    def __init__(self, items, provenance=None, scale=(0.0, 1.0),
                 metadata=None):
        """Initialize the bank.

        Parameters:
        items - mapping item id -> ItemParameters.
        provenance - mapping item id -> ItemProvenance; items without an
            entry get a default one, flagged if not operational.
        scale - (mean, sd) of the reference ability metric.
        metadata - free-form calibration diagnostics (JSON-friendly).
        """
        provenance = dict(provenance or {})
        for item_id, params in items.items():
            if item_id not in provenance:
                provenance[item_id] = ItemProvenance(
                    filtered=not params.is_operational()
                )
        unknown = set(provenance) - set(items)
        if unknown:
            raise KeyError(f"Provenance for unknown items: {sorted(unknown)}")
        self._items = MappingProxyType(dict(items))
        self._provenance = MappingProxyType(provenance)
        self.scale = (float(scale[0]), float(scale[1]))
        self.metadata = MappingProxyType(dict(metadata or {}))
        self._operational = tuple(
            item_id for item_id in sorted(self._items)
            if not self._provenance[item_id].filtered
            and self._items[item_id].is_operational()
        )

    @property
    def items(self):
        """Read-only mapping item id -> ItemParameters."""
        return self._items

    @property
    def provenance(self):
        """Read-only mapping item id -> ItemProvenance."""
        return self._provenance

    @property
    def item_ids(self):
        """All item identifiers in canonical (sorted) order."""
        return tuple(sorted(self._items))

    @property
    def operational_ids(self):
        """Selectable item identifiers in canonical order."""
        return self._operational

    def __getitem__(self, item_id):
        return self._items[item_id]

    def __contains__(self, item_id):
        return item_id in self._items

    def __len__(self):
        return len(self._items)

    def arrays(self, item_ids):
        """Return (a, b, c) numpy arrays for item_ids in the given order.

        Raises KeyError on unknown identifiers.
        """
        params = [self._items[item_id] for item_id in item_ids]
        return tuple(
            np.array([getattr(p, name) for p in params], dtype=float)
            for name in ("a", "b", "c")
        )

    def __eq__(self, other):
        if not isinstance(other, ItemBank):
            return NotImplemented
        return dict(self._items) == dict(other.items) and \
            dict(self._provenance) == dict(other.provenance) and \
            self.scale == other.scale and \
            dict(self.metadata) == dict(other.metadata)

    __hash__ = None


class ResponseMatrix:
    """Binary model x item response table; NaN marks a missing response."""

    def __init__(self, model_ids, item_ids, values):
        """Initialize and validate the matrix.

        Parameters:
        model_ids - ordered model (row) identifiers, unique.
        item_ids - ordered item (column) identifiers, unique.
        values - array-like of shape (models, items) with 0, 1 or NaN.
        """
        model_ids = tuple(str(model_id) for model_id in model_ids)
        item_ids = tuple(str(item_id) for item_id in item_ids)
        values = np.array(values, dtype=float).reshape(
            len(model_ids), len(item_ids)
        )
        check_unique(model_ids, "model")
        check_unique(item_ids, "item")
        observed = values[~np.isnan(values)]
        if not np.all((observed == 0) | (observed == 1)):
            raise ValueError("Response values must be 0, 1 or missing.")
        values.setflags(write=False)
        self.model_ids = model_ids
        self.item_ids = item_ids
        self.values = values
        self._model_index = {key: idx for idx, key in enumerate(model_ids)}
        self._item_index = {key: idx for idx, key in enumerate(item_ids)}

    @property
    def shape(self):
        """(number of models, number of items)."""
        return self.values.shape

    def has_model(self, model_id):
        """Return True if model_id is a row of the matrix."""
        return model_id in self._model_index

    def has_item(self, item_id):
        """Return True if item_id is a column of the matrix."""
        return item_id in self._item_index

    def cell(self, model_id, item_id):
        """Return one response (NaN when missing); KeyError if unknown."""
        return self.values[self._model_index[model_id],
                           self._item_index[item_id]]

    def column(self, item_id):
        """Return the response column of one item."""
        return self.values[:, self._item_index[item_id]]

    def select(self, model_ids=None, item_ids=None):
        """Return the sub-matrix on the given models and items (in order)."""
        model_ids = self.model_ids if model_ids is None else tuple(model_ids)
        item_ids = self.item_ids if item_ids is None else tuple(item_ids)
        rows = [self._model_index[key] for key in model_ids]
        cols = [self._item_index[key] for key in item_ids]
        return ResponseMatrix(
            model_ids, item_ids, self.values[np.ix_(rows, cols)]
        )

    def totals(self):
        """Total score per model over observed cells."""
        return np.nansum(self.values, axis=1)

    def accuracy(self):
        """Map model id -> proportion correct over observed cells."""
        with np.errstate(invalid="ignore"):
            means = np.nanmean(self.values, axis=1) if self.values.size \
                else np.full(len(self.model_ids), np.nan)
        return dict(zip(self.model_ids, means.tolist()))

    def __eq__(self, other):
        if not isinstance(other, ResponseMatrix):
            return NotImplemented
        return self.model_ids == other.model_ids and \
            self.item_ids == other.item_ids and \
            np.array_equal(self.values, other.values, equal_nan=True)

    __hash__ = None


def check_unique(identifiers, kind):
    """Raise ValueError naming the first duplicated identifier."""
    seen = set()
    for identifier in identifiers:
        if identifier in seen:
            raise ValueError(f"Duplicate {kind} identifier: {identifier}")
        seen.add(identifier)


def bank_from_arrays(item_ids, a, b, c=None, **kwargs):
    """Build an ItemBank from parallel arrays of parameters."""
    c = np.zeros(len(item_ids)) if c is None else c
    items: Dict[str, ItemParameters] = {
        str(item_id): ItemParameters(float(a_i), float(b_i), float(c_i))
        for item_id, a_i, b_i, c_i in zip(item_ids, a, b, c)
    }
    return ItemBank(items, **kwargs)
