"""Test the domain types."""
import math
import numpy as np
import pytest
from benchcat.model import ItemBank, ItemParameters, ItemProvenance, \
    QuadratureGrid, ResponseMatrix, TestRecord, bank_from_arrays


def test_item_parameters_validation():
    """Guessing must lie in [0, 1) and every parameter must be finite."""
    with pytest.raises(ValueError):
        ItemParameters(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        ItemParameters(1.0, math.nan, 0.1)
    assert ItemParameters(1.0, 3.9, 0.5).is_operational()
    assert not ItemParameters(-0.3, 0.0, 0.1).is_operational()
    assert not ItemParameters(1.0, 4.5, 0.1).is_operational()
    assert not ItemParameters(1.0, 0.0, 0.6).is_operational()


def test_quadrature_grid():
    """Weights are normalized; nodes must increase."""
    grid = QuadratureGrid.standard_normal(81, 6.0)
    assert len(grid.nodes) == 81
    assert grid.weights.sum() == pytest.approx(1.0)
    assert grid.nodes[0] == -6.0 and grid.nodes[-1] == 6.0
    with pytest.raises(ValueError):
        QuadratureGrid(np.array([0.0, 0.0]), np.array([1.0, 1.0]))


def test_test_record():
    """Records reject repeats and non-binary answers."""
    record = TestRecord()
    record.add("q1", 1, 0.4, 0.9)
    record.add("q2", 0, 0.1, 0.7)
    assert record.item_ids == ["q1", "q2"]
    assert list(record.responses) == [1, 0]
    assert len(record.trajectory) == len(record) == 2
    with pytest.raises(ValueError):
        record.add("q1", 0)
    with pytest.raises(ValueError):
        record.add("q3", 2)


def test_item_bank_operational_ids():
    """Filtered and out-of-range items are not selectable."""
    items = {
        "q1": ItemParameters(1.0, 0.0, 0.1),
        "q2": ItemParameters(1.2, 5.0, 0.1),
        "q3": ItemParameters(0.8, -1.0, 0.0),
    }
    provenance = {"q3": ItemProvenance(filtered=True, notes="manual")}
    bank = ItemBank(items, provenance)
    assert bank.item_ids == ("q1", "q2", "q3")
    assert bank.operational_ids == ("q1",)
    assert bank.provenance["q2"].filtered
    a, b, c = bank.arrays(["q3", "q1"])
    assert list(a) == [0.8, 1.0] and list(b) == [-1.0, 0.0]
    assert list(c) == [0.0, 0.1]
    a[0] = 9.0
    assert bank.arrays(["q3", "q1"])[0][0] == 0.8
    assert bank["q3"].a == 0.8
    with pytest.raises(KeyError):
        bank.arrays(["q9"])
    with pytest.raises(KeyError):
        ItemBank(items, {"q9": ItemProvenance()})


def test_bank_equality():
    """Banks compare by parameters, provenance, scale and metadata."""
    first = bank_from_arrays(["q1", "q2"], [1.0, 2.0], [0.0, 0.5])
    second = bank_from_arrays(["q1", "q2"], [1.0, 2.0], [0.0, 0.5])
    third = bank_from_arrays(["q1", "q2"], [1.0, 2.0], [0.0, 0.6])
    assert first == second
    assert first != third


def test_response_matrix():
    """Selection keeps order; values are read-only and binary."""
    matrix = ResponseMatrix(["m1", "m2", "m3"], ["q1", "q2"],
                            [[1, 0], [np.nan, 1], [1, 1]])
    assert matrix.shape == (3, 2)
    assert math.isnan(matrix.cell("m2", "q1"))
    assert list(matrix.totals()) == [1.0, 1.0, 2.0]
    assert matrix.accuracy() == {"m1": 0.5, "m2": 1.0, "m3": 1.0}
    sub = matrix.select(model_ids=["m3", "m1"], item_ids=["q2"])
    assert sub.model_ids == ("m3", "m1")
    assert list(sub.column("q2")) == [1.0, 0.0]
    with pytest.raises(ValueError):
        matrix.values[0, 0] = 0.0
    with pytest.raises(ValueError):
        ResponseMatrix(["m1"], ["q1"], [[2]])
    with pytest.raises(ValueError):
        ResponseMatrix(["m1", "m1"], ["q1"], [[1], [0]])
