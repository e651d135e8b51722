"""Test matrix ingestion and the preprocessing filters."""
import math
import numpy as np
import pytest
from benchcat.config import PreprocessConfig
from benchcat.errors import EmptyBankError, EmptyPopulationError, \
    MatrixParseError, UndefinedCorrelationError
from benchcat.model import ResponseMatrix
from benchcat.process import filter_items_discrimination, \
    filter_items_variance, filter_models, load_matrix, point_biserial, \
    preprocess, write_matrix, write_report


def write_text(path, text):
    """Write a small CSV fixture."""
    path.write_text(text, encoding="utf-8")
    return path


def simulated_matrix(n_models, n_items, seed, slope=1.5):
    """Complete 2PL responses with difficulties in [-1.5, 1.5]."""
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=n_models)
    b = rng.uniform(-1.5, 1.5, n_items)
    prob = 1 / (1 + np.exp(-slope * (theta[:, None] - b[None, :])))
    return theta, (rng.random(prob.shape) < prob).astype(float)


def test_load_matrix(tmp_path):
    """A well-formed file loads with missing cells as NaN."""
    path = write_text(tmp_path/"m.csv", "model_id,q1,q2\nm1,1,0\nm2,,1\n")
    matrix = load_matrix(path)
    assert matrix.model_ids == ("m1", "m2")
    assert matrix.item_ids == ("q1", "q2")
    assert matrix.cell("m1", "q1") == 1.0
    assert math.isnan(matrix.cell("m2", "q1"))


def test_load_matrix_errors(tmp_path):
    """Parse errors name the row and column at fault."""
    path = write_text(tmp_path/"bad.csv", "model_id,q1\nm1,1\nm2,2\n")
    with pytest.raises(MatrixParseError) as error:
        load_matrix(path)
    assert error.value.row == 3
    assert error.value.column == "q1"
    assert "row 3" in str(error.value)

    path = write_text(tmp_path/"header.csv", "model,q1\nm1,1\n")
    with pytest.raises(MatrixParseError):
        load_matrix(path)
    path = write_text(tmp_path/"dup.csv", "model_id,q1,q1\nm1,1,0\n")
    with pytest.raises(MatrixParseError) as error:
        load_matrix(path)
    assert error.value.column == "q1"
    path = write_text(tmp_path/"dupmodel.csv", "model_id,q1\nm1,1\nm1,0\n")
    with pytest.raises(MatrixParseError):
        load_matrix(path)
    path = write_text(tmp_path/"empty.csv", "")
    with pytest.raises(MatrixParseError):
        load_matrix(path)


def test_write_matrix(tmp_path):
    """A written matrix loads back unchanged."""
    matrix = ResponseMatrix(["m1", "m2"], ["q1", "q2", "q3"],
                            [[1, 0, np.nan], [0, 1, 1]])
    write_matrix(matrix, tmp_path/"out.csv")
    assert load_matrix(tmp_path/"out.csv") == matrix


def test_filter_models():
    """Incomplete models go first, then the lowest-scoring tail."""
    matrix = ResponseMatrix(["m0", "m1", "m2", "m3"], ["q1", "q2", "q3"],
                            [[1, 1, 1], [1, 0, 0], [0, 0, 1], [1, 1, 0]])
    same, report = filter_models(matrix, 0.0)
    assert same == matrix
    assert report.models_removed_incomplete == 0

    kept, report = filter_models(matrix, 0.25)
    assert kept.model_ids == ("m0", "m2", "m3")
    assert report.models_removed_extreme == 1

    gappy = ResponseMatrix(["m0", "m1"], ["q1"], [[1], [np.nan]])
    kept, report = filter_models(gappy, 0.0)
    assert kept.model_ids == ("m0",)
    assert report.models_removed_incomplete == 1

    with pytest.raises(EmptyPopulationError):
        filter_models(ResponseMatrix(["m0"], ["q1"], [[np.nan]]))


def test_filter_models_nearest_rank():
    """With 1,000 models and floor 0.001 exactly one model is removed."""
    _, values = simulated_matrix(1000, 20, 5)
    model_ids = [f"m{idx:04d}" for idx in range(1000)]
    matrix = ResponseMatrix(model_ids, [f"q{idx}" for idx in range(20)],
                            values)
    kept, report = filter_models(matrix, 0.001)
    assert report.models_removed_extreme == 1
    totals = matrix.totals()
    lowest = min(range(1000), key=lambda idx: (totals[idx], model_ids[idx]))
    assert model_ids[lowest] not in kept.model_ids
    assert len(kept.model_ids) == 999


def test_filter_items_variance():
    """Constant columns are low variance; accuracy 0.96 hits the ceiling."""
    n_models = 100
    half = np.array([1.0, 0.0] * 50)
    ceiling = np.zeros(n_models)
    ceiling[:96] = 1.0
    values = np.column_stack([half, np.ones(n_models), ceiling])
    matrix = ResponseMatrix([f"m{idx:03d}" for idx in range(n_models)],
                            ["half", "const", "easy"], values)
    kept, report = filter_items_variance(matrix)
    assert kept.item_ids == ("half",)
    assert report.items_removed_low_variance == 1
    assert report.items_removed_ceiling == 1

    with pytest.raises(EmptyBankError):
        filter_items_variance(matrix.select(item_ids=["const"]))


def test_point_biserial():
    """r_pb equals the Pearson correlation and flips sign with the item."""
    totals = np.array([1.0, 2.0, 3.0, 4.0])
    item = np.array([0.0, 0.0, 1.0, 1.0])
    assert point_biserial(item, totals) == pytest.approx(0.894427191,
                                                         abs=1e-9)
    assert point_biserial(1 - item, totals) == \
        pytest.approx(-0.894427191, abs=1e-9)

    rng = np.random.default_rng(2)
    item = rng.integers(0, 2, 200).astype(float)
    totals = item * 3 + rng.normal(size=200)
    assert point_biserial(item, totals) == \
        pytest.approx(np.corrcoef(item, totals)[0, 1], abs=1e-12)

    with pytest.raises(UndefinedCorrelationError):
        point_biserial(np.ones(4), np.array([1.0, 2.0, 3.0, 4.0]))
    with pytest.raises(UndefinedCorrelationError):
        point_biserial(np.array([0.0, 1.0]), np.array([2.0, 2.0]))


def test_filter_items_discrimination():
    """Items below the floor, anti-discriminating items and constants go."""
    totals_item = np.array([0, 0, 0, 1, 1, 1, 1, 1, 0, 1], dtype=float)
    anti = 1 - totals_item
    values = np.column_stack([totals_item, totals_item, anti])
    matrix = ResponseMatrix([f"m{idx}" for idx in range(10)],
                            ["good", "twin", "anti"], values)
    kept, report = filter_items_discrimination(matrix, 0.1)
    assert kept.item_ids == ("good", "twin")
    assert report.items_removed_discrimination == 1
    assert report.per_item_rpb["anti"] < 0

    # The floor is inclusive: an item exactly at the floor stays.
    pair = matrix.select(item_ids=["good", "twin"])
    rpb = report.per_item_rpb["good"]
    kept, _ = filter_items_discrimination(pair, rpb)
    assert kept.item_ids == ("good", "twin")
    with pytest.raises(EmptyBankError):
        filter_items_discrimination(
            ResponseMatrix([f"m{idx}" for idx in range(10)], ["flat"],
                           np.ones((10, 1)))
        )
    with pytest.raises(EmptyPopulationError):
        filter_items_discrimination(matrix.select(model_ids=["m0"]))


def test_preprocess_fixpoint():
    """A clean simulated matrix passes every filter unchanged."""
    _, values = simulated_matrix(300, 15, 9)
    matrix = ResponseMatrix([f"m{idx:03d}" for idx in range(300)],
                            [f"q{idx:02d}" for idx in range(15)], values)
    filtered, report = preprocess(matrix, PreprocessConfig(
        percentile_floor=0.0
    ))
    assert filtered == matrix
    assert report.output_items == 15
    assert report.output_models == 300


def test_preprocess_constructed_violations(tmp_path):
    """Exactly the seeded constant, ceiling, anti items and gappy models go."""
    rng = np.random.default_rng(20240601)
    n_models = 500
    theta, clean = simulated_matrix(n_models, 40, 17)
    constant = np.column_stack([np.ones(n_models)] * 3 +
                               [np.zeros(n_models)] * 2)
    ceiling = np.zeros((n_models, 3))
    for column in range(3):
        ceiling[rng.choice(n_models, 485, replace=False), column] = 1.0
    anti_prob = 1 / (1 + np.exp(1.5 * theta[:, None] *
                                np.ones((1, 4))))
    anti = (rng.random((n_models, 4)) < anti_prob).astype(float)
    values = np.hstack([clean, constant, ceiling, anti])

    clean_ids = [f"clean{idx:02d}" for idx in range(40)]
    item_ids = clean_ids + [f"const{idx}" for idx in range(5)] + \
        [f"ceiling{idx}" for idx in range(3)] + \
        [f"anti{idx}" for idx in range(4)]
    gappy = values[:2].copy()
    gappy[0, 0] = np.nan
    gappy[1, 7] = np.nan
    model_ids = [f"m{idx:03d}" for idx in range(n_models)] + ["gap0", "gap1"]
    matrix = ResponseMatrix(model_ids, item_ids, np.vstack([values, gappy]))

    filtered, report = preprocess(matrix)
    assert filtered.item_ids == tuple(clean_ids)
    assert filtered.model_ids == tuple(model_ids[:n_models])
    assert report.models_removed_incomplete == 2
    assert report.models_removed_extreme == 0
    assert report.items_removed_low_variance == 5
    assert report.items_removed_ceiling == 3
    assert report.items_removed_discrimination == 4
    assert report.input_items == 52 and report.output_items == 40

    write_report(report, tmp_path/"report.json")
    text = (tmp_path/"report.json").read_text(encoding="utf-8")
    assert '"items_removed_ceiling": 3' in text


def mixed_direction_matrix(seed):
    """8 weakly positive and 12 strongly negative 2PL items, 200 models."""
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=200)
    slopes = np.concatenate([np.full(8, 0.6), np.full(12, -1.5)])
    b = rng.uniform(-1.0, 1.0, 20)
    prob = 1 / (1 + np.exp(-slopes[None, :] * (theta[:, None] - b[None, :])))
    values = (rng.random(prob.shape) < prob).astype(float)
    return ResponseMatrix([f"m{idx:03d}" for idx in range(200)],
                          [f"q{idx:02d}" for idx in range(20)], values)


def test_preprocess_idempotent():
    """A second preprocess pass removes nothing."""
    config = PreprocessConfig(percentile_floor=0.0)
    for seed in (3, 4, 5):
        once, report = preprocess(mixed_direction_matrix(seed), config)
        twice, second = preprocess(once, config)
        assert twice == once
        assert second.items_removed_discrimination == 0
        assert report.input_items - report.output_items == \
            report.items_removed_low_variance + \
            report.items_removed_ceiling + \
            report.items_removed_discrimination


def test_discrimination_floor_monotone():
    """Raising rpb_floor never keeps more items."""
    rng = np.random.default_rng(12)
    theta = rng.normal(size=400)
    slopes = rng.uniform(0.0, 2.5, 30)
    b = rng.uniform(-1.5, 1.5, 30)
    prob = 1 / (1 + np.exp(-slopes[None, :] * (theta[:, None] - b[None, :])))
    matrix = ResponseMatrix(
        [f"m{idx:03d}" for idx in range(400)],
        [f"q{idx:02d}" for idx in range(30)],
        (rng.random(prob.shape) < prob).astype(float),
    )
    retained = [
        filter_items_discrimination(matrix, floor)[0].shape[1]
        for floor in (-1.0, 0.0, 0.1, 0.2, 0.3, 0.4)
    ]
    assert retained[0] == 30
    assert all(later <= earlier
               for earlier, later in zip(retained, retained[1:]))


def test_load_matrix_encoding(tmp_path):
    """Bytes that are not UTF-8 are a parse error."""
    path = tmp_path/"latin.csv"
    path.write_bytes(b"model_id,q1\nm\xff1,1\n")
    with pytest.raises(MatrixParseError):
        load_matrix(path)
