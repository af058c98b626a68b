import json

import numpy as np
import pytest
from scipy.special import expit

from mcgrad_lab.config import GBDTConfig
from mcgrad_lab.errors import AllSameLabelWarning, DimensionMismatch, EmptyData, TrainingError
from mcgrad_lab.gbdt import (
    LEAF,
    BinMapper,
    TreeEnsemble,
    feature_importance,
    fit_gbdt,
    fit_gbdt_with_output,
    leaf_value,
    predict_ensemble,
    split_gain,
    train_logloss_per_tree,
    verify_leaves,
)
from mcgrad_lab.models import Dataset

# Permissive settings: every positive-gain split is legal
LOOSE = dict(min_child_samples=1, min_sum_hessian_in_leaf=0.0, min_gain_to_split=0.0)


def _make_data(n=500, d=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    logits = 1.5 * x[:, 0] - x[:, 1] + 0.5 * (x[:, 2] > 0)
    y = (rng.random(n) < expit(logits)).astype(float)
    return Dataset(features=x, labels=y)


def test_all_ones_single_leaf_value():
    data = Dataset(features=np.zeros((4, 1)), labels=np.ones(4))
    cfg = GBDTConfig(learning_rate=1.0, n_estimators=1, lambda_l2=0.0, **LOOSE)
    with pytest.warns(AllSameLabelWarning):
        model, output = fit_gbdt_with_output(data, np.zeros(4), cfg)
    assert model.trees[0].n_nodes == 1
    assert np.all(output == 2.0)
    assert np.all(predict_ensemble(model, data) == 2.0)


def test_leaf_value_and_gain_formulas():
    cfg = GBDTConfig(learning_rate=0.5, lambda_l2=1.0)
    assert leaf_value(-3.0, 2.0, cfg) == pytest.approx(0.5)
    assert leaf_value(1.0, 0.0, GBDTConfig(lambda_l2=0.0)) == 0.0
    assert split_gain(-1.0, 1.0, 1.0, 1.0, 0.0) == pytest.approx(1.0)


def test_bin_mapper_midpoints_and_missing_bin():
    x = np.array([[1.0], [2.0], [4.0], [np.nan]])
    mapper = BinMapper.fit(x, max_bins=8)
    assert mapper.edges[0].tolist() == [1.5, 3.0]
    assert mapper.transform(x)[:, 0].tolist() == [0, 1, 2, 8]


def test_bin_mapper_quantiles_when_many_values():
    x = np.arange(1000, dtype=float).reshape(-1, 1)
    mapper = BinMapper.fit(x, max_bins=16)
    assert mapper.edges[0].size <= 15
    bins = mapper.transform(x)[:, 0]
    assert np.all(np.diff(bins.astype(int)) >= 0)


def test_perfect_separator_is_chosen_at_root():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 200).astype(float)
    x = np.column_stack([rng.normal(size=200), y])
    cfg = GBDTConfig(n_estimators=1, num_leaves=2, **LOOSE)
    tree = fit_gbdt(Dataset(features=x, labels=y), None, cfg).trees[0]
    assert tree.feature[0] == 1
    assert tree.threshold[0] == pytest.approx(0.5)


def _brute_force_root(x, g, h, lambda_l2):
    best = (0.0, None, None)
    for j in range(x.shape[1]):
        values = np.unique(x[:, j])
        for t in values[:-1] + np.diff(values) / 2.0:
            left = x[:, j] <= t
            gain = split_gain(g[left].sum(), h[left].sum(), g[~left].sum(), h[~left].sum(), lambda_l2)
            if gain > best[0]:
                best = (gain, j, t)
    return best


@pytest.mark.parametrize("seed", range(20))
def test_histogram_split_matches_exhaustive_search(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(20, 200))
    x = rng.normal(size=(n, 3))
    y = rng.integers(0, 2, n).astype(float)
    init = rng.normal(size=n)
    cfg = GBDTConfig(n_estimators=1, num_leaves=2, lambda_l2=0.1, max_bins=255, **LOOSE)
    tree = fit_gbdt(Dataset(features=x, labels=y), init, cfg).trees[0]

    p = expit(init)
    gain, feature, threshold = _brute_force_root(x, p - y, p * (1 - p), 0.1)
    if feature is None:
        assert tree.n_nodes == 1
    else:
        assert tree.feature[0] == feature
        assert tree.threshold[0] == pytest.approx(threshold)
        assert tree.gain[0] == pytest.approx(gain, rel=1e-9)


def test_leaf_values_match_routed_rows():
    data = _make_data(seed=1)
    init = np.zeros(data.n)
    cfg = GBDTConfig(n_estimators=1, num_leaves=6, min_child_samples=10, min_sum_hessian_in_leaf=1.0)
    tree = fit_gbdt(data, init, cfg).trees[0]
    p = expit(init)
    g, h = p - data.labels, p * (1 - p)
    leaves = tree.apply(data.features)
    for leaf in np.unique(leaves):
        rows = leaves == leaf
        expected = -g[rows].sum() / (h[rows].sum() + cfg.lambda_l2) * cfg.learning_rate
        assert tree.value[leaf] == pytest.approx(expected, rel=1e-10)


def test_leaf_check_rejects_tampered_or_undersized_leaves():
    data = _make_data(seed=1)
    init = np.zeros(data.n)
    cfg = GBDTConfig(n_estimators=1, num_leaves=6, min_child_samples=10, min_sum_hessian_in_leaf=1.0)
    tree = fit_gbdt(data, init, cfg).trees[0]
    p = expit(init)
    g, h = p - data.labels, p * (1 - p)
    leaves = tree.apply(data.features)
    leaf_rows = {int(leaf): np.nonzero(leaves == leaf)[0] for leaf in np.unique(leaves)}
    verify_leaves(tree, leaf_rows, g, h, cfg)

    first = min(leaf_rows)
    tree.value[first] += 0.01
    with pytest.raises(TrainingError, match="stores"):
        verify_leaves(tree, leaf_rows, g, h, cfg)
    tree.value[first] -= 0.01
    strict = GBDTConfig(n_estimators=1, num_leaves=6, min_child_samples=data.n, min_sum_hessian_in_leaf=1.0)
    with pytest.raises(TrainingError, match="floors"):
        verify_leaves(tree, leaf_rows, g, h, strict)


def test_split_constraints_hold_for_every_leaf():
    data = _make_data(n=2000, seed=2)
    cfg = GBDTConfig(n_estimators=10, num_leaves=8, min_child_samples=30, min_sum_hessian_in_leaf=2.0)
    for tree in fit_gbdt(data, None, cfg).trees:
        assert tree.n_leaves <= 8
        if tree.n_nodes > 1:
            leaves = tree.leaves()
            assert np.all(tree.count[leaves] >= 30)
            assert np.all(tree.sum_hessian[leaves] >= 2.0)


def test_max_depth_limits_tree_depth():
    data = _make_data(n=2000, seed=4)
    cfg = GBDTConfig(n_estimators=5, num_leaves=31, max_depth=2, **LOOSE)
    assert all(tree.depth() <= 2 for tree in fit_gbdt(data, None, cfg).trees)


def test_huge_hessian_floor_keeps_root_only():
    data = _make_data(n=100, seed=5)
    cfg = GBDTConfig(n_estimators=3, min_child_samples=1, min_sum_hessian_in_leaf=1000.0)
    model = fit_gbdt(data, None, cfg)
    assert all(tree.n_nodes == 1 for tree in model.trees)


@pytest.mark.parametrize("seed", range(10))
def test_train_loss_never_increases_per_tree(seed):
    data = _make_data(n=1500, seed=seed)
    init = np.random.default_rng(seed).normal(scale=0.5, size=data.n)
    model = fit_gbdt(data, init, GBDTConfig())
    losses = train_logloss_per_tree(model, data, init)
    assert losses.size == model.n_trees + 1
    assert np.all(np.diff(losses) <= 1e-12)


def test_fit_output_equals_prediction_bitwise():
    data = _make_data(seed=6)
    init = np.linspace(-1, 1, data.n)
    model, output = fit_gbdt_with_output(data, init, GBDTConfig(n_estimators=20, **LOOSE))
    assert np.array_equal(output, predict_ensemble(model, data))


def test_missing_values_follow_default_direction():
    data = _make_data(seed=7)
    features = data.features.copy()
    features[::7, 0] = np.nan
    data = Dataset(features=features, labels=data.labels)
    model, output = fit_gbdt_with_output(data, None, GBDTConfig(n_estimators=15, **LOOSE))
    assert np.array_equal(output, predict_ensemble(model, data))
    assert np.isfinite(output).all()


def test_thread_count_does_not_change_the_model():
    data = _make_data(n=1000, d=6, seed=8)
    single = fit_gbdt(data, None, GBDTConfig(n_estimators=10, n_jobs=1, **LOOSE))
    threaded = fit_gbdt(data, None, GBDTConfig(n_estimators=10, n_jobs=4, **LOOSE))
    single_dict, threaded_dict = single.to_dict(), threaded.to_dict()
    single_dict["config"].pop("n_jobs")
    threaded_dict["config"].pop("n_jobs")
    assert single_dict == threaded_dict


def test_json_round_trip_is_bit_exact():
    data = _make_data(seed=9)
    model = fit_gbdt(data, None, GBDTConfig(n_estimators=10, **LOOSE))
    restored = TreeEnsemble.from_dict(json.loads(json.dumps(model.to_dict(), allow_nan=False)))
    assert np.array_equal(predict_ensemble(model, data), predict_ensemble(restored, data))


def test_empty_ensemble_and_prefix_prediction():
    assert np.array_equal(predict_ensemble(TreeEnsemble(trees=[], n_features=2), np.ones((3, 2))), np.zeros(3))
    data = _make_data(seed=10)
    model = fit_gbdt(data, None, GBDTConfig(n_estimators=4, **LOOSE))
    assert np.array_equal(predict_ensemble(model, data, n_trees=0), np.zeros(data.n))


def test_input_validation():
    data = _make_data(n=20)
    model = fit_gbdt(data, None, GBDTConfig(n_estimators=1, **LOOSE))
    with pytest.raises(DimensionMismatch):
        predict_ensemble(model, np.ones((5, 2)))
    with pytest.raises(EmptyData):
        fit_gbdt(Dataset(features=np.zeros((0, 2)), labels=np.zeros(0)), None, GBDTConfig())


def test_feature_importance_ranks_informative_feature_first():
    data = _make_data(n=3000, seed=11)
    model = fit_gbdt(data, None, GBDTConfig(n_estimators=20, **LOOSE))
    frame = feature_importance(model)
    assert list(frame.columns) == ["feature", "split_count", "total_gain"]
    assert frame["feature"].iloc[0] == "x0"
    internal = sum(int((t.feature != LEAF).sum()) for t in model.trees)
    assert frame["split_count"].sum() == internal
