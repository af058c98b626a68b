import json
import math

import numpy as np
import pytest

from mcgrad_lab.config import GroupGenConfig
from mcgrad_lab.errors import EmptyInput, InvalidInterval, LengthMismatch, NoValidGroups, SingleClassMetricUndefined
from mcgrad_lab.metrics import (
    calibration_curve,
    delta_mc,
    ecce,
    expected_calibration_error,
    generate_unspecified_groups,
    group_frame,
    mce,
    metric_report,
    performance_metrics,
    sigma_scale,
)
from mcgrad_lab.models import Dataset, GroupSet, GroupSpec, IntervalSpec


def _groups(*masks, names=None):
    names = names or [f"g{i}" for i in range(len(masks))]
    return GroupSet([GroupSpec(name, np.asarray(mask, dtype=bool)) for name, mask in zip(names, masks)])


def _brute_ecce(f, y):
    order = np.lexsort((np.arange(f.size), f))
    r = (y - f)[order]
    best = 0.0
    for i in range(r.size):
        for j in range(i, r.size):
            best = max(best, abs(r[i : j + 1].sum()))
    return best / f.size


def test_ecce_small_examples():
    assert ecce([0.5, 0.5], [0, 1]) == pytest.approx(0.25)
    assert ecce([0.0, 1.0, 1.0], [0, 1, 1]) == 0.0
    assert ecce([0.2], [1]) == pytest.approx(0.8)


@pytest.mark.parametrize("seed", range(50))
def test_ecce_matches_interval_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    # One decimal forces ties in the score order
    f = np.round(rng.random(n), 1)
    y = rng.integers(0, 2, n).astype(float)
    assert ecce(f, y) == pytest.approx(_brute_ecce(f, y), abs=1e-12)


def test_ecce_is_invariant_to_row_order_for_distinct_scores():
    rng = np.random.default_rng(0)
    f = rng.random(200)
    y = rng.integers(0, 2, 200)
    perm = rng.permutation(200)
    assert ecce(f[perm], y[perm]) == ecce(f, y)


def test_sigma_scale_examples():
    assert sigma_scale([0.5, 0.5]) == pytest.approx(0.353553, abs=1e-6)
    assert sigma_scale([0.0, 1.0]) == 0.0
    single = sigma_scale(np.full(10, 0.3))
    assert sigma_scale(np.full(20, 0.3)) == pytest.approx(single / math.sqrt(2))


def test_empty_and_mismatched_inputs():
    with pytest.raises(EmptyInput):
        ecce([], [])
    with pytest.raises(LengthMismatch):
        ecce([0.5, 0.5], [1])


def test_mce_with_whole_population_group_is_ecce_over_sigma():
    rng = np.random.default_rng(1)
    f, y = rng.random(300), rng.integers(0, 2, 300)
    value, rows = mce(f, y, _groups(np.ones(300)))
    assert value == pytest.approx(ecce(f, y) / sigma_scale(f))
    assert rows[0].n_h == 300


def test_mce_picks_the_biased_group():
    rng = np.random.default_rng(2)
    n = 4000
    member = rng.random(n) < 0.5
    f = np.full(n, 0.3)
    y = (rng.random(n) < np.where(member, 0.6, 0.3)).astype(float)
    value, rows = mce(f, y, _groups(member, ~member, names=["biased", "fine"]))
    table = {row.name: row.ratio for row in rows}
    assert value == table["biased"]
    assert table["biased"] > 5 * table["fine"]


def test_mce_never_decreases_when_groups_are_added():
    rng = np.random.default_rng(3)
    f, y = rng.random(500), rng.integers(0, 2, 500)
    masks = [rng.random(500) < 0.4 for _ in range(5)]
    previous = 0.0
    for k in range(1, 6):
        value, _ = mce(f, y, _groups(*masks[:k]))
        assert value >= previous
        previous = value


def test_degenerate_groups_are_skipped():
    f = np.array([0.0, 1.0, 0.4, 0.6])
    y = np.array([0, 1, 1, 0])
    groups = _groups([True, True, False, False], [False] * 4, [False, False, True, True], names=["hard", "empty", "ok"])
    value, rows = mce(f, y, groups)
    assert [row.name for row in rows] == ["ok"]
    report = metric_report(f, y, groups)
    assert report.skipped_groups == ["hard", "empty"]
    with pytest.raises(NoValidGroups) as info:
        mce(f, y, _groups([True, True, False, False]))
    assert info.value.skipped == ["g0"]


def test_delta_mc_over_full_interval():
    f = np.array([0.2, 0.4, 0.6, 0.8])
    y = np.array([1, 0, 1, 1])
    group = GroupSpec("all", np.ones(4, dtype=bool))
    delta, tau = delta_mc(f, y, group, IntervalSpec(1, 4))
    assert delta == pytest.approx(abs((y - f).sum()) / 4)
    assert tau == pytest.approx(math.sqrt(np.sum(f * (1 - f)) / 4))
    with pytest.raises(InvalidInterval):
        delta_mc(f, y, group, IntervalSpec(2, 5))
    with pytest.raises(InvalidInterval):
        delta_mc(f, y, group, IntervalSpec(3, 2))


@pytest.mark.parametrize("seed", range(30))
def test_mce_equals_scaled_max_over_group_intervals(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 30))
    f = rng.uniform(0.05, 0.95, n)
    y = rng.integers(0, 2, n).astype(float)
    specs = []
    for k in range(int(rng.integers(1, 5))):
        mask = rng.random(n) < 0.6
        mask[rng.integers(0, n)] = True
        specs.append(GroupSpec(f"g{k}", mask))
    value, _ = mce(f, y, GroupSet(specs))
    best = 0.0
    for spec in specs:
        n_h = spec.size
        for start in range(1, n_h + 1):
            for end in range(start, n_h + 1):
                delta, tau = delta_mc(f, y, spec, IntervalSpec(start, end))
                best = max(best, delta / tau)
    assert value / math.sqrt(n) == pytest.approx(best, rel=1e-10)


def _brute_auroc(f, y):
    pos, neg = f[y == 1], f[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def _brute_ap(f, y):
    total = y.sum()
    ap, prev_recall = 0.0, 0.0
    for t in np.unique(f)[::-1]:
        selected = f >= t
        recall = y[selected].sum() / total
        precision = y[selected].sum() / selected.sum()
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


@pytest.mark.parametrize("seed", range(15))
def test_ranking_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 100))
    f = np.round(rng.random(n), 1)
    y = rng.integers(0, 2, n).astype(float)
    y[0], y[1] = 0.0, 1.0
    perf = performance_metrics(f, y)
    assert perf["auroc"] == pytest.approx(_brute_auroc(f, y))
    assert perf["prauc"] == pytest.approx(_brute_ap(f, y))


def test_perfect_scores():
    y = np.array([0, 1, 0, 1, 1], dtype=float)
    perf = performance_metrics(y, y)
    assert perf["prauc"] == 1.0 and perf["auroc"] == 1.0
    assert perf["brier"] == 0.0 and perf["ece"] == 0.0
    assert perf["logloss"] < 1e-12


def test_single_class_ranking_metrics_are_undefined():
    with pytest.warns(SingleClassMetricUndefined):
        perf = performance_metrics([0.2, 0.7], [1, 1])
    assert math.isnan(perf["prauc"]) and math.isnan(perf["auroc"])
    assert perf["brier"] == pytest.approx((0.64 + 0.09) / 2)


def test_calibration_curve_and_ece():
    f = np.array([0.05, 0.08, 0.55, 0.95, 1.0])
    y = np.array([0, 1, 1, 1, 1])
    table = calibration_curve(f, y)
    assert table["bin"].tolist() == [0, 5, 9]
    assert table["count"].sum() == 5
    expected = (2 * abs(0.5 - 0.065) + abs(1 - 0.55) + 2 * abs(1 - 0.975)) / 5
    assert expected_calibration_error(f, y) == pytest.approx(expected)


def test_weighted_performance_metrics():
    f = np.array([0.2, 0.8])
    y = np.array([0.0, 0.0])
    with pytest.warns(SingleClassMetricUndefined):
        perf = performance_metrics(f, y, weights=[3.0, 1.0])
    assert perf["brier"] == pytest.approx((3 * 0.04 + 0.64) / 4)


def test_metric_report_bundle():
    rng = np.random.default_rng(4)
    f, y = rng.random(400), rng.integers(0, 2, 400)
    groups = _groups(rng.random(400) < 0.5, rng.random(400) < 0.3)
    report = metric_report(f, y, groups)
    assert report.n == 400 and report.n_groups == 2
    assert report.mce_absolute == pytest.approx(report.mce * sigma_scale(f))
    assert report.ecce_sigma == pytest.approx(report.ecce / sigma_scale(f))
    assert list(group_frame(report).columns) == ["group", "n_h", "ecce_h", "sigma_h", "ratio"]
    json.dumps(report.to_dict(), allow_nan=False)


def test_metric_report_without_groups_marks_mce_undefined():
    report = metric_report([0.0, 1.0], [0, 1])
    assert "mce" in report.undefined and "ecce_sigma" in report.undefined
    payload = report.to_dict()
    assert payload["mce"] is None and payload["ecce_sigma"] is None


def test_group_generation_counts_and_names():
    x = np.array([[1, 0], [1, 1], [0, 1], [1, 1]], dtype=float)
    data = Dataset(features=x, labels=np.zeros(4), feature_names=["a", "b"])
    groups = generate_unspecified_groups(data, GroupGenConfig(min_group_size=0))
    assert groups.names == ["a==1", "b==1", "a==1 & b==1"]
    assert [g.size for g in groups] == [3, 3, 2]
    atoms_only = generate_unspecified_groups(data, GroupGenConfig(min_group_size=0, max_conjunction_order=1))
    assert len(atoms_only) == 2


def test_group_generation_numeric_quantiles_and_size_filter():
    x = np.arange(100, dtype=float).reshape(-1, 1)
    data = Dataset(features=x, labels=np.zeros(100), feature_names=["age"])
    groups = generate_unspecified_groups(data, GroupGenConfig(quantiles_per_numeric=3, min_group_size=0))
    # Conjunctions never combine two thresholds on the same column
    assert groups.names == ["age<=24.75", "age<=49.5", "age<=74.25"]
    big = generate_unspecified_groups(data, GroupGenConfig(quantiles_per_numeric=3, min_group_size=40))
    assert big.names == ["age<=49.5", "age<=74.25"]


def test_group_generation_subsample_is_seeded_and_ordered():
    rng = np.random.default_rng(5)
    x = (rng.random((500, 8)) < 0.5).astype(float)
    data = Dataset(features=x, labels=np.zeros(500))
    full = generate_unspecified_groups(data, GroupGenConfig(min_group_size=0))
    capped = generate_unspecified_groups(data, GroupGenConfig(min_group_size=0, max_groups=10, seed=3))
    again = generate_unspecified_groups(data, GroupGenConfig(min_group_size=0, max_groups=10, seed=3))
    assert len(full) == 8 + 28
    assert capped.names == again.names
    positions = [full.names.index(name) for name in capped.names]
    assert positions == sorted(positions)


def test_generated_groups_re_evaluate_on_new_rows():
    rng = np.random.default_rng(6)
    train = Dataset(features=rng.normal(size=(200, 2)), labels=np.zeros(200))
    test = Dataset(features=rng.normal(size=(50, 2)), labels=np.zeros(50))
    groups = generate_unspecified_groups(train, GroupGenConfig(min_group_size=10))
    rebuilt = GroupSet.from_rules(groups.rules(), test)
    assert rebuilt.names == groups.names
    assert all(g.membership.shape == (50,) for g in rebuilt)
