import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit, logit

from mcgrad_lab.config import GBDTConfig, McGradConfig
from mcgrad_lab.dataset import augment_with_score
from mcgrad_lab.errors import DataError, DimensionMismatch, EmptyData, ScoreLengthMismatch
from mcgrad_lab.gbdt import predict_ensemble
from mcgrad_lab.mcgrad import (
    McGradModel,
    _bounded_search,
    feature_importance,
    fit_mcgrad,
    inverse_sigmoid,
    optimize_rescale,
    predict_mcgrad,
)
from mcgrad_lab.models import SCORE_COLUMN, Dataset

FAST = McGradConfig(gbdt=GBDTConfig(n_estimators=60, min_child_samples=40, min_sum_hessian_in_leaf=5.0), max_rounds=5)


def _biased_segment(n=10000, seed=0, offset=1.0):
    """Base scores under-predict rows with x0 == 1 by ``offset`` logits."""
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.integers(0, 2, n), rng.normal(size=n)]).astype(float)
    true_logits = -0.5 + 0.8 * x[:, 1] + offset * x[:, 0]
    y = (rng.random(n) < expit(true_logits)).astype(float)
    base = expit(true_logits - offset * x[:, 0])
    return Dataset(features=x, labels=y), base


def test_inverse_sigmoid_clamps_extremes():
    values = inverse_sigmoid(np.array([0.5, 1.0, 0.0]))
    assert values[0] == 0.0
    assert values[1] == pytest.approx(16.118, abs=1e-3)
    assert values[2] == pytest.approx(-values[1])
    p = np.array([0.1, 0.3, 0.9])
    assert np.allclose(expit(inverse_sigmoid(p)), p)


def test_rescale_of_zero_logits_is_one():
    assert optimize_rescale(np.zeros(10), np.array([0, 1] * 5)) == 1.0


def test_rescale_recovers_shrunken_logits():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=2.0, size=100000)
    y = (rng.random(z.size) < expit(z)).astype(float)
    assert optimize_rescale(0.5 * z, y) == pytest.approx(2.0, abs=0.05)


def test_bounded_search_agrees_with_newton():
    rng = np.random.default_rng(1)
    z = rng.normal(size=5000)
    y = (rng.random(z.size) < expit(0.7 * z)).astype(float)
    w = np.ones_like(z)
    assert _bounded_search(z, y, w) == pytest.approx(optimize_rescale(z, y), abs=1e-4)


def test_identity_model_returns_base_scores():
    model = McGradModel(n_features=2)
    base = np.array([0.0, 0.25, 1.0])
    assert np.array_equal(predict_mcgrad(model, np.ones((3, 2)), base), base)
    assert predict_mcgrad(model, np.ones((3, 2)), base, return_all_rounds=True).shape == (0, 3)


def test_segment_bias_is_corrected():
    data, base = _biased_segment()
    model = fit_mcgrad(data, base, FAST)
    assert model.n_rounds >= 1
    assert "x0" in set(feature_importance(model)["feature"])
    calibrated = predict_mcgrad(model, data, base)
    group = data.features[:, 0] == 1
    base_gap = abs(data.labels[group].mean() - base[group].mean())
    new_gap = abs(data.labels[group].mean() - calibrated[group].mean())
    assert new_gap < 0.25 * base_gap


def test_trace_accepts_only_strict_improvements():
    data, base = _biased_segment(seed=1)
    model = fit_mcgrad(data, base, FAST)
    trace = model.trace
    assert trace[0].round == 0 and trace[0].n_trees == 0
    accepted = [rec for rec in trace[1:] if rec.accepted]
    assert len(accepted) == model.n_rounds
    losses = [trace[0].valid_logloss] + [rec.valid_logloss for rec in accepted]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    if len(trace) - 1 > len(accepted):
        assert not trace[-1].accepted
        assert trace[-1].valid_logloss >= losses[-1]
    assert list(model.trace_frame()["round"]) == list(range(len(trace)))


def test_max_rounds_one_caps_rounds():
    data, base = _biased_segment(n=4000, seed=2)
    model = fit_mcgrad(data, base, McGradConfig(gbdt=FAST.gbdt, max_rounds=1))
    assert model.n_rounds <= 1
    assert len(model.trace) <= 2


def test_no_rescale_fixes_theta():
    data, base = _biased_segment(n=4000, seed=3)
    model = fit_mcgrad(data, base, McGradConfig(gbdt=FAST.gbdt, max_rounds=3, rescale_enabled=False))
    assert all(r.theta == 1.0 for r in model.rounds)
    assert all(rec.theta == 1.0 for rec in model.trace)


def test_replay_matches_manual_round_application():
    data, base = _biased_segment(n=4000, seed=4)
    model = fit_mcgrad(data, base, FAST)
    logits = inverse_sigmoid(base, model.logit_clamp_eps)
    for r in model.rounds:
        augmented = augment_with_score(data, expit(logits))
        logits = r.theta * (logits + predict_ensemble(r.ensemble, augmented))
    assert np.array_equal(predict_mcgrad(model, data.features, base), expit(logits))


def test_all_rounds_output_ends_at_final_prediction():
    data, base = _biased_segment(n=4000, seed=5)
    model = fit_mcgrad(data, base, FAST)
    per_round = predict_mcgrad(model, data, base, return_all_rounds=True)
    assert per_round.shape == (model.n_rounds, data.n)
    if model.n_rounds:
        assert np.array_equal(per_round[-1], predict_mcgrad(model, data, base))


def test_model_round_trip_is_bit_exact():
    data, base = _biased_segment(n=4000, seed=6)
    model = fit_mcgrad(data, base, FAST)
    restored = McGradModel.from_dict(json.loads(json.dumps(model.to_dict(), allow_nan=False)))
    assert np.array_equal(predict_mcgrad(model, data, base), predict_mcgrad(restored, data, base))
    assert restored.trace == model.trace


def test_improves_held_out_log_loss():
    data, base = _biased_segment(n=12000, seed=7)
    train, test = data.take(np.arange(8000)), data.take(np.arange(8000, 12000))
    model = fit_mcgrad(train, base[:8000], FAST)
    calibrated = predict_mcgrad(model, test, base[8000:])

    def loss(p):
        p = np.clip(p, 1e-15, 1 - 1e-15)
        return -np.mean(test.labels * np.log(p) + (1 - test.labels) * np.log(1 - p))

    assert loss(calibrated) < loss(base[8000:])


@pytest.mark.slow
def test_calibrated_base_selects_zero_rounds():
    rng = np.random.default_rng(0)
    n = 200_000
    x = rng.normal(size=(n, 3))
    base = expit(x @ np.array([1.0, -0.5, 0.25]))
    y = (rng.random(n) < base).astype(float)
    model = fit_mcgrad(Dataset(features=x, labels=y), base)
    assert model.n_rounds == 0
    assert model.is_identity
    assert np.array_equal(predict_mcgrad(model, x, base), base)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_validation_trace_never_regresses(seed):
    data, base = _biased_segment(n=4000, seed=100 + seed, offset=0.5 + 0.05 * seed)
    model = fit_mcgrad(data, base, FAST)
    accepted = [model.trace[0].valid_logloss] + [rec.valid_logloss for rec in model.trace[1:] if rec.accepted]
    assert all(b < a for a, b in zip(accepted, accepted[1:]))
    assert accepted[-1] <= accepted[0]


def test_thread_count_does_not_change_predictions():
    data, base = _biased_segment(n=4000, seed=8)
    single = fit_mcgrad(data, base, McGradConfig(gbdt=replace(FAST.gbdt, n_jobs=1), max_rounds=FAST.max_rounds))
    threaded = fit_mcgrad(data, base, McGradConfig(gbdt=replace(FAST.gbdt, n_jobs=4), max_rounds=FAST.max_rounds))
    assert threaded.trace == single.trace
    assert [r.theta for r in threaded.rounds] == [r.theta for r in single.rounds]
    assert np.array_equal(predict_mcgrad(threaded, data, base), predict_mcgrad(single, data, base))


def test_input_validation():
    data, base = _biased_segment(n=100)
    with pytest.raises(ScoreLengthMismatch):
        fit_mcgrad(data, base[:-1], FAST)
    with pytest.raises(EmptyData):
        fit_mcgrad(Dataset(features=np.zeros((0, 2)), labels=np.zeros(0)), np.zeros(0), FAST)
    reserved = Dataset(features=data.features, labels=data.labels, feature_names=["x0", SCORE_COLUMN])
    with pytest.raises(DataError):
        fit_mcgrad(reserved, base, FAST)
    with pytest.raises(DimensionMismatch):
        predict_mcgrad(McGradModel(n_features=2), np.ones((3, 4)), np.full(3, 0.5))


def test_logit_helper_matches_scipy():
    p = np.array([0.2, 0.5, 0.8])
    assert np.allclose(inverse_sigmoid(p), logit(p))
