"""Baseline predictor and calibrators: logistic, Platt, isotonic, HKRR and DFMC."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, List, Optional, Tuple

import numpy as np
from scipy.special import expit
from sklearn.isotonic import isotonic_regression

from .config import GBDTConfig, HKRRConfig, dfmc_gbdt_config
from .errors import (
    DegenerateLabelsWarning,
    EmptyData,
    NonConvergenceWarning,
    ScoreOutOfRange,
    ShapeMismatch,
)
from .gbdt import TreeEnsemble, fit_gbdt, predict_ensemble
from .mcgrad import McGradModel, inverse_sigmoid, predict_mcgrad
from .models import SCORE_COLUMN, Dataset, GroupSet

logger = logging.getLogger(__name__)

CLAMP_EPS = 1e-7
MAX_HALVINGS = 60


def _check_scores(scores: Any, n: Optional[int] = None) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if n is not None and s.shape != (n,):
        raise ShapeMismatch(n, s.size, "scores")
    if not ((s >= 0.0) & (s <= 1.0)).all():
        raise ScoreOutOfRange("Scores must lie in [0, 1]")
    return s


def _weights(weights: Any, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != (n,):
        raise ShapeMismatch(n, w.size, "weights")
    return w


def _nll(z: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    return float((w * (np.logaddexp(0.0, z) - y * z)).sum() / w.sum())


def _newton_step(hessian: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(hessian, gradient)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(hessian, gradient, rcond=None)[0]


# --- logistic base model ---------------------------------------------------


@dataclass
class LogisticModel:
    coefficients: np.ndarray
    intercept: float
    l2: float
    mean: np.ndarray
    scale: np.ndarray
    converged: bool = True
    gradient_norm: float = 0.0
    objective_trace: List[float] = field(default_factory=list)

    def decision_function(self, features: Any) -> np.ndarray:
        x = np.asarray(features.features if isinstance(features, Dataset) else features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.shape[1] != self.coefficients.size:
            raise ShapeMismatch(self.coefficients.size, x.shape[1])
        return x @ self.coefficients + self.intercept

    def predict(self, features: Any) -> np.ndarray:
        return expit(self.decision_function(features))


def fit_logistic(data: Dataset, l2: float = 1e-4, max_iter: int = 100, tol: float = 1e-8) -> LogisticModel:
    """L2-regularised logistic regression by damped Newton on standardised features.

    The intercept is not penalised; zero-variance columns keep a zero coefficient.
    """
    if data.n == 0:
        raise EmptyData("Cannot fit a logistic model on an empty dataset")
    x, y, w = data.features, data.labels, data.sample_weights()
    total = w.sum()
    mean = (w[:, None] * x).sum(axis=0) / total
    scale = np.sqrt((w[:, None] * (x - mean) ** 2).sum(axis=0) / total)
    active = scale > 0
    design = np.column_stack([np.ones(data.n), (x[:, active] - mean[active]) / scale[active]])
    penalty = np.full(design.shape[1], l2)
    penalty[0] = 0.0

    def objective(beta: np.ndarray) -> float:
        return _nll(design @ beta, y, w) + 0.5 * float((penalty * beta * beta).sum())

    beta = np.zeros(design.shape[1])
    beta[0] = float(inverse_sigmoid((w * y).sum() / total, CLAMP_EPS))
    trace = [objective(beta)]
    converged = False
    grad_norm = math.inf
    for _ in range(max_iter):
        p = expit(design @ beta)
        grad = design.T @ (w * (p - y)) / total + penalty * beta
        grad_norm = float(np.abs(grad).max())
        if grad_norm < tol:
            converged = True
            break
        hess = (design * (w * p * (1.0 - p))[:, None]).T @ design / total + np.diag(penalty)
        step = _newton_step(hess, grad)
        t, current = 1.0, trace[-1]
        candidate = beta - step
        value = objective(candidate)
        halvings = 0
        while value > current and halvings < MAX_HALVINGS:
            t /= 2.0
            candidate = beta - t * step
            value = objective(candidate)
            halvings += 1
        if value > current:
            break
        beta = candidate
        trace.append(value)
    if not converged:
        warnings.warn(
            f"Logistic fit did not converge (max |gradient| = {grad_norm:.3g})", NonConvergenceWarning, stacklevel=2
        )

    coefficients = np.zeros(data.d)
    coefficients[active] = beta[1:] / scale[active]
    intercept = float(beta[0] - (beta[1:] * mean[active] / scale[active]).sum())
    return LogisticModel(
        coefficients=coefficients,
        intercept=intercept,
        l2=l2,
        mean=mean,
        scale=scale,
        converged=converged,
        gradient_norm=grad_norm,
        objective_trace=trace,
    )


# --- Platt scaling ----------------------------------------------------------


@dataclass
class PlattModel:
    a: float = 1.0
    b: float = 0.0
    eps: float = CLAMP_EPS
    degenerate: bool = False
    converged: bool = True
    objective_trace: List[float] = field(default_factory=list)

    def predict(self, scores: Any) -> np.ndarray:
        s = inverse_sigmoid(_check_scores(scores), self.eps)
        return expit(self.a * s + self.b)


def fit_platt(scores: Any, labels: Any, weights: Any = None, eps: float = CLAMP_EPS, max_iter: int = 100) -> PlattModel:
    y = np.asarray(labels, dtype=np.float64).ravel()
    s = _check_scores(scores, y.size)
    if y.size == 0:
        raise EmptyData("Cannot fit Platt scaling on zero rows")
    w = _weights(weights, y.size)
    if np.unique(y).size == 1:
        warnings.warn("All labels are identical; Platt scaling degenerates to a constant", DegenerateLabelsWarning, stacklevel=2)
        return PlattModel(a=0.0, b=float(inverse_sigmoid(y[0], eps)), eps=eps, degenerate=True)

    z = inverse_sigmoid(s, eps)
    design = np.column_stack([z, np.ones_like(z)])
    total = w.sum()
    params = np.array([1.0, 0.0])
    trace = [_nll(design @ params, y, w)]
    converged = False
    for _ in range(max_iter):
        p = expit(design @ params)
        grad = design.T @ (w * (p - y)) / total
        if float(np.abs(grad).max()) < 1e-8:
            converged = True
            break
        hess = (design * (w * p * (1.0 - p))[:, None]).T @ design / total
        step = _newton_step(hess, grad)
        candidate, value = params - step, _nll(design @ (params - step), y, w)
        halvings = 0
        while value > trace[-1] and halvings < MAX_HALVINGS:
            step = step / 2.0
            candidate = params - step
            value = _nll(design @ candidate, y, w)
            halvings += 1
        if value > trace[-1]:
            break
        params = candidate
        trace.append(value)
    if not converged:
        warnings.warn("Platt scaling did not converge", NonConvergenceWarning, stacklevel=2)
    return PlattModel(
        a=float(params[0]), b=float(params[1]), eps=eps, converged=converged, objective_trace=trace
    )


# --- isotonic regression ----------------------------------------------------


@dataclass
class IsotonicModel:
    breakpoints: np.ndarray
    values: np.ndarray
    # Per-row training fit; not serialised
    fitted: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def predict(self, scores: Any) -> np.ndarray:
        s = _check_scores(scores)
        idx = np.searchsorted(self.breakpoints, s, side="right") - 1
        return self.values[np.maximum(idx, 0)]


def _level_fit(level_means: np.ndarray, level_weights: np.ndarray, fallback: float) -> np.ndarray:
    """Isotonic fit over pooled score levels; zero-weight levels copy their left neighbour."""
    out = np.full(level_means.size, fallback)
    live = level_weights > 0
    if not live.any():
        return out
    out[live] = isotonic_regression(level_means[live], sample_weight=level_weights[live], increasing=True)
    # Forward fill, then back fill the leading gap
    idx = np.where(live, np.arange(out.size), -1)
    np.maximum.accumulate(idx, out=idx)
    first = int(np.flatnonzero(live)[0])
    idx[idx < 0] = first
    return out[idx]


def fit_isotonic(scores: Any, labels: Any, weights: Any = None) -> IsotonicModel:
    """Fit a non-decreasing step function of the score.

    Rows sharing a score are pooled first, so every distinct score maps to one value.
    """
    y = np.asarray(labels, dtype=np.float64).ravel()
    s = _check_scores(scores, y.size)
    if y.size == 0:
        raise EmptyData("Cannot fit isotonic regression on zero rows")
    w = _weights(weights, y.size)
    levels, inverse = np.unique(s, return_inverse=True)
    sum_w = np.bincount(inverse, weights=w, minlength=levels.size)
    sum_wy = np.bincount(inverse, weights=w * y, minlength=levels.size)
    means = np.divide(sum_wy, sum_w, out=np.zeros_like(sum_w), where=sum_w > 0)
    level_values = _level_fit(means, sum_w, float(y.mean()))
    starts = np.concatenate([[0], np.flatnonzero(np.diff(level_values) != 0.0) + 1])
    return IsotonicModel(breakpoints=levels[starts], values=level_values[starts], fitted=level_values[inverse])


# --- HKRR bucket patching ---------------------------------------------------


@dataclass
class HKRRModel:
    group_names: List[str]
    bucket_width: float
    alpha: float
    patches: List[Tuple[int, int, float]] = field(default_factory=list)
    converged: bool = True
    n_sweeps: int = 0
    fitted: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def n_buckets(self) -> int:
        return max(1, math.ceil(1.0 / self.bucket_width))

    def bucket(self, p: np.ndarray) -> np.ndarray:
        return np.minimum(np.floor(p / self.bucket_width).astype(np.int64), self.n_buckets - 1)

    def _membership(self, groups: GroupSet, n: int) -> List[np.ndarray]:
        if len(groups) != len(self.group_names):
            raise ShapeMismatch(len(self.group_names), len(groups), "groups")
        masks = [g.membership for g in groups]
        for mask in masks:
            if mask.shape != (n,):
                raise ShapeMismatch(n, mask.size, "group memberships")
        return masks

    def predict(self, scores: Any, groups: GroupSet) -> np.ndarray:
        p = _check_scores(scores).copy()
        masks = self._membership(groups, p.size)
        for group_idx, bucket_idx, delta in self.patches:
            cell = masks[group_idx] & (self.bucket(p) == bucket_idx)
            p[cell] = np.clip(p[cell] + delta, 0.0, 1.0)
        return p


def fit_hkrr(
    scores: Any, labels: Any, groups: GroupSet, config: Optional[HKRRConfig] = None
) -> HKRRModel:
    """Patch (group, bucket) cells whose mean residual exceeds alpha until a sweep is clean."""
    config = config or HKRRConfig()
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = _check_scores(scores, y.size).copy()
    model = HKRRModel(group_names=groups.names, bucket_width=config.bucket_width, alpha=config.alpha)
    masks = model._membership(groups, p.size)
    members = [np.nonzero(m)[0] for m in masks]
    floors = [max(1.0, config.alpha * config.bucket_width * idx.size) for idx in members]

    model.converged = False
    for sweep in range(1, config.max_sweeps + 1):
        patched = False
        for h, idx in enumerate(members):
            if idx.size == 0:
                continue
            ph, yh = p[idx], y[idx]
            buckets = model.bucket(ph)
            for b in range(model.n_buckets):
                cell = buckets == b
                count = int(cell.sum())
                if count == 0 or count < floors[h]:
                    continue
                residual = float((yh[cell] - ph[cell]).mean())
                if abs(residual) <= config.alpha:
                    continue
                ph[cell] = np.clip(ph[cell] + residual, 0.0, 1.0)
                buckets[cell] = model.bucket(ph[cell])
                model.patches.append((h, b, residual))
                patched = True
            p[idx] = ph
        model.n_sweeps = sweep
        if not patched:
            model.converged = True
            break
    if not model.converged:
        warnings.warn(
            f"HKRR hit max_sweeps={config.max_sweeps} with violations left", NonConvergenceWarning, stacklevel=2
        )
    logger.info("HKRR applied %d patches over %d sweeps", len(model.patches), model.n_sweeps)
    model.fitted = p
    return model


# --- DFMC -------------------------------------------------------------------


@dataclass
class DFMCModel:
    ensemble: TreeEnsemble
    group_names: List[str]
    n_features: int
    eps: float = CLAMP_EPS

    def design(self, features: Any, scores: np.ndarray, groups: GroupSet) -> np.ndarray:
        x = np.asarray(features.features if isinstance(features, Dataset) else features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.shape[1] != self.n_features:
            raise ShapeMismatch(self.n_features, x.shape[1])
        if x.shape[0] != scores.size:
            raise ShapeMismatch(x.shape[0], scores.size, "scores")
        if len(groups) != len(self.group_names):
            raise ShapeMismatch(len(self.group_names), len(groups), "groups")
        indicators = groups.indicator_matrix() if len(groups) else np.zeros((x.shape[0], 0))
        if indicators.shape[0] != x.shape[0]:
            raise ShapeMismatch(x.shape[0], indicators.shape[0], "group memberships")
        return np.column_stack([x, indicators, scores])

    def predict(self, features: Any, scores: Any, groups: GroupSet) -> np.ndarray:
        s = _check_scores(scores)
        design = self.design(features, s, groups)
        return expit(inverse_sigmoid(s, self.eps) + predict_ensemble(self.ensemble, design))


def fit_dfmc(
    data: Dataset, base_scores: Any, groups: GroupSet, config: Optional[GBDTConfig] = None
) -> DFMCModel:
    """One depth-2 GBDT over features, group indicators and the base score."""
    config = replace(config, max_depth=2) if config is not None else dfmc_gbdt_config()
    scores = _check_scores(base_scores, data.n)
    model = DFMCModel(
        ensemble=TreeEnsemble(trees=[]), group_names=groups.names, n_features=data.d
    )
    design = model.design(data, scores, groups)
    names = list(data.feature_names) + [f"group:{name}" for name in groups.names] + [SCORE_COLUMN]
    augmented = Dataset(features=design, labels=data.labels, weights=data.weights, feature_names=names)
    model.ensemble = fit_gbdt(augmented, inverse_sigmoid(scores, model.eps), config)
    return model


@dataclass
class IdentityModel:
    def predict(self, scores: Any) -> np.ndarray:
        return _check_scores(scores).copy()


def apply_calibrator(model: Any, scores: Any, features: Any = None, groups: Optional[GroupSet] = None) -> np.ndarray:
    """Uniform prediction entry point for every fitted model kind."""
    if features is not None:
        n_rows = features.n if isinstance(features, Dataset) else np.asarray(features).shape[0]
        if scores is not None and np.asarray(scores).ravel().size != n_rows:
            raise ShapeMismatch(n_rows, np.asarray(scores).ravel().size, "scores")
    if isinstance(model, McGradModel):
        return predict_mcgrad(model, features, scores)
    if isinstance(model, (PlattModel, IsotonicModel, IdentityModel)):
        return model.predict(scores)
    if isinstance(model, HKRRModel):
        return model.predict(scores, groups if groups is not None else GroupSet())
    if isinstance(model, DFMCModel):
        return model.predict(features, scores, groups if groups is not None else GroupSet())
    if isinstance(model, LogisticModel):
        return model.predict(features)
    raise TypeError(f"Unsupported model type {type(model).__name__}")


__all__ = [
    "LogisticModel",
    "fit_logistic",
    "PlattModel",
    "fit_platt",
    "IsotonicModel",
    "fit_isotonic",
    "HKRRModel",
    "fit_hkrr",
    "DFMCModel",
    "fit_dfmc",
    "IdentityModel",
    "apply_calibrator",
]
