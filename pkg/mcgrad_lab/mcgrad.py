"""Multi-round recursive boosting with score augmentation and logit rescaling."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.special import expit, logit

from .config import McGradConfig
from .dataset import augment_with_score, split_indices
from .errors import DataError, DimensionMismatch, EmptyData, ScoreLengthMismatch, ScoreOutOfRange
from .gbdt import (
    TreeEnsemble,
    feature_importance as ensemble_importance,
    fit_gbdt,
    log_loss_from_logits,
    predict_ensemble,
)
from .models import SCORE_COLUMN, Dataset

logger = logging.getLogger(__name__)

MODEL_VERSION = 1
THETA_BOUNDS = (1e-3, 1e3)
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-8


def inverse_sigmoid(p: Any, eps: float = 1e-7) -> np.ndarray:
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return logit(q)


def _rescale_loss(theta: float, logits: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    return log_loss_from_logits(theta * logits, labels, weights)


def optimize_rescale(logits: Any, labels: Any, weights: Optional[Any] = None) -> float:
    """Minimise mean weighted log loss of ``sigmoid(theta * logits)`` over theta.

    Safeguarded Newton from theta = 1 with step halving; falls back to a bounded
    scalar search when the curvature is unusable.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.size == 0:
        raise EmptyData("optimize_rescale needs at least one row")
    if not np.isfinite(z).all():
        raise DataError("logits must be finite")
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64)
    if not np.any(z):
        logger.debug("All logits are zero; rescale factor fixed at 1.0")
        return 1.0
    total = w.sum()
    if total <= 0:
        return 1.0
    lo, hi = THETA_BOUNDS
    theta = 1.0
    current = _rescale_loss(theta, z, y, w)
    for _ in range(NEWTON_MAX_ITER):
        p = expit(theta * z)
        grad = float((w * (p - y) * z).sum() / total)
        curv = float((w * p * (1.0 - p) * z * z).sum() / total)
        if not np.isfinite(curv) or curv <= 0.0:
            return _bounded_search(z, y, w)
        candidate = float(np.clip(theta - grad / curv, lo, hi))
        loss = _rescale_loss(candidate, z, y, w)
        halvings = 0
        while loss > current and halvings < 60:
            candidate = theta + (candidate - theta) / 2.0
            loss = _rescale_loss(candidate, z, y, w)
            halvings += 1
        step = abs(candidate - theta)
        theta, current = candidate, loss
        if step < NEWTON_TOL:
            break
    return theta


def _bounded_search(z: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    logger.debug("Non-positive curvature; using bounded scalar search for theta")
    result = minimize_scalar(
        _rescale_loss, bounds=THETA_BOUNDS, args=(z, y, w), method="bounded", options={"xatol": NEWTON_TOL}
    )
    return float(result.x)


@dataclass
class RoundRecord:
    round: int
    train_logloss: float
    valid_logloss: float
    theta: float
    n_trees: int
    accepted: bool


@dataclass
class McGradRound:
    ensemble: TreeEnsemble
    theta: float


@dataclass
class McGradModel:
    rounds: List[McGradRound] = field(default_factory=list)
    logit_clamp_eps: float = 1e-7
    n_features: int = 0
    feature_names: List[str] = field(default_factory=list)
    trace: List[RoundRecord] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def is_identity(self) -> bool:
        return not self.rounds

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": MODEL_VERSION,
            "eps": self.logit_clamp_eps,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "rounds": [{"theta": r.theta, "ensemble": r.ensemble.to_dict()} for r in self.rounds],
            "trace": [asdict(rec) for rec in self.trace],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "McGradModel":
        if payload.get("version", MODEL_VERSION) != MODEL_VERSION:
            raise DataError(f"Unsupported model version {payload.get('version')!r}")
        return cls(
            rounds=[
                McGradRound(ensemble=TreeEnsemble.from_dict(r["ensemble"]), theta=float(r["theta"]))
                for r in payload["rounds"]
            ],
            logit_clamp_eps=float(payload["eps"]),
            n_features=int(payload["n_features"]),
            feature_names=list(payload.get("feature_names", [])),
            trace=[RoundRecord(**rec) for rec in payload.get("trace", [])],
        )

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(rec) for rec in self.trace], columns=list(RoundRecord.__dataclass_fields__))


def _check_base_scores(base_scores: Any, n: int) -> np.ndarray:
    scores = np.asarray(base_scores, dtype=np.float64)
    if scores.shape != (n,):
        raise ScoreLengthMismatch(f"Expected {n} base scores, got shape {scores.shape}")
    if not ((scores >= 0.0) & (scores <= 1.0)).all():
        raise ScoreOutOfRange("Base scores must lie in [0, 1]")
    return scores


def _fit_round(data: Dataset, logits: np.ndarray, config: McGradConfig):
    """One boosting round: returns (ensemble, theta, updated logits)."""
    augmented = augment_with_score(data, expit(logits))
    ensemble = fit_gbdt(augmented, logits, config.gbdt)
    summed = logits + predict_ensemble(ensemble, augmented)
    w = data.sample_weights()
    theta = optimize_rescale(summed, data.labels, w) if config.rescale_enabled else 1.0
    return ensemble, theta, theta * summed


def _advance(ensemble: TreeEnsemble, theta: float, data: Dataset, logits: np.ndarray) -> np.ndarray:
    augmented = augment_with_score(data, expit(logits))
    return theta * (logits + predict_ensemble(ensemble, augmented))


def select_rounds(data: Dataset, base_scores: np.ndarray, config: McGradConfig) -> List[RoundRecord]:
    """Phase 1: boost on the train part until validation loss stops strictly improving."""
    train_rows, valid_rows = split_indices(data.n, config.split_spec())
    train, valid = data.take(train_rows), data.take(valid_rows)
    f0 = inverse_sigmoid(base_scores, config.logit_clamp_eps)
    train_logits, valid_logits = f0[train_rows], f0[valid_rows]
    w_train, w_valid = train.sample_weights(), valid.sample_weights()

    best_valid = log_loss_from_logits(valid_logits, valid.labels, w_valid)
    trace = [
        RoundRecord(
            round=0,
            train_logloss=log_loss_from_logits(train_logits, train.labels, w_train),
            valid_logloss=best_valid,
            theta=1.0,
            n_trees=0,
            accepted=True,
        )
    ]
    for t in range(1, config.max_rounds + 1):
        ensemble, theta, next_train = _fit_round(train, train_logits, config)
        next_valid = _advance(ensemble, theta, valid, valid_logits)
        valid_loss = log_loss_from_logits(next_valid, valid.labels, w_valid)
        improved = best_valid - valid_loss > 0.0
        trace.append(
            RoundRecord(
                round=t,
                train_logloss=log_loss_from_logits(next_train, train.labels, w_train),
                valid_logloss=valid_loss,
                theta=theta,
                n_trees=ensemble.n_trees,
                accepted=improved,
            )
        )
        logger.info("Round %d: valid logloss %.6f -> %.6f (theta=%.4f)", t, best_valid, valid_loss, theta)
        if not improved:
            break
        train_logits, valid_logits, best_valid = next_train, next_valid, valid_loss
    return trace


def fit_mcgrad(data: Dataset, base_scores: Any, config: Optional[McGradConfig] = None) -> McGradModel:
    config = config or McGradConfig()
    if data.n == 0:
        raise EmptyData("Cannot fit MCGrad on an empty dataset")
    if SCORE_COLUMN in data.feature_names:
        raise DataError(f"Column name {SCORE_COLUMN!r} is reserved for the score feature")
    scores = _check_base_scores(base_scores, data.n)

    trace = select_rounds(data, scores, config)
    n_rounds = sum(1 for rec in trace[1:] if rec.accepted)
    logger.info("Selected %d round(s); refitting on all %d rows", n_rounds, data.n)

    logits = inverse_sigmoid(scores, config.logit_clamp_eps)
    rounds: List[McGradRound] = []
    for _ in range(n_rounds):
        ensemble, theta, logits = _fit_round(data, logits, config)
        rounds.append(McGradRound(ensemble=ensemble, theta=theta))
    return McGradModel(
        rounds=rounds,
        logit_clamp_eps=config.logit_clamp_eps,
        n_features=data.d,
        feature_names=list(data.feature_names),
        trace=trace,
    )


def predict_mcgrad(
    model: McGradModel, features: Any, base_scores: Any, return_all_rounds: bool = False
) -> np.ndarray:
    """Replay the fitted rounds on new rows.

    With ``return_all_rounds`` the result has shape ``(T, n)``, row ``t`` holding
    the probabilities after round ``t + 1``.
    """
    x = features.features if isinstance(features, Dataset) else np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[1] != model.n_features:
        raise DimensionMismatch(model.n_features, x.shape[1])
    scores = _check_base_scores(base_scores, x.shape[0])
    if model.is_identity:
        return np.empty((0, x.shape[0])) if return_all_rounds else scores.copy()
    logits = inverse_sigmoid(scores, model.logit_clamp_eps)
    per_round: List[np.ndarray] = []
    for r in model.rounds:
        augmented = np.column_stack([x, expit(logits)])
        logits = r.theta * (logits + predict_ensemble(r.ensemble, augmented))
        if return_all_rounds:
            per_round.append(expit(logits))
    return np.vstack(per_round) if return_all_rounds else expit(logits)


def feature_importance(model: McGradModel) -> pd.DataFrame:
    """Split counts and total gain summed over every round's trees."""
    columns = ["feature", "split_count", "total_gain"]
    if model.is_identity:
        return pd.DataFrame(columns=columns)
    frames = [ensemble_importance(r.ensemble) for r in model.rounds]
    merged = pd.concat(frames).groupby("feature", sort=False, as_index=False)[["split_count", "total_gain"]].sum()
    return merged.sort_values(["total_gain", "feature"], ascending=[False, True], kind="mergesort").reset_index(
        drop=True
    )[columns]


__all__ = [
    "inverse_sigmoid",
    "optimize_rescale",
    "RoundRecord",
    "McGradRound",
    "McGradModel",
    "select_rounds",
    "fit_mcgrad",
    "predict_mcgrad",
    "feature_importance",
]
