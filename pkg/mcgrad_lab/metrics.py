"""Calibration, multicalibration and ranking metrics plus group generation."""
from __future__ import annotations

import logging
import math
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score

from .config import GroupGenConfig
from .errors import EmptyInput, InvalidInterval, LengthMismatch, NoValidGroups, SingleClassMetricUndefined
from .models import (
    Dataset,
    GroupCondition,
    GroupMetrics,
    GroupSet,
    GroupSpec,
    IntervalSpec,
    MetricReport,
)

logger = logging.getLogger(__name__)

LOGLOSS_EPS = 1e-15
ECE_BINS = 10


def _as_pair(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    f = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if f.size == 0:
        raise EmptyInput("Metric needs at least one row")
    if f.shape != y.shape:
        raise LengthMismatch(f"{f.size} scores vs {y.size} labels")
    return f, y


def _score_order(f: np.ndarray) -> np.ndarray:
    # lexsort keys are given last-primary: score first, then original index
    return np.lexsort((np.arange(f.size), f))


def ecce(scores, labels) -> float:
    """Estimated cumulative calibration error: range of the score-sorted residual walk over n."""
    f, y = _as_pair(scores, labels)
    order = _score_order(f)
    walk = np.concatenate([[0.0], np.cumsum(y[order] - f[order])])
    return float((walk.max() - walk.min()) / f.size)


def sigma_scale(scores) -> float:
    f = np.asarray(scores, dtype=np.float64).ravel()
    if f.size == 0:
        raise EmptyInput("sigma_scale needs at least one row")
    return float(math.sqrt(float(np.sum(f * (1.0 - f)))) / f.size)


def group_table(scores, labels, groups: GroupSet) -> Tuple[List[GroupMetrics], List[str]]:
    """Per-group ECCE, sigma and ratio; groups that are empty or have sigma 0 are skipped."""
    f, y = _as_pair(scores, labels)
    rows: List[GroupMetrics] = []
    skipped: List[str] = []
    for group in groups:
        mask = group.membership
        if mask.shape != f.shape:
            raise LengthMismatch(f"Group {group.name!r} has {mask.size} memberships for {f.size} rows")
        n_h = int(mask.sum())
        if n_h == 0:
            skipped.append(group.name)
            continue
        sigma_h = sigma_scale(f[mask])
        if sigma_h == 0.0:
            skipped.append(group.name)
            continue
        ecce_h = ecce(f[mask], y[mask])
        rows.append(GroupMetrics(name=group.name, n_h=n_h, ecce_h=ecce_h, sigma_h=sigma_h, ratio=ecce_h / sigma_h))
    if skipped:
        logger.info("Skipped %d empty or zero-variance group(s)", len(skipped))
    return rows, skipped


def mce(scores, labels, groups: GroupSet) -> Tuple[float, List[GroupMetrics]]:
    """Maximum over groups of ECCE_h / sigma_h, with the full per-group table."""
    rows, skipped = group_table(scores, labels, groups)
    if not rows:
        raise NoValidGroups(skipped)
    return _worst(rows).ratio, rows


def _worst(rows: Sequence[GroupMetrics]) -> GroupMetrics:
    # Equal ratios resolve to the smallest group name
    return min(rows, key=lambda r: (-r.ratio, r.name))


def delta_mc(scores, labels, group: GroupSpec, interval: IntervalSpec) -> Tuple[float, float]:
    """Residual mass of one (group, score interval) cell and the group's tau scale."""
    f, y = _as_pair(scores, labels)
    n = f.size
    members = np.nonzero(group.membership)[0]
    n_h = members.size
    if not 1 <= interval.start <= interval.end <= n_h:
        raise InvalidInterval(f"Interval [{interval.start}, {interval.end}] is not within 1..{n_h}")
    f_h, y_h = f[members], y[members]
    order = _score_order(f_h)
    window = order[interval.start - 1 : interval.end]
    delta = abs(float(np.sum(y_h[window] - f_h[window]))) / n
    tau = math.sqrt(float(np.sum(f_h * (1.0 - f_h))) / n)
    return delta, tau


def _is_binary(col: np.ndarray) -> bool:
    return bool(np.isin(col, (0.0, 1.0)).all())


def _format_threshold(value: float) -> str:
    return f"{value:.4g}"


def _atoms(data: Dataset, config: GroupGenConfig) -> List[Tuple[int, GroupCondition, str]]:
    atoms: List[Tuple[int, GroupCondition, str]] = []
    levels = np.arange(1, config.quantiles_per_numeric + 1) / (config.quantiles_per_numeric + 1)
    for j, name in enumerate(data.feature_names):
        col = data.features[:, j]
        if _is_binary(col):
            atoms.append((j, GroupCondition(name, "==", 1.0), f"{name}==1"))
        elif levels.size:
            for q in np.unique(np.quantile(col, levels)):
                atoms.append((j, GroupCondition(name, "<=", float(q)), f"{name}<={_format_threshold(q)}"))
    return atoms


def generate_unspecified_groups(data: Dataset, config: Optional[GroupGenConfig] = None) -> GroupSet:
    """Atoms (binary == 1, numeric <= quantile) plus pairwise conjunctions across columns.

    Groups under ``min_group_size`` are dropped first; a seeded subsample then caps
    the set at ``max_groups`` while keeping generation order.
    """
    config = config or GroupGenConfig()
    if data.n == 0:
        raise EmptyInput("Cannot generate groups on an empty dataset")
    atoms = _atoms(data, config)
    masks = [cond.evaluate(data) for _, cond, _ in atoms]
    candidates: List[GroupSpec] = [GroupSpec(name, mask, [cond]) for (_, cond, name), mask in zip(atoms, masks)]
    if config.max_conjunction_order >= 2:
        for a in range(len(atoms)):
            for b in range(a + 1, len(atoms)):
                if atoms[a][0] == atoms[b][0]:
                    continue
                candidates.append(
                    GroupSpec(
                        f"{atoms[a][2]} & {atoms[b][2]}",
                        masks[a] & masks[b],
                        [atoms[a][1], atoms[b][1]],
                    )
                )
    kept = [g for g in candidates if g.size >= config.min_group_size]
    logger.info(
        "Generated %d candidate groups from %d atoms; %d meet min_group_size=%d",
        len(candidates),
        len(atoms),
        len(kept),
        config.min_group_size,
    )
    if len(kept) > config.max_groups:
        rng = np.random.default_rng(config.seed)
        chosen = np.sort(rng.choice(len(kept), size=config.max_groups, replace=False))
        kept = [kept[i] for i in chosen]
    return GroupSet(kept)


def _weights_for(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != (n,):
        raise LengthMismatch(f"{w.size} weights for {n} rows")
    return w


def calibration_curve(scores, labels, n_bins: int = ECE_BINS, weights=None) -> pd.DataFrame:
    """Equal-width reliability table over [0, 1]; empty bins are omitted."""
    f, y = _as_pair(scores, labels)
    w = _weights_for(weights, f.size)
    bins = np.minimum(np.floor(f * n_bins).astype(np.int64), n_bins - 1)
    frame = pd.DataFrame({"bin": bins, "w": w, "wf": w * f, "wy": w * y, "one": 1})
    grouped = frame.groupby("bin").sum()
    grouped = grouped[grouped["w"] > 0]
    table = pd.DataFrame(
        {
            "bin": grouped.index.astype(int),
            "count": grouped["one"].to_numpy(),
            "weight": grouped["w"].to_numpy(),
            "mean_f": (grouped["wf"] / grouped["w"]).to_numpy(),
            "mean_y": (grouped["wy"] / grouped["w"]).to_numpy(),
        }
    )
    return table.reset_index(drop=True)


def expected_calibration_error(scores, labels, weights=None, n_bins: int = ECE_BINS) -> float:
    table = calibration_curve(scores, labels, n_bins=n_bins, weights=weights)
    total = table["weight"].sum()
    if total <= 0:
        return float("nan")
    return float((table["weight"] / total * (table["mean_y"] - table["mean_f"]).abs()).sum())


def performance_metrics(scores, labels, weights=None) -> Dict[str, float]:
    f, y = _as_pair(scores, labels)
    w = _weights_for(weights, f.size)
    total = w.sum()
    clamped = np.clip(f, LOGLOSS_EPS, 1.0 - LOGLOSS_EPS)
    nll = -(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped))
    result = {
        "logloss": float((w * nll).sum() / total),
        "prauc": float("nan"),
        "auroc": float("nan"),
        "brier": float((w * (f - y) ** 2).sum() / total),
        "ece": expected_calibration_error(f, y, w),
    }
    if np.unique(y).size < 2:
        warnings.warn(
            "Only one class present; prauc and auroc are undefined", SingleClassMetricUndefined, stacklevel=2
        )
    else:
        result["prauc"] = float(average_precision_score(y, f, sample_weight=w))
        result["auroc"] = float(roc_auc_score(y, f, sample_weight=w))
    return result


def metric_report(scores, labels, groups: Optional[GroupSet] = None, weights=None) -> MetricReport:
    """Full metric bundle for one set of scores."""
    f, y = _as_pair(scores, labels)
    undefined: List[str] = []
    sigma = sigma_scale(f)
    ecce_value = ecce(f, y)
    ecce_sigma = ecce_value / sigma if sigma > 0 else float("nan")
    if sigma == 0:
        undefined.append("ecce_sigma")

    per_group: List[GroupMetrics] = []
    skipped: List[str] = []
    mce_value = float("nan")
    if groups is not None and len(groups):
        per_group, skipped = group_table(f, y, groups)
        if per_group:
            mce_value = _worst(per_group).ratio
    if not per_group:
        undefined.append("mce")
        logger.warning("No valid groups; MCE is undefined")

    perf = performance_metrics(f, y, weights)
    undefined.extend(k for k in ("prauc", "auroc") if math.isnan(perf[k]))
    return MetricReport(
        ecce=ecce_value,
        ecce_sigma=ecce_sigma,
        mce=mce_value,
        mce_absolute=mce_value * sigma,
        logloss=perf["logloss"],
        prauc=perf["prauc"],
        auroc=perf["auroc"],
        brier=perf["brier"],
        ece=perf["ece"],
        n=int(f.size),
        n_groups=len(per_group),
        per_group=per_group,
        skipped_groups=skipped,
        undefined=undefined,
    )


def group_frame(report: MetricReport) -> pd.DataFrame:
    return pd.DataFrame(
        [(g.name, g.n_h, g.ecce_h, g.sigma_h, g.ratio) for g in report.per_group],
        columns=["group", "n_h", "ecce_h", "sigma_h", "ratio"],
    )


__all__ = [
    "ecce",
    "sigma_scale",
    "group_table",
    "mce",
    "delta_mc",
    "generate_unspecified_groups",
    "calibration_curve",
    "expected_calibration_error",
    "performance_metrics",
    "metric_report",
    "group_frame",
]
