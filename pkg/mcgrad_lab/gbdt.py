"""Histogram-based Newton gradient boosting on logits under log loss."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from .config import GBDTConfig
from .errors import AllSameLabelWarning, DataError, DimensionMismatch, EmptyData, LengthMismatch, TrainingError
from .models import Dataset

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass
class BinMapper:
    """Per-feature bin edges; a row falls in bin ``b`` iff ``edges[b-1] < x <= edges[b]``.

    Bin ``max_bins`` is reserved for missing values.
    """

    edges: List[np.ndarray]
    max_bins: int

    @classmethod
    def fit(cls, features: np.ndarray, max_bins: int) -> "BinMapper":
        edges: List[np.ndarray] = []
        for j in range(features.shape[1]):
            col = features[:, j]
            present = col[~np.isnan(col)]
            distinct = np.unique(present)
            if distinct.size <= max_bins:
                # Midpoints make the histogram search equal to an exhaustive one
                cuts = distinct[:-1] + (distinct[1:] - distinct[:-1]) / 2.0
            else:
                levels = np.arange(1, max_bins) / max_bins
                cuts = np.unique(np.quantile(present, levels))
            edges.append(np.asarray(cuts, dtype=np.float64))
        return cls(edges=edges, max_bins=max_bins)

    @property
    def n_slots(self) -> int:
        return self.max_bins + 1

    @property
    def missing_bin(self) -> int:
        return self.max_bins

    def transform(self, features: np.ndarray) -> np.ndarray:
        dtype = np.uint8 if self.n_slots <= 256 else np.uint16
        binned = np.empty(features.shape, dtype=dtype)
        for j, cuts in enumerate(self.edges):
            col = features[:, j]
            bins = np.searchsorted(cuts, col, side="left")
            bins[np.isnan(col)] = self.missing_bin
            binned[:, j] = bins
        return binned


@dataclass
class Tree:
    """Flat array representation; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    default_left: np.ndarray
    value: np.ndarray
    sum_hessian: np.ndarray
    count: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def n_leaves(self) -> int:
        return int((self.feature == LEAF).sum())

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.feature == LEAF)[0]

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max()) if self.n_nodes else 0

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Route every row to its leaf; missing values follow ``default_left``."""
        node = np.zeros(features.shape[0], dtype=np.int64)
        rows = np.arange(features.shape[0])
        while True:
            active = self.feature[node] != LEAF
            if not active.any():
                return node
            idx = rows[active]
            cur = node[idx]
            x = features[idx, self.feature[cur]]
            go_left = np.where(np.isnan(x), self.default_left[cur], x <= self.threshold[cur])
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.value[self.apply(features)]

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name).tolist() for name in _TREE_FIELDS}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Tree":
        return cls(**{name: np.asarray(payload[name], dtype=dtype) for name, dtype in _TREE_FIELDS.items()})


_TREE_FIELDS = {
    "feature": np.int64,
    "threshold": np.float64,
    "left": np.int64,
    "right": np.int64,
    "default_left": bool,
    "value": np.float64,
    "sum_hessian": np.float64,
    "count": np.int64,
    "gain": np.float64,
}


@dataclass
class TreeEnsemble:
    trees: List[Tree]
    base_score: float = 0.0
    config: GBDTConfig = field(default_factory=GBDTConfig)
    n_features: int = 0
    feature_names: List[str] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base_score": self.base_score,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "config": asdict(self.config),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TreeEnsemble":
        return cls(
            trees=[Tree.from_dict(t) for t in payload["trees"]],
            base_score=float(payload["base_score"]),
            config=GBDTConfig(**payload["config"]),
            n_features=int(payload["n_features"]),
            feature_names=list(payload.get("feature_names", [])),
        )


@dataclass
class _Split:
    gain: float
    feature: int
    bin: int
    threshold: float
    default_left: bool


@dataclass
class _Node:
    rows: np.ndarray
    depth: int
    sum_gradient: float
    sum_hessian: float
    split: Optional[_Split] = None
    feature: int = LEAF
    threshold: float = 0.0
    default_left: bool = True
    left: int = LEAF
    right: int = LEAF


class _HistogramBuilder:
    """Gradient, hessian and count histograms for a subset of rows.

    One ``bincount`` per statistic over ``binned + feature offsets``; features are
    chunked across threads and concatenated in feature order.
    """

    def __init__(self, binned: np.ndarray, n_slots: int, n_jobs: int):
        self.binned = binned
        self.n_slots = n_slots
        d = binned.shape[1]
        self.chunks = [c for c in np.array_split(np.arange(d), min(n_jobs, max(d, 1))) if c.size]
        self.n_jobs = n_jobs

    def _chunk(self, rows: np.ndarray, feats: np.ndarray, g: np.ndarray, h: np.ndarray):
        k = feats.size
        offsets = np.arange(k, dtype=np.int64) * self.n_slots
        flat = (self.binned[np.ix_(rows, feats)].astype(np.int64) + offsets).ravel()
        size = k * self.n_slots
        hist_g = np.bincount(flat, weights=np.repeat(g, k), minlength=size)
        hist_h = np.bincount(flat, weights=np.repeat(h, k), minlength=size)
        hist_c = np.bincount(flat, minlength=size)
        shape = (k, self.n_slots)
        return hist_g.reshape(shape), hist_h.reshape(shape), hist_c.reshape(shape)

    def build(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray):
        g_rows, h_rows = g[rows], h[rows]
        if self.n_jobs == 1 or len(self.chunks) == 1:
            parts = [self._chunk(rows, feats, g_rows, h_rows) for feats in self.chunks]
        else:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                parts = list(pool.map(lambda feats: self._chunk(rows, feats, g_rows, h_rows), self.chunks))
        return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(3))


def split_gain(gl, hl, gr, hr, lambda_l2: float):
    """Newton gain of splitting a node into (left, right) sums."""
    g, h = gl + gr, hl + hr
    return 0.5 * (gl * gl / (hl + lambda_l2) + gr * gr / (hr + lambda_l2) - g * g / (h + lambda_l2))


def leaf_value(sum_gradient: float, sum_hessian: float, config: GBDTConfig) -> float:
    denom = sum_hessian + config.lambda_l2
    if denom <= 0:
        return 0.0
    return -sum_gradient / denom * config.learning_rate


def verify_leaves(tree: Tree, leaf_rows: Dict[int, np.ndarray], g: np.ndarray, h: np.ndarray, config: GBDTConfig) -> None:
    """Recompute every leaf from the rows routed to it.

    Raises ``TrainingError`` when a stored value disagrees with the Newton step or a
    non-root leaf breaks min_child_samples / min_sum_hessian_in_leaf.
    """
    hessian_floor = config.min_sum_hessian_in_leaf * (1.0 - 1e-9) - 1e-12
    for i, rows in leaf_rows.items():
        expected = leaf_value(float(g[rows].sum()), float(h[rows].sum()), config)
        if not math.isclose(float(tree.value[i]), expected, rel_tol=1e-9, abs_tol=1e-12):
            raise TrainingError(f"Leaf {i} stores {tree.value[i]!r}, expected {expected!r}")
        if i == 0:
            continue
        if rows.size < config.min_child_samples or tree.sum_hessian[i] < hessian_floor:
            raise TrainingError(
                f"Leaf {i} has {rows.size} rows and hessian {tree.sum_hessian[i]:.6g}, below the configured floors"
            )


class _TreeGrower:
    """Leaf-wise (best gain first) growth bounded by num_leaves and max_depth."""

    def __init__(self, builder: _HistogramBuilder, mapper: BinMapper, config: GBDTConfig):
        self.builder = builder
        self.mapper = mapper
        self.config = config
        n_cuts = mapper.max_bins - 1
        self.valid_bins = np.zeros((len(mapper.edges), n_cuts), dtype=bool)
        for j, cuts in enumerate(mapper.edges):
            self.valid_bins[j, : cuts.size] = True

    def _find_split(self, node: _Node, g: np.ndarray, h: np.ndarray) -> Optional[_Split]:
        cfg = self.config
        n = node.rows.size
        if n < 2 * cfg.min_child_samples or not self.valid_bins.any():
            return None
        hist_g, hist_h, hist_c = self.builder.build(node.rows, g, h)
        miss = self.mapper.missing_bin
        # Cumulative non-missing sums for "bin <= b goes left", b < max_bins - 1
        gl = np.cumsum(hist_g[:, :miss], axis=1)[:, :-1]
        hl = np.cumsum(hist_h[:, :miss], axis=1)[:, :-1]
        cl = np.cumsum(hist_c[:, :miss], axis=1)[:, :-1]
        g_nm = hist_g[:, :miss].sum(axis=1, keepdims=True)
        h_nm = hist_h[:, :miss].sum(axis=1, keepdims=True)
        c_nm = hist_c[:, :miss].sum(axis=1, keepdims=True)
        default_left = hl >= (h_nm - hl)
        gl = gl + np.where(default_left, hist_g[:, miss : miss + 1], 0.0)
        hl = hl + np.where(default_left, hist_h[:, miss : miss + 1], 0.0)
        cl = cl + np.where(default_left, hist_c[:, miss : miss + 1], 0)
        g_tot = g_nm + hist_g[:, miss : miss + 1]
        h_tot = h_nm + hist_h[:, miss : miss + 1]
        c_tot = c_nm + hist_c[:, miss : miss + 1]
        gr, hr, cr = g_tot - gl, h_tot - hl, c_tot - cl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = split_gain(gl, hl, gr, hr, cfg.lambda_l2)
        legal = (
            self.valid_bins
            & np.isfinite(gain)
            & (cl >= cfg.min_child_samples)
            & (cr >= cfg.min_child_samples)
            & (hl >= cfg.min_sum_hessian_in_leaf)
            & (hr >= cfg.min_sum_hessian_in_leaf)
            & (gain > 0.0)
            & (gain >= cfg.min_gain_to_split)
        )
        if not legal.any():
            return None
        masked = np.where(legal, gain, -np.inf)
        # Row-major argmax: lowest feature, then lowest threshold, among equal gains
        j, b = np.unravel_index(int(np.argmax(masked)), masked.shape)
        return _Split(
            gain=float(masked[j, b]),
            feature=int(j),
            bin=int(b),
            threshold=float(self.mapper.edges[j][b]),
            default_left=bool(default_left[j, b]),
        )

    def _make_node(self, rows: np.ndarray, depth: int, g: np.ndarray, h: np.ndarray) -> _Node:
        return _Node(rows=rows, depth=depth, sum_gradient=float(g[rows].sum()), sum_hessian=float(h[rows].sum()))

    def grow(self, binned: np.ndarray, g: np.ndarray, h: np.ndarray) -> Tuple[Tree, np.ndarray]:
        """Grow one tree; returns it with each training row's leaf value."""
        cfg = self.config
        nodes: List[_Node] = [self._make_node(np.arange(binned.shape[0]), 0, g, h)]
        nodes[0].split = self._find_split(nodes[0], g, h)
        n_leaves = 1
        while n_leaves < cfg.num_leaves:
            candidates = [i for i, nd in enumerate(nodes) if nd.split is not None and nd.feature == LEAF]
            if not candidates:
                break
            best = max(candidates, key=lambda i: (nodes[i].split.gain, -i))
            parent = nodes[best]
            split = parent.split
            col = binned[parent.rows, split.feature]
            missing = col == self.mapper.missing_bin
            go_left = np.where(missing, split.default_left, col <= split.bin)
            children = []
            for rows in (parent.rows[go_left], parent.rows[~go_left]):
                child = self._make_node(rows, parent.depth + 1, g, h)
                if cfg.max_depth <= 0 or child.depth < cfg.max_depth:
                    child.split = self._find_split(child, g, h)
                children.append(len(nodes))
                nodes.append(child)
            parent.feature, parent.threshold, parent.default_left = split.feature, split.threshold, split.default_left
            parent.left, parent.right = children
            n_leaves += 1

        tree = Tree(
            feature=np.array([nd.feature for nd in nodes], dtype=np.int64),
            threshold=np.array([nd.threshold for nd in nodes], dtype=np.float64),
            left=np.array([nd.left for nd in nodes], dtype=np.int64),
            right=np.array([nd.right for nd in nodes], dtype=np.int64),
            default_left=np.array([nd.default_left for nd in nodes], dtype=bool),
            value=np.array(
                [leaf_value(nd.sum_gradient, nd.sum_hessian, cfg) if nd.feature == LEAF else 0.0 for nd in nodes]
            ),
            sum_hessian=np.array([nd.sum_hessian for nd in nodes], dtype=np.float64),
            count=np.array([nd.rows.size for nd in nodes], dtype=np.int64),
            gain=np.array([nd.split.gain if nd.feature != LEAF else 0.0 for nd in nodes], dtype=np.float64),
        )
        leaf_rows = {int(i): nodes[i].rows for i in tree.leaves()}
        verify_leaves(tree, leaf_rows, g, h, cfg)
        leaf_output = np.zeros(binned.shape[0])
        for i, rows in leaf_rows.items():
            leaf_output[rows] = tree.value[i]
        return tree, leaf_output


def _check_init_logits(init_logits: Any, n: int) -> np.ndarray:
    init = np.zeros(n) if init_logits is None else np.asarray(init_logits, dtype=np.float64)
    if init.shape != (n,):
        raise LengthMismatch(f"Expected {n} init logits, got shape {init.shape}")
    if not np.isfinite(init).all():
        raise DataError("init_logits must be finite")
    return init


def fit_gbdt_with_output(
    data: Dataset, init_logits: Any, config: GBDTConfig
) -> Tuple[TreeEnsemble, np.ndarray]:
    """Fit an ensemble and also return its fit-time summed output on ``data``.

    The returned output equals ``predict_ensemble(model, data)`` bit for bit.
    """
    if data.n == 0:
        raise EmptyData("Cannot fit a GBDT on an empty dataset")
    init = _check_init_logits(init_logits, data.n)
    y = data.labels
    w = data.sample_weights()
    if np.unique(y).size == 1:
        warnings.warn(
            f"All labels equal {int(y[0])}; trees can only shift the intercept", AllSameLabelWarning, stacklevel=2
        )
    mapper = BinMapper.fit(data.features, config.max_bins)
    binned = mapper.transform(data.features)
    builder = _HistogramBuilder(binned, mapper.n_slots, config.n_jobs)
    grower = _TreeGrower(builder, mapper, config)
    output = np.zeros(data.n)
    trees: List[Tree] = []
    for _ in range(config.n_estimators):
        p = expit(init + output)
        g = w * (p - y)
        h = w * p * (1.0 - p)
        tree, leaf_output = grower.grow(binned, g, h)
        output += leaf_output
        trees.append(tree)
    logger.debug(
        "Fitted %d trees (%d leaves total) on n=%d d=%d",
        len(trees),
        sum(t.n_leaves for t in trees),
        data.n,
        data.d,
    )
    ensemble = TreeEnsemble(
        trees=trees, base_score=0.0, config=config, n_features=data.d, feature_names=list(data.feature_names)
    )
    return ensemble, output


def fit_gbdt(data: Dataset, init_logits: Any, config: GBDTConfig) -> TreeEnsemble:
    ensemble, _ = fit_gbdt_with_output(data, init_logits, config)
    return ensemble


def _features_of(data: Any) -> np.ndarray:
    features = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    return features.reshape(-1, 1) if features.ndim == 1 else features


def predict_ensemble(model: TreeEnsemble, data: Any, n_trees: Optional[int] = None) -> np.ndarray:
    """Summed logit output of the first ``n_trees`` trees (all by default)."""
    features = _features_of(data)
    if features.shape[1] != model.n_features:
        raise DimensionMismatch(model.n_features, features.shape[1])
    output = np.full(features.shape[0], model.base_score, dtype=np.float64)
    for tree in model.trees[:n_trees]:
        output += tree.predict(features)
    return output


def log_loss_from_logits(logits: np.ndarray, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """Weighted mean log loss computed stably from logits."""
    losses = np.logaddexp(0.0, logits) - labels * logits
    if weights is None:
        return float(losses.mean())
    total = weights.sum()
    return float((weights * losses).sum() / total) if total > 0 else float(losses.mean())


def train_logloss_per_tree(model: TreeEnsemble, data: Dataset, init_logits: Any) -> np.ndarray:
    """Entry ``k`` is the mean weighted log loss using the first ``k`` trees."""
    init = _check_init_logits(init_logits, data.n)
    features = _features_of(data)
    if features.shape[1] != model.n_features:
        raise DimensionMismatch(model.n_features, features.shape[1])
    logits = init + model.base_score
    w = data.sample_weights()
    losses = [log_loss_from_logits(logits, data.labels, w)]
    for tree in model.trees:
        logits = logits + tree.predict(features)
        losses.append(log_loss_from_logits(logits, data.labels, w))
    return np.asarray(losses)


def feature_importance(model: TreeEnsemble) -> pd.DataFrame:
    """Per-feature split count and total gain, sorted by gain."""
    names = model.feature_names or [f"x{j}" for j in range(model.n_features)]
    splits = np.zeros(model.n_features, dtype=np.int64)
    gains = np.zeros(model.n_features)
    for tree in model.trees:
        internal = tree.feature != LEAF
        np.add.at(splits, tree.feature[internal], 1)
        np.add.at(gains, tree.feature[internal], tree.gain[internal])
    frame = pd.DataFrame({"feature": names, "split_count": splits, "total_gain": gains})
    return frame.sort_values(["total_gain", "feature"], ascending=[False, True], kind="mergesort").reset_index(
        drop=True
    )


__all__ = [
    "BinMapper",
    "Tree",
    "TreeEnsemble",
    "split_gain",
    "leaf_value",
    "verify_leaves",
    "fit_gbdt",
    "fit_gbdt_with_output",
    "predict_ensemble",
    "log_loss_from_logits",
    "train_logloss_per_tree",
    "feature_importance",
]
