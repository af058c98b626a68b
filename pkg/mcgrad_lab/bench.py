"""Synthetic generators, method comparison grid and ablations."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from .calibrators import (
    IdentityModel,
    apply_calibrator,
    fit_dfmc,
    fit_hkrr,
    fit_isotonic,
    fit_logistic,
    fit_platt,
)
from .config import (
    ABLATION_OVERRIDES,
    GROUP_FEATURE_VARIANTS,
    AblationGrid,
    BenchConfig,
    SplitSpec,
    SyntheticSpec,
    with_overrides,
)
from .dataset import load_csv, split_indices
from .errors import DataError
from .mcgrad import McGradModel, fit_mcgrad
from .metrics import generate_unspecified_groups, metric_report
from .models import Dataset, GroupCondition, GroupSet, GroupSpec, MetricReport

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["dataset", "method", "seed", "metric", "value", "error"]
HIGHER_IS_BETTER = {"prauc", "auroc"}
SUMMARY_HEADER = (
    "Desk-scale benchmark. Targets are directions and orderings (which method wins,\n"
    "which ablation hurts), not the magnitudes reported for production or full-size datasets.\n"
)


@dataclass
class CsvSource:
    """A pre-downloaded labelled CSV; base scores come from a logistic fit.

    ``groups_path`` points at a JSON list of group rules (the CLI groups-file format)
    used as the prespecified groups.
    """

    name: str
    path: str
    label_column: str
    weight_column: Optional[str] = None
    groups_path: Optional[str] = None


Source = Union[SyntheticSpec, CsvSource]


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Dataset, np.ndarray, np.ndarray]:
    """Draw (data, base_scores, true_probs); a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n_numeric = spec.d - spec.n_binary
    binary = rng.binomial(1, 0.5, size=(spec.n, spec.n_binary)).astype(np.float64)
    numeric = rng.standard_normal((spec.n, n_numeric))
    features = np.hstack([binary, numeric])
    weights = np.asarray(spec.weights, dtype=np.float64) if spec.weights is not None else rng.uniform(-1.0, 1.0, spec.d)

    true_logit = spec.intercept + features @ weights
    for members, offset in spec.segments:
        in_segment = np.all(binary[:, list(members)] == 1.0, axis=1)
        true_logit = true_logit + offset * in_segment
    true_probs = expit(true_logit)
    labels = rng.binomial(1, true_probs).astype(np.float64)

    if spec.distortion == "segment_bias":
        base_logit = true_logit + spec.distortion_magnitude * binary[:, spec.distortion_feature]
    elif spec.distortion == "global_scale":
        base_logit = spec.distortion_magnitude * true_logit
    else:
        base_logit = true_logit
    names = [f"b{j}" for j in range(spec.n_binary)] + [f"z{j}" for j in range(n_numeric)]
    data = Dataset(features=features, labels=labels, feature_names=names)
    return data, expit(base_logit), true_probs


def default_suite(n: int = 20000) -> List[Tuple[str, SyntheticSpec]]:
    return [
        ("segment_bias", SyntheticSpec(n=n, distortion="segment_bias", distortion_magnitude=1.0)),
        ("global_scale", SyntheticSpec(n=n, distortion="global_scale", distortion_magnitude=1.5)),
        ("calibrated", SyntheticSpec(n=n, distortion="none")),
    ]


def _binary_groups(data: Dataset) -> GroupSet:
    groups: List[GroupSpec] = []
    for j, name in enumerate(data.feature_names):
        col = data.features[:, j]
        if np.isin(col, (0.0, 1.0)).all():
            cond = GroupCondition(name, "==", 1.0)
            groups.append(GroupSpec(f"{name}==1", cond.evaluate(data), [cond]))
    return GroupSet(groups)


@dataclass
class _Cell:
    train: Dataset
    test: Dataset
    base_train: np.ndarray
    base_test: np.ndarray
    groups_train: GroupSet
    groups_test: GroupSet
    prespecified_train: Optional[GroupSet]
    prespecified_test: Optional[GroupSet]


def _load_group_rules(path: str, data: Dataset) -> GroupSet:
    try:
        rules = json.loads(Path(path).read_text())
        return GroupSet.from_rules(rules, data)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path} is not a valid groups file: {exc!r}") from exc


def _prepare_cell(source: Source, seed: int, config: BenchConfig) -> _Cell:
    if isinstance(source, CsvSource):
        data, _ = load_csv(source.path, source.label_column, weight_column=source.weight_column)
        base: Optional[np.ndarray] = None
        prespecified = _load_group_rules(source.groups_path, data) if source.groups_path else None
    else:
        data, base, _ = generate_synthetic(replace(source, seed=source.seed + seed))
        prespecified = _binary_groups(data)
    train_rows, test_rows = split_indices(data.n, SplitSpec(valid_fraction=config.test_fraction, seed=seed))
    train, test = data.take(train_rows), data.take(test_rows)
    if base is None or config.base_kind == "logistic":
        model = fit_logistic(train, **vars(config.logistic))
        base = model.predict(data)
    groups_train = generate_unspecified_groups(train, config.groups)
    return _Cell(
        train=train,
        test=test,
        base_train=base[train_rows],
        base_test=base[test_rows],
        groups_train=groups_train,
        groups_test=groups_train.evaluate(test),
        prespecified_train=None if prespecified is None else prespecified.take(train_rows),
        prespecified_test=None if prespecified is None else prespecified.take(test_rows),
    )


def _with_group_features(data: Dataset, groups: GroupSet) -> Dataset:
    names = [f"group:{name}" for name in groups.names]
    return Dataset(
        features=np.column_stack([data.features, groups.indicator_matrix()]),
        labels=data.labels,
        weights=data.weights,
        feature_names=list(data.feature_names) + names,
    )


def _group_feature_cell(cell: _Cell) -> _Cell:
    """Copy of ``cell`` whose train and test features carry the prespecified group indicators."""
    if cell.prespecified_train is None or not len(cell.prespecified_train):
        raise DataError("group_features needs prespecified groups for this dataset")
    return replace(
        cell,
        train=_with_group_features(cell.train, cell.prespecified_train),
        test=_with_group_features(cell.test, cell.prespecified_test),
    )


def fit_method(method: str, cell: _Cell, config: BenchConfig) -> Any:
    if method == "base":
        return IdentityModel()
    if method == "mcgrad":
        return fit_mcgrad(cell.train, cell.base_train, config.mcgrad)
    if method == "platt":
        return fit_platt(cell.base_train, cell.train.labels, cell.train.weights)
    if method == "isotonic":
        return fit_isotonic(cell.base_train, cell.train.labels, cell.train.weights)
    if method == "hkrr":
        return fit_hkrr(cell.base_train, cell.train.labels, cell.groups_train, config.hkrr)
    if method == "dfmc":
        return fit_dfmc(cell.train, cell.base_train, cell.groups_train, config.dfmc)
    raise ValueError(f"Unknown method {method!r}")


def _evaluate(model: Any, cell: _Cell) -> Dict[str, float]:
    scores = apply_calibrator(model, cell.base_test, cell.test, cell.groups_test)
    report: MetricReport = metric_report(scores, cell.test.labels, cell.groups_test, cell.test.weights)
    values = dict(report.scalars())
    if cell.prespecified_test is not None and len(cell.prespecified_test):
        values["mce_prespecified"] = metric_report(scores, cell.test.labels, cell.prespecified_test).mce
    if isinstance(model, McGradModel):
        values["n_rounds"] = float(model.n_rounds)
    return values


def _run_cell(name: str, source: Source, seed: int, methods: Sequence[str], config: BenchConfig) -> List[Dict[str, Any]]:
    rows: List[Dict[str, Any]] = []
    try:
        cell = _prepare_cell(source, seed, config)
    except Exception as exc:
        logger.warning("Dataset %s seed %d failed to prepare: %s", name, seed, exc)
        return [dict(dataset=name, method=m, seed=seed, metric="mce", value=math.nan, error=str(exc)) for m in methods]
    for method in methods:
        try:
            values = _evaluate(fit_method(method, cell, config), cell)
        except Exception as exc:
            logger.warning("%s/%s seed %d failed: %s", name, method, seed, exc)
            rows.append(dict(dataset=name, method=method, seed=seed, metric="mce", value=math.nan, error=str(exc)))
            continue
        rows.extend(
            dict(dataset=name, method=method, seed=seed, metric=metric, value=value, error="")
            for metric, value in values.items()
        )
        logger.info("%s/%s seed %d: mce=%.3f logloss=%.5f", name, method, seed, values["mce"], values["logloss"])
    return rows


def _run_grid(
    datasets: Sequence[Tuple[str, Source]], seeds: Sequence[int], n_jobs: int, task
) -> List[Dict[str, Any]]:
    cells = [(name, source, seed) for name, source in datasets for seed in seeds]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            chunks = list(pool.map(lambda c: task(*c), cells))
    else:
        chunks = [task(*c) for c in cells]
    return [row for chunk in chunks for row in chunk]


def run_comparison(
    datasets: Sequence[Tuple[str, Source]],
    methods: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
    config: Optional[BenchConfig] = None,
) -> pd.DataFrame:
    """Long-format results: one row per (dataset, method, seed, metric)."""
    config = config or BenchConfig()
    methods = list(methods or config.methods)
    seeds = list(config.seeds if seeds is None else seeds)
    rows = _run_grid(datasets, seeds, config.n_jobs, lambda n, s, seed: _run_cell(n, s, seed, methods, config))
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    return frame.sort_values(["dataset", "method", "seed", "metric"], kind="mergesort").reset_index(drop=True)


def rank_table(results: pd.DataFrame, metric: str = "mce") -> pd.DataFrame:
    """Mean metric per (method, dataset) with per-dataset ranks (1 = lowest) and the average rank."""
    subset = results[results["metric"] == metric]
    means = subset.groupby(["method", "dataset"])["value"].mean().unstack("dataset")
    ranks = means.rank(axis=0, method="min", ascending=True)
    table = pd.DataFrame(index=means.index)
    for dataset in means.columns:
        table[dataset] = means[dataset]
        table[f"{dataset}_rank"] = ranks[dataset]
    table["avg"] = means.mean(axis=1)
    table["avg_rank"] = ranks.mean(axis=1)
    return table.sort_values(["avg_rank", "avg"]).reset_index()


def _relative_change(value: float, full: float) -> float:
    if full == 0.0:
        return 0.0 if value == 0.0 else math.nan
    return (value - full) / abs(full)


def _ablation_cell(
    name: str, source: Source, seed: int, variants: Sequence[str], config: BenchConfig
) -> List[Dict[str, Any]]:
    rows: List[Dict[str, Any]] = []
    try:
        cell = _prepare_cell(source, seed, config)
    except Exception as exc:
        logger.warning("Dataset %s seed %d failed to prepare: %s", name, seed, exc)
        return [
            dict(dataset=name, seed=seed, variant=v, metric="mce", value=math.nan, error=str(exc)) for v in variants
        ]
    for variant in variants:
        mcgrad_config = with_overrides(config.mcgrad, ABLATION_OVERRIDES[variant])
        try:
            variant_cell = _group_feature_cell(cell) if variant in GROUP_FEATURE_VARIANTS else cell
            model = fit_mcgrad(variant_cell.train, variant_cell.base_train, mcgrad_config)
            values = _evaluate(model, variant_cell)
        except Exception as exc:
            logger.warning("Ablation %s on %s seed %d failed: %s", variant, name, seed, exc)
            rows.append(dict(dataset=name, seed=seed, variant=variant, metric="mce", value=math.nan, error=str(exc)))
            continue
        rows.extend(
            dict(dataset=name, seed=seed, variant=variant, metric=metric, value=value, error="")
            for metric, value in values.items()
        )
    return rows


def run_ablation(
    grid: AblationGrid,
    datasets: Sequence[Tuple[str, Source]],
    seeds: Optional[Sequence[int]] = None,
    config: Optional[BenchConfig] = None,
) -> pd.DataFrame:
    """Relative change of every variant against ``full`` per (dataset, seed, metric).

    ``improvement`` is signed so that positive always means better than ``full``.
    """
    config = config or BenchConfig()
    seeds = list(config.seeds if seeds is None else seeds)
    rows = _run_grid(
        datasets, seeds, config.n_jobs, lambda n, s, seed: _ablation_cell(n, s, seed, grid.variants, config)
    )
    frame = pd.DataFrame(rows, columns=["dataset", "seed", "variant", "metric", "value", "error"])
    full = frame[frame["variant"] == "full"][["dataset", "seed", "metric", "value"]].rename(
        columns={"value": "full_value"}
    )
    frame = frame.merge(full, on=["dataset", "seed", "metric"], how="left")
    frame["relative_change"] = [
        math.nan if metric == "n_rounds" else _relative_change(v, f)
        for metric, v, f in zip(frame["metric"], frame["value"], frame["full_value"])
    ]
    sign = np.where(frame["metric"].isin(HIGHER_IS_BETTER), 1.0, -1.0)
    frame["improvement"] = sign * frame["relative_change"]
    return frame.sort_values(["dataset", "variant", "seed", "metric"], kind="mergesort").reset_index(drop=True)


def summarize(results: pd.DataFrame, ablation: Optional[pd.DataFrame] = None) -> str:
    lines = [SUMMARY_HEADER]
    means = results[results["metric"].isin(["mce", "logloss"])].groupby(["dataset", "method", "metric"])["value"].mean()
    for (dataset, method, metric), value in means.items():
        lines.append(f"{dataset:>16s} {method:>10s} {metric:>8s} {value:.5f}")
    mce = results[results["metric"] == "mce"].groupby(["dataset", "method"])["value"].mean()
    for dataset in sorted(results["dataset"].unique()):
        if (dataset, "base") in mce.index and (dataset, "mcgrad") in mce.index and mce[(dataset, "base")] > 0:
            reduction = 1.0 - mce[(dataset, "mcgrad")] / mce[(dataset, "base")]
            lines.append(f"{dataset}: mcgrad MCE reduction vs base {reduction:.1%}")
    if ablation is not None and not ablation.empty:
        lines.append("")
        lines.append("Mean improvement vs full (positive is better):")
        mean_impr = ablation[ablation["metric"].isin(["mce", "logloss"])].groupby(["variant", "metric"])[
            "improvement"
        ].mean()
        for (variant, metric), value in mean_impr.items():
            lines.append(f"{variant:>10s} {metric:>8s} {value:+.2%}")
    return "\n".join(lines) + "\n"


def write_outputs(
    out_dir: Union[str, Path],
    results: pd.DataFrame,
    ranks: pd.DataFrame,
    ablation: Optional[pd.DataFrame] = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results.to_csv(out / "results.csv", index=False, float_format="%.17g")
    ranks.to_csv(out / "ranks.csv", index=False, float_format="%.17g")
    if ablation is not None:
        ablation.to_csv(out / "ablation.csv", index=False, float_format="%.17g")
    (out / "summary.txt").write_text(summarize(results, ablation))
    return out


def run_benchmark(
    out_dir: Union[str, Path],
    config: Optional[BenchConfig] = None,
    datasets: Optional[Sequence[Tuple[str, Source]]] = None,
    grid: Optional[AblationGrid] = None,
) -> Dict[str, pd.DataFrame]:
    """Comparison grid, ranks and (optionally) ablations written under ``out_dir``."""
    config = config or BenchConfig()
    datasets = list(datasets or default_suite())
    results = run_comparison(datasets, config=config)
    ranks = rank_table(results)
    ablation = run_ablation(grid, datasets, config=config) if grid is not None else None
    write_outputs(out_dir, results, ranks, ablation)
    frames = {"results": results, "ranks": ranks}
    if ablation is not None:
        frames["ablation"] = ablation
    return frames


__all__ = [
    "CsvSource",
    "generate_synthetic",
    "default_suite",
    "fit_method",
    "run_comparison",
    "rank_table",
    "run_ablation",
    "summarize",
    "write_outputs",
    "run_benchmark",
]
