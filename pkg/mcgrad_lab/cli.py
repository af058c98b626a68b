"""Batch command-line surface: fit, predict, evaluate and bench."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .bench import CsvSource, default_suite, run_benchmark
from .calibrators import IdentityModel, apply_calibrator, fit_dfmc, fit_hkrr, fit_isotonic, fit_logistic, fit_platt
from .config import (
    AblationGrid,
    BenchConfig,
    GBDTConfig,
    GroupGenConfig,
    RunConfig,
    SplitSpec,
    calibrator_config,
    from_params,
    resolve_run_config,
    with_overrides,
)
from .dataset import encode_frame, load_schema, read_frame, save_schema, split_indices
from .errors import ConfigError, DataError, LengthMismatch, McGradLabError, ScoreOutOfRange, TrainingError
from .mcgrad import McGradModel, fit_mcgrad
from .metrics import calibration_curve, generate_unspecified_groups, group_frame, metric_report
from .models import Dataset, GroupSet, MetricReport
from .serialization import load_model, save_model

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
FLOAT_FORMAT = "%.17g"

MODEL_FILE = "model.json"
SCHEMA_FILE = "schema.json"
BASE_MODEL_FILE = "base_model.json"
GROUPS_FILE = "groups.json"
RESOLVED_CONFIG_FILE = "config.resolved.json"


# --- overrides --------------------------------------------------------------


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_dotted(extras: Sequence[str]) -> Dict[str, Any]:
    """Turn ``--a.b.c=value`` / ``--a.b.c value`` tokens into a path->value mapping."""
    overrides: Dict[str, Any] = {}
    tokens = list(extras)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise ConfigError(f"Unrecognised argument {token!r}")
        if "=" in token:
            key, raw = token[2:].split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"Override {token!r} has no value")
            key, raw = token[2:], tokens[i + 1]
            i += 1
        overrides[key] = parse_value(raw)
        i += 1
    return overrides


def apply_dotted(document: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    patched = json.loads(json.dumps(document))
    for path, value in overrides.items():
        node = patched
        keys = path.split(".")
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override {path!r} descends into a non-object")
            node = child
        node[keys[-1]] = value
    return patched


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("mcgrad / gbdt")
    group.add_argument("--max-rounds", type=int, default=None)
    group.add_argument("--valid-fraction", type=float, default=None)
    group.add_argument("--seed", type=int, default=None)
    group.add_argument("--no-rescale", action="store_true")
    hints = typing.get_type_hints(GBDTConfig)
    for f in dataclasses.fields(GBDTConfig):
        if f.name == "seed":
            continue
        group.add_argument(_flag(f.name), dest=f"gbdt_{f.name}", type=hints[f.name], default=None)


def training_overrides(args: argparse.Namespace, mcgrad_prefix: str, gbdt_prefix: str) -> Dict[str, Any]:
    """Map the convenience flags onto dotted config paths."""
    overrides: Dict[str, Any] = {}
    if args.max_rounds is not None:
        overrides[f"{mcgrad_prefix}max_rounds"] = args.max_rounds
    if args.valid_fraction is not None:
        overrides[f"{mcgrad_prefix}valid_fraction"] = args.valid_fraction
    if args.seed is not None:
        overrides[f"{mcgrad_prefix}seed"] = args.seed
    if args.no_rescale:
        overrides[f"{mcgrad_prefix}rescale_enabled"] = False
    for f in dataclasses.fields(GBDTConfig):
        value = getattr(args, f"gbdt_{f.name}", None)
        if value is not None:
            overrides[f"{gbdt_prefix}{f.name}"] = value
    return overrides


# --- shared helpers ---------------------------------------------------------


def _read_json(path: Path, error: type = DataError) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise error(f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise error(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False))


def _external_scores(frame: pd.DataFrame, column: str) -> np.ndarray:
    if column not in frame.columns:
        raise DataError(f"Score column {column!r} not found in file")
    scores = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=np.float64)
    if not ((scores >= 0.0) & (scores <= 1.0)).all():
        raise ScoreOutOfRange(f"Column {column!r} must hold probabilities in [0, 1]")
    return scores


def _fit_calibrator(kind: str, params: Any, data: Dataset, base: np.ndarray, groups: GroupSet) -> Any:
    try:
        if kind == "mcgrad":
            return fit_mcgrad(data, base, params)
        if kind == "platt":
            return fit_platt(base, data.labels, data.weights)
        if kind == "isotonic":
            return fit_isotonic(base, data.labels, data.weights)
        if kind == "hkrr":
            return fit_hkrr(base, data.labels, groups, params)
        if kind == "dfmc":
            return fit_dfmc(data, base, groups, params)
        return IdentityModel()
    except McGradLabError:
        raise
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise TrainingError(f"{kind} fit failed: {exc}") from exc


def _report_rows(reports: Dict[str, MetricReport]) -> pd.DataFrame:
    return pd.DataFrame([report.to_row(model=name) for name, report in reports.items()])


def _print_report(title: str, report: MetricReport) -> None:
    print(title)
    print(f"  n={report.n} groups={report.n_groups} skipped={len(report.skipped_groups)}")
    print(f"  MCE: {report.mce:.4f} | ECCE/sigma: {report.ecce_sigma:.4f}")
    print(f"  Log loss: {report.logloss:.5f} | PRAUC: {report.prauc:.4f} | AUROC: {report.auroc:.4f}")
    print(f"  Brier: {report.brier:.5f} | ECE: {report.ece:.4f}")


# --- commands ---------------------------------------------------------------


def _load_groups(config: RunConfig, data: Dataset, fit_rows: np.ndarray) -> GroupSet:
    if config.groups.mode == "file":
        rules = _read_json(Path(config.groups.path))
        return GroupSet.from_rules(rules, data)
    generated = generate_unspecified_groups(data.take(fit_rows), from_params(GroupGenConfig, config.groups.params))
    return generated.evaluate(data)


def cmd_fit(config_path: str, overrides: Optional[Dict[str, Any]] = None) -> int:
    """Train base model and calibrator, report on the held-out part, then write artefacts."""
    document = _read_json(Path(config_path), ConfigError)
    if not isinstance(document, dict):
        raise ConfigError("Run config must be a JSON object")
    config = resolve_run_config(apply_dotted(document, overrides or {}))

    frame = read_frame(config.data.path)
    schema = load_schema(config.data.schema_path) if config.data.schema_path else None
    exclude = [config.base.params["column"]] if config.base.kind == "external_scores" else []
    data, schema = encode_frame(frame, config.data.label_column, schema, config.data.weight_column, exclude)
    fit_rows, test_rows = split_indices(data.n, SplitSpec(config.split.valid_fraction, config.split.seed))
    fit_data, test_data = data.take(fit_rows), data.take(test_rows)

    base_model = None
    if config.base.kind == "logistic":
        base_model = fit_logistic(fit_data, **config.base.params)
        base = base_model.predict(data)
    else:
        base = _external_scores(frame, config.base.params["column"])

    groups = _load_groups(config, data, fit_rows)
    kind = config.calibrator.kind
    params = calibrator_config(kind, config.calibrator.params)
    model = _fit_calibrator(kind, params, fit_data, base[fit_rows], groups.take(fit_rows))

    groups_test = groups.take(test_rows)
    calibrated = apply_calibrator(model, base[test_rows], test_data, groups_test)
    reports = {"base": metric_report(base[test_rows], test_data.labels, groups_test, test_data.weights)}
    if kind != "none":
        reports[kind] = metric_report(calibrated, test_data.labels, groups_test, test_data.weights)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / MODEL_FILE)
    save_schema(schema, out / SCHEMA_FILE)
    if base_model is not None:
        save_model(base_model, out / BASE_MODEL_FILE)
    _write_json(out / GROUPS_FILE, groups.rules())
    _write_json(out / RESOLVED_CONFIG_FILE, config.model_dump())
    _write_json(out / "report.json", {name: report.to_dict() for name, report in reports.items()})
    _report_rows(reports).to_csv(out / "report.csv", index=False, float_format=FLOAT_FORMAT)
    group_frame(reports[kind] if kind in reports else reports["base"]).to_csv(
        out / "groups.csv", index=False, float_format=FLOAT_FORMAT
    )
    if isinstance(model, McGradModel):
        model.trace_frame().to_csv(out / "trace.csv", index=False, float_format=FLOAT_FORMAT)
        print(f"MCGrad rounds selected: {model.n_rounds}")
    for name, report in reports.items():
        _print_report(f"Held-out metrics [{name}]", report)
    print(f"Artefacts written to {out}")
    return EXIT_OK


def _load_resolved(path: Path) -> RunConfig:
    """Re-validate the config echoed by ``fit``; a hand-edited copy fails as a config error."""
    document = _read_json(path, ConfigError)
    if not isinstance(document, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return resolve_run_config(document)


def cmd_predict(model_path: str, data_path: str, scores_out_path: str) -> int:
    """Score a CSV with a fitted model directory's artefacts."""
    model_dir = Path(model_path).parent
    model = load_model(model_path)
    resolved = _load_resolved(model_dir / RESOLVED_CONFIG_FILE)
    schema = load_schema(model_dir / SCHEMA_FILE)
    rules = _read_json(model_dir / GROUPS_FILE)

    frame = read_frame(data_path)
    base_cfg = resolved.base
    exclude = [base_cfg.params["column"]] if base_cfg.kind == "external_scores" else []
    data, _ = encode_frame(
        frame,
        resolved.data.label_column,
        schema,
        resolved.data.weight_column,
        exclude,
        require_labels=False,
    )
    if base_cfg.kind == "logistic":
        base = load_model(model_dir / BASE_MODEL_FILE).predict(data)
    else:
        base = _external_scores(frame, base_cfg.params["column"])
    try:
        groups = GroupSet.from_rules(rules, data)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{model_dir / GROUPS_FILE} holds a malformed group rule: {exc!r}") from exc
    calibrated = apply_calibrator(model, base, data, groups)

    out = pd.DataFrame({"row_index": np.arange(data.n), "base_score": base, "calibrated_score": calibrated})
    out.to_csv(scores_out_path, index=False, float_format=FLOAT_FORMAT)
    print(f"Wrote {data.n} scores to {scores_out_path}")
    return EXIT_OK


def cmd_evaluate(
    scores_path: str,
    data_path: str,
    label_column: str,
    out_dir: str,
    score_column: str = "calibrated_score",
    groups_path: Optional[str] = None,
    group_params: Optional[Dict[str, Any]] = None,
) -> int:
    scores_frame = read_frame(scores_path)
    scores = _external_scores(scores_frame, score_column)
    frame = read_frame(data_path)
    data, _ = encode_frame(frame, label_column)
    if scores.size != data.n:
        raise LengthMismatch(f"{scores.size} scores for {data.n} labelled rows")
    if groups_path:
        groups = GroupSet.from_rules(_read_json(Path(groups_path)), data)
    else:
        groups = generate_unspecified_groups(data, from_params(GroupGenConfig, group_params or {}))
    report = metric_report(scores, data.labels, groups, data.weights)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    _report_rows({score_column: report}).to_csv(out / "report.csv", index=False, float_format=FLOAT_FORMAT)
    group_frame(report).to_csv(out / "groups.csv", index=False, float_format=FLOAT_FORMAT)
    calibration_curve(scores, data.labels, weights=data.weights).to_csv(
        out / "calibration.csv", index=False, float_format=FLOAT_FORMAT
    )
    _print_report(f"Metrics [{score_column}]", report)
    return EXIT_OK


def cmd_bench(
    suite: str,
    out_dir: str,
    overrides: Optional[Dict[str, Any]] = None,
    csv_paths: Sequence[str] = (),
    label_column: Optional[str] = None,
    n: int = 20000,
    ablation: bool = False,
    groups_path: Optional[str] = None,
) -> int:
    config = with_overrides(BenchConfig(), overrides or {})
    if suite == "synthetic":
        datasets: List[Tuple[str, Any]] = list(default_suite(n))
    else:
        if not csv_paths or not label_column:
            raise ConfigError("--suite csv needs at least one --csv path and --label-column")
        datasets = [
            (Path(p).stem, CsvSource(name=Path(p).stem, path=p, label_column=label_column, groups_path=groups_path))
            for p in csv_paths
        ]
    frames = run_benchmark(out_dir, config, datasets, AblationGrid() if ablation else None)
    print(Path(out_dir, "summary.txt").read_text(), end="")
    print(frames["ranks"].to_string(index=False))
    return EXIT_OK


# --- entrypoint -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcgrad-lab", description=__doc__)
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit base model and calibrator from a run config")
    fit.add_argument("--config", required=True)
    _add_training_flags(fit)

    predict = sub.add_parser("predict", help="score a CSV with a fitted model")
    predict.add_argument("--model", required=True)
    predict.add_argument("--data", required=True)
    predict.add_argument("--out", required=True)

    evaluate = sub.add_parser("evaluate", help="compute the metric report for a scores file")
    evaluate.add_argument("--scores", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--label-column", required=True)
    evaluate.add_argument("--score-column", default="calibrated_score")
    evaluate.add_argument("--groups", default=None)
    evaluate.add_argument("--out", required=True)

    bench = sub.add_parser("bench", help="run the comparison grid and ablations")
    bench.add_argument("--suite", choices=["synthetic", "csv"], default="synthetic")
    bench.add_argument("--out", required=True)
    bench.add_argument("--csv", action="append", default=[])
    bench.add_argument("--label-column", default=None)
    bench.add_argument("--n", type=int, default=20000)
    bench.add_argument("--seeds", type=int, nargs="+", default=None)
    bench.add_argument("--methods", nargs="+", default=None)
    bench.add_argument("--ablation", action="store_true")
    bench.add_argument("--groups", default=None, help="prespecified group rules (JSON) for --suite csv")
    _add_training_flags(bench)
    return parser


def _dispatch(args: argparse.Namespace, extras: List[str]) -> int:
    dotted = parse_dotted(extras)
    if args.command == "fit":
        document = _read_json(Path(args.config), ConfigError)
        kind = document.get("calibrator", {}).get("kind", "mcgrad") if isinstance(document, dict) else "mcgrad"
        gbdt_prefix = "calibrator.params." if kind == "dfmc" else "calibrator.params.gbdt."
        overrides = training_overrides(args, "calibrator.params.", gbdt_prefix)
        overrides.update(dotted)
        return cmd_fit(args.config, overrides)
    if args.command == "predict":
        if dotted:
            raise ConfigError(f"predict takes no overrides: {sorted(dotted)}")
        return cmd_predict(args.model, args.data, args.out)
    if args.command == "evaluate":
        # --groups.<field>=value tunes the unspecified-group generator
        unknown = [k for k in dotted if not k.startswith("groups.")]
        if unknown:
            raise ConfigError(f"evaluate only accepts groups.* overrides, got {unknown}")
        group_params = {k.split(".", 1)[1]: v for k, v in dotted.items()}
        return cmd_evaluate(
            args.scores, args.data, args.label_column, args.out, args.score_column, args.groups, group_params
        )
    overrides = training_overrides(args, "mcgrad.", "mcgrad.gbdt.")
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.methods is not None:
        overrides["methods"] = args.methods
    overrides.update(dotted)
    return cmd_bench(args.suite, args.out, overrides, args.csv, args.label_column, args.n, args.ablation, args.groups)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _dispatch(args, extras)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())


__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DATA",
    "EXIT_TRAINING",
    "parse_dotted",
    "apply_dotted",
    "cmd_fit",
    "cmd_predict",
    "cmd_evaluate",
    "cmd_bench",
    "build_parser",
    "main",
]
