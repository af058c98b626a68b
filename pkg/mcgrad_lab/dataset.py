"""CSV ingestion, feature encoding, splitting and score augmentation."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import SplitSpec
from .errors import (
    DegenerateSplit,
    EmptyFile,
    LengthMismatch,
    MissingLabelColumn,
    SchemaMismatch,
    ScoreOutOfRange,
    UnparseableLabel,
)
from .models import MISSING_LEVEL, SCORE_COLUMN, ColumnSpec, Dataset, FeatureSchema

logger = logging.getLogger(__name__)

_LABEL_VALUES = {"0": 0.0, "1": 1.0, "0.0": 0.0, "1.0": 1.0, "false": 0.0, "true": 1.0}


def read_frame(path: str | Path) -> pd.DataFrame:
    """Read a CSV as raw strings; empty cells become NaN."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=True)
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{path} is empty") from None
    if frame.empty:
        raise EmptyFile(f"{path} has a header but no rows")
    return frame


def parse_labels(values: pd.Series) -> np.ndarray:
    labels = np.empty(len(values), dtype=np.float64)
    for row, raw in enumerate(values.tolist()):
        key = str(raw).strip().lower() if isinstance(raw, str) else raw
        if key not in _LABEL_VALUES:
            raise UnparseableLabel(row, raw)
        labels[row] = _LABEL_VALUES[key]
    return labels


def _is_numeric(values: pd.Series) -> bool:
    present = values.dropna()
    if present.empty:
        return True
    return bool(pd.to_numeric(present, errors="coerce").notna().all())


def _finite_numeric(values: pd.Series) -> pd.Series:
    # "inf" and "-inf" parse as numbers; treat them as missing
    return pd.to_numeric(values, errors="coerce").replace([np.inf, -np.inf], np.nan)


def _first_seen_levels(values: pd.Series) -> List[str]:
    filled = values.fillna(MISSING_LEVEL).astype(str)
    return list(dict.fromkeys(filled.tolist()))


def infer_schema(
    frame: pd.DataFrame,
    label_column: str,
    weight_column: Optional[str] = None,
    exclude: Iterable[str] = (),
) -> FeatureSchema:
    """Derive numeric/categorical column specs and imputation constants from raw rows."""
    skip = {label_column, weight_column, *exclude}
    columns: List[ColumnSpec] = []
    for name in frame.columns:
        if name in skip:
            continue
        values = frame[name]
        if _is_numeric(values):
            numeric = _finite_numeric(values)
            fill = float(numeric.mean()) if numeric.notna().any() else 0.0
            columns.append(ColumnSpec(name=name, kind="numeric", fill=fill))
        else:
            columns.append(ColumnSpec(name=name, kind="categorical", levels=_first_seen_levels(values)))
    return FeatureSchema(columns=columns, label_column=label_column, weight_column=weight_column)


def encode_features(frame: pd.DataFrame, schema: FeatureSchema) -> np.ndarray:
    """Apply a schema to raw rows; pure function of (schema, rows)."""
    blocks: List[np.ndarray] = []
    n = len(frame)
    for col in schema.columns:
        values = frame[col.name]
        if col.kind == "numeric":
            numeric = _finite_numeric(values)
            bad = numeric.isna() & values.notna()
            if bad.any():
                logger.warning(
                    "Column %s has %d non-numeric or infinite values; imputing them", col.name, int(bad.sum())
                )
            blocks.append(numeric.fillna(col.fill).to_numpy(dtype=np.float64).reshape(-1, 1))
        else:
            lookup = {level: idx for idx, level in enumerate(col.levels)}
            codes = values.fillna(MISSING_LEVEL).astype(str).map(lookup)
            block = np.zeros((n, len(col.levels)), dtype=np.float64)
            known = codes.notna().to_numpy()
            block[np.nonzero(known)[0], codes[known].astype(int).to_numpy()] = 1.0
            blocks.append(block)
    if not blocks:
        return np.zeros((n, 0))
    return np.hstack(blocks)


def _check_schema_columns(frame: pd.DataFrame, schema: FeatureSchema, skip: set) -> None:
    file_columns = [c for c in frame.columns if c not in skip]
    known = {c.name for c in schema.columns}
    extra = [c for c in file_columns if c not in known]
    if extra:
        raise SchemaMismatch(f"Schema lacks columns present in file: {extra}")
    missing = [c.name for c in schema.columns if c.name not in frame.columns]
    if missing:
        raise SchemaMismatch(f"File lacks schema columns: {missing}")


def encode_frame(
    frame: pd.DataFrame,
    label_column: str,
    schema: Optional[FeatureSchema] = None,
    weight_column: Optional[str] = None,
    exclude: Iterable[str] = (),
    require_labels: bool = True,
) -> Tuple[Dataset, FeatureSchema]:
    exclude = set(exclude)
    has_label = label_column in frame.columns
    if require_labels and not has_label:
        raise MissingLabelColumn(label_column)
    if schema is None:
        schema = infer_schema(frame, label_column, weight_column, exclude)
    else:
        _check_schema_columns(frame, schema, {label_column, weight_column, *exclude})
    features = encode_features(frame, schema)
    labels = parse_labels(frame[label_column]) if has_label else np.zeros(len(frame))
    weights = None
    if weight_column and weight_column not in frame.columns and require_labels:
        raise SchemaMismatch(f"Weight column {weight_column!r} not found in file")
    if weight_column and weight_column in frame.columns:
        weights = pd.to_numeric(frame[weight_column], errors="coerce").fillna(0.0).to_numpy(dtype=np.float64)
    data = Dataset(features=features, labels=labels, weights=weights, feature_names=schema.feature_names)
    return data, schema


def load_csv(
    path: str | Path,
    label_column: str,
    schema: Optional[FeatureSchema] = None,
    weight_column: Optional[str] = None,
    exclude: Iterable[str] = (),
) -> Tuple[Dataset, FeatureSchema]:
    """Load and encode a labelled CSV, inferring the schema when none is given."""
    frame = read_frame(path)
    data, schema = encode_frame(frame, label_column, schema, weight_column, exclude)
    logger.info("Loaded %s: n=%d d=%d", path, data.n, data.d)
    return data, schema


def save_schema(schema: FeatureSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2))


def load_schema(path: str | Path) -> FeatureSchema:
    return FeatureSchema.from_dict(json.loads(Path(path).read_text()))


def split_indices(n: int, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split returning sorted (train, valid) row indices."""
    if n < 2:
        raise DegenerateSplit(f"Cannot split {n} row(s) into train and validation parts")
    n_valid = int(round(n * spec.valid_fraction))
    n_valid = min(max(n_valid, 1), n - 1)
    order = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(order[n_valid:]), np.sort(order[:n_valid])


def train_valid_split(data: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    train_rows, valid_rows = split_indices(data.n, spec)
    return data.take(train_rows), data.take(valid_rows)


def augment_with_score(data: Dataset, scores: np.ndarray) -> Dataset:
    """Append (or replace) the reserved score column holding ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (data.n,):
        raise LengthMismatch(f"Expected {data.n} scores, got shape {scores.shape}")
    if not ((scores >= 0.0) & (scores <= 1.0)).all():
        raise ScoreOutOfRange("Scores must lie in [0, 1]")
    names = list(data.feature_names)
    if SCORE_COLUMN in names:
        features = data.features.copy()
        features[:, names.index(SCORE_COLUMN)] = scores
    else:
        features = np.column_stack([data.features, scores])
        names.append(SCORE_COLUMN)
    return Dataset(features=features, labels=data.labels, weights=data.weights, feature_names=names)


__all__ = [
    "read_frame",
    "parse_labels",
    "infer_schema",
    "encode_features",
    "encode_frame",
    "load_csv",
    "save_schema",
    "load_schema",
    "split_indices",
    "train_valid_split",
    "augment_with_score",
]
