"""Core data structures shared across modules."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError

SCORE_COLUMN = "__score__"
MISSING_LEVEL = "__missing__"


@dataclass
class Dataset:
    features: np.ndarray  # n x d float64
    labels: np.ndarray  # n, values in {0, 1}
    weights: Optional[np.ndarray] = None
    feature_names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n, d = self.features.shape
        if self.labels.shape != (n,):
            raise DataError(f"labels must have length {n}, got shape {self.labels.shape}")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise DataError("labels must be 0/1")
        # NaN marks a missing value; infinities are never valid
        if np.isinf(self.features).any():
            bad = sorted({self.feature_names[j] if j < len(self.feature_names) else f"x{j}"
                          for j in np.nonzero(np.isinf(self.features).any(axis=0))[0]})
            raise DataError(f"features contain infinite values in columns {bad}")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (n,) or (self.weights < 0).any() or not np.isfinite(self.weights).all():
                raise DataError("weights must be a finite non-negative vector of length n")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(d)]
        if len(self.feature_names) != d:
            raise DataError(f"Expected {d} feature names, got {len(self.feature_names)}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def sample_weights(self) -> np.ndarray:
        return self.weights if self.weights is not None else np.ones(self.n)

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features[rows],
            labels=self.labels[rows],
            weights=None if self.weights is None else self.weights[rows],
            feature_names=list(self.feature_names),
        )


@dataclass
class ColumnSpec:
    name: str
    kind: str  # numeric | categorical
    levels: List[str] = field(default_factory=list)
    fill: float = 0.0


@dataclass
class FeatureSchema:
    columns: List[ColumnSpec]
    label_column: str = ""
    weight_column: Optional[str] = None

    @property
    def feature_names(self) -> List[str]:
        names: List[str] = []
        for col in self.columns:
            if col.kind == "numeric":
                names.append(col.name)
            else:
                names.extend(f"{col.name}={level}" for level in col.levels)
        return names

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label_column": self.label_column,
            "weight_column": self.weight_column,
            "columns": [asdict(c) for c in self.columns],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "FeatureSchema":
        return cls(
            columns=[ColumnSpec(**c) for c in payload["columns"]],
            label_column=payload.get("label_column", ""),
            weight_column=payload.get("weight_column"),
        )


@dataclass
class GroupCondition:
    column: str
    op: str  # "==" or "<="
    value: float

    def evaluate(self, data: Dataset) -> np.ndarray:
        try:
            j = data.feature_names.index(self.column)
        except ValueError:
            raise DataError(f"Group condition refers to unknown column {self.column!r}") from None
        col = data.features[:, j]
        if self.op == "==":
            return col == self.value
        if self.op == "<=":
            return col <= self.value
        raise DataError(f"Unsupported group operator {self.op!r}")

    def describe(self) -> str:
        value = int(self.value) if float(self.value).is_integer() else self.value
        return f"{self.column}{self.op}{value}"


@dataclass
class GroupSpec:
    name: str
    membership: np.ndarray
    conditions: List[GroupCondition] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.membership = np.asarray(self.membership, dtype=bool)

    @property
    def size(self) -> int:
        return int(self.membership.sum())


@dataclass
class GroupSet:
    groups: List[GroupSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    @property
    def names(self) -> List[str]:
        return [g.name for g in self.groups]

    def indicator_matrix(self) -> np.ndarray:
        if not self.groups:
            return np.zeros((0, 0))
        return np.column_stack([g.membership.astype(np.float64) for g in self.groups])

    def evaluate(self, data: Dataset) -> "GroupSet":
        """Re-evaluate the rule-defined groups on another dataset."""
        evaluated: List[GroupSpec] = []
        for group in self.groups:
            if not group.conditions:
                raise DataError(f"Group {group.name!r} has no rule and cannot be re-evaluated")
            mask = np.ones(data.n, dtype=bool)
            for cond in group.conditions:
                mask &= cond.evaluate(data)
            evaluated.append(GroupSpec(group.name, mask, list(group.conditions)))
        return GroupSet(evaluated)

    def take(self, rows: np.ndarray) -> "GroupSet":
        return GroupSet([GroupSpec(g.name, g.membership[rows], list(g.conditions)) for g in self.groups])

    def rules(self) -> List[Dict[str, Any]]:
        return [
            {"name": g.name, "conditions": [asdict(c) for c in g.conditions]}
            for g in self.groups
        ]

    @classmethod
    def from_rules(cls, rules: Sequence[Dict[str, Any]], data: Dataset) -> "GroupSet":
        specs = [
            GroupSpec(
                rule["name"],
                np.zeros(data.n, dtype=bool),
                [GroupCondition(c["column"], c["op"], float(c["value"])) for c in rule["conditions"]],
            )
            for rule in rules
        ]
        return cls(specs).evaluate(data)


@dataclass
class IntervalSpec:
    start: int  # 1-based, inclusive
    end: int  # 1-based, inclusive


@dataclass
class GroupMetrics:
    name: str
    n_h: int
    ecce_h: float
    sigma_h: float
    ratio: float


@dataclass
class MetricReport:
    ecce: float
    ecce_sigma: float
    mce: float
    mce_absolute: float
    logloss: float
    prauc: float
    auroc: float
    brier: float
    ece: float
    n: int = 0
    n_groups: int = 0
    per_group: List[GroupMetrics] = field(default_factory=list)
    skipped_groups: List[str] = field(default_factory=list)
    undefined: List[str] = field(default_factory=list)

    SCALAR_FIELDS = (
        "ecce",
        "ecce_sigma",
        "mce",
        "mce_absolute",
        "logloss",
        "prauc",
        "auroc",
        "brier",
        "ece",
    )

    def scalars(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.SCALAR_FIELDS}

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {k: _json_float(v) for k, v in self.scalars().items()}
        payload.update(
            {
                "n": self.n,
                "n_groups": self.n_groups,
                "per_group": [
                    {k: _json_float(v) for k, v in asdict(row).items()} for row in self.per_group
                ],
                "skipped_groups": list(self.skipped_groups),
                "undefined": list(self.undefined),
            }
        )
        return payload

    def to_row(self, **keys: Any) -> Dict[str, Any]:
        row: Dict[str, Any] = dict(keys)
        row.update(self.scalars())
        row["n"] = self.n
        row["n_groups"] = self.n_groups
        return row


def _json_float(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


__all__ = [
    "SCORE_COLUMN",
    "MISSING_LEVEL",
    "Dataset",
    "ColumnSpec",
    "FeatureSchema",
    "GroupCondition",
    "GroupSpec",
    "GroupSet",
    "IntervalSpec",
    "GroupMetrics",
    "MetricReport",
]
