"""Configuration dataclasses, defaults and the validated run configuration."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError


@dataclass
class SplitSpec:
    valid_fraction: float = 0.2
    seed: int = 42

    def __post_init__(self) -> None:
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigError(f"valid_fraction must lie in (0, 1), got {self.valid_fraction}")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")


@dataclass
class GBDTConfig:
    # Production defaults; min_sum_hessian_in_leaf sits far above the usual 1e-3
    learning_rate: float = 0.028729759162731475
    n_estimators: int = 94
    max_depth: int = 5
    num_leaves: int = 5
    min_child_samples: int = 160
    min_sum_hessian_in_leaf: float = 20.0
    lambda_l2: float = 0.009131373863997217
    min_gain_to_split: float = 0.15007305226251808
    max_bins: int = 255
    seed: int = 42
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.n_estimators < 1:
            raise ConfigError("n_estimators must be >= 1")
        if self.num_leaves < 2:
            raise ConfigError("num_leaves must be >= 2")
        if self.min_sum_hessian_in_leaf < 0:
            raise ConfigError("min_sum_hessian_in_leaf must be >= 0")
        if self.lambda_l2 < 0:
            raise ConfigError("lambda_l2 must be >= 0")
        if self.max_bins < 2:
            raise ConfigError("max_bins must be >= 2")
        if self.min_child_samples < 1:
            raise ConfigError("min_child_samples must be >= 1")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be >= 1")


def dfmc_gbdt_config(**overrides: Any) -> GBDTConfig:
    """Generic GBDT defaults used by DFMC, with the depth pinned to 2."""
    params: Dict[str, Any] = {
        "learning_rate": 0.1,
        "n_estimators": 100,
        "num_leaves": 31,
        "min_child_samples": 20,
        "min_sum_hessian_in_leaf": 1e-3,
        "lambda_l2": 0.0,
        "min_gain_to_split": 0.0,
    }
    params.update(overrides)
    params["max_depth"] = 2
    return GBDTConfig(**params)


@dataclass
class McGradConfig:
    gbdt: GBDTConfig = field(default_factory=GBDTConfig)
    max_rounds: int = 100
    valid_fraction: float = 0.2
    seed: int = 42
    rescale_enabled: bool = True
    logit_clamp_eps: float = 1e-7

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if not 0.0 < self.logit_clamp_eps < 0.5:
            raise ConfigError("logit_clamp_eps must lie in (0, 0.5)")
        # Validates valid_fraction and seed
        self.split_spec()

    def split_spec(self) -> SplitSpec:
        return SplitSpec(valid_fraction=self.valid_fraction, seed=self.seed)


@dataclass
class LogisticConfig:
    l2: float = 1e-4
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")


@dataclass
class HKRRConfig:
    bucket_width: float = 0.1
    alpha: float = 0.05
    max_sweeps: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.bucket_width <= 1.0:
            raise ConfigError("bucket_width must lie in (0, 1]")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be >= 1")


@dataclass
class GroupGenConfig:
    max_groups: int = 1000
    max_conjunction_order: int = 2
    quantiles_per_numeric: int = 3
    min_group_size: int = 50
    seed: int = 42

    def __post_init__(self) -> None:
        if self.max_conjunction_order not in (1, 2):
            raise ConfigError("max_conjunction_order must be 1 or 2")
        if self.quantiles_per_numeric < 0:
            raise ConfigError("quantiles_per_numeric must be >= 0")
        if self.max_groups < 1:
            raise ConfigError("max_groups must be >= 1")


@dataclass
class SyntheticSpec:
    n: int = 20000
    d: int = 6
    n_binary: int = 3
    seed: int = 0
    # None draws the linear weights from the seed
    weights: Optional[List[float]] = None
    intercept: float = -0.5
    # (binary feature indices, logit offset) applied to rows where all listed features are 1
    segments: List[Tuple[List[int], float]] = field(default_factory=lambda: [([0, 1], 0.8)])
    distortion: str = "segment_bias"
    distortion_magnitude: float = 1.0
    distortion_feature: int = 0

    def __post_init__(self) -> None:
        if self.n < 2 or self.d < 1:
            raise ConfigError("SyntheticSpec needs n >= 2 and d >= 1")
        if not 0 <= self.n_binary <= self.d:
            raise ConfigError("n_binary must lie in [0, d]")
        if self.distortion not in ("segment_bias", "global_scale", "none"):
            raise ConfigError(f"Unknown distortion {self.distortion!r}")
        if self.weights is not None and len(self.weights) != self.d:
            raise ConfigError("weights must have length d")
        for features, _ in self.segments:
            if any(not 0 <= j < self.n_binary for j in features):
                raise ConfigError("segment features must be binary feature indices")
        if self.distortion == "segment_bias" and not 0 <= self.distortion_feature < self.n_binary:
            raise ConfigError("distortion_feature must be a binary feature index")


ABLATION_OVERRIDES: Dict[str, Dict[str, Any]] = {
    "full": {},
    "one_round": {"max_rounds": 1},
    "no_rescale": {"rescale_enabled": False},
    "mshl_low": {"gbdt.min_sum_hessian_in_leaf": 0.001},
    # Same config as full; the prespecified group indicators join the features
    "group_features": {},
}
GROUP_FEATURE_VARIANTS = frozenset({"group_features"})


@dataclass
class AblationGrid:
    variants: List[str] = field(default_factory=lambda: list(ABLATION_OVERRIDES))

    def __post_init__(self) -> None:
        unknown = [v for v in self.variants if v not in ABLATION_OVERRIDES]
        if unknown:
            raise ConfigError(f"Unknown ablation variants: {unknown}")
        if "full" not in self.variants:
            self.variants = ["full"] + list(self.variants)


@dataclass
class BenchConfig:
    methods: List[str] = field(
        default_factory=lambda: ["base", "mcgrad", "platt", "isotonic", "hkrr", "dfmc"]
    )
    seeds: List[int] = field(default_factory=lambda: list(range(5)))
    test_fraction: float = 0.3
    base_kind: str = "synthetic"
    mcgrad: McGradConfig = field(default_factory=McGradConfig)
    logistic: LogisticConfig = field(default_factory=LogisticConfig)
    hkrr: HKRRConfig = field(default_factory=HKRRConfig)
    dfmc: GBDTConfig = field(default_factory=dfmc_gbdt_config)
    groups: GroupGenConfig = field(default_factory=GroupGenConfig)
    n_jobs: int = 1

    def __post_init__(self) -> None:
        allowed = {"base", "mcgrad", "platt", "isotonic", "hkrr", "dfmc"}
        unknown = [m for m in self.methods if m not in allowed]
        if unknown:
            raise ConfigError(f"Unknown methods: {unknown}")
        if self.base_kind not in ("synthetic", "logistic"):
            raise ConfigError("base_kind must be 'synthetic' or 'logistic'")
        SplitSpec(valid_fraction=self.test_fraction)


def from_params(cls: type, params: Optional[Dict[str, Any]]) -> Any:
    """Build dataclass ``cls`` from a (possibly nested) parameter mapping.

    Unknown keys raise ``ConfigError``.
    """
    params = dict(params or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(params) - names)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} parameters: {unknown}")
    kwargs: Dict[str, Any] = {}
    for name, value in params.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = from_params(hint, value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(config: Any, overrides: Dict[str, Any]) -> Any:
    """Return a copy of a dataclass config with dotted-path overrides applied."""
    params = asdict(config)
    for path, value in overrides.items():
        node = params
        keys = path.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"Unknown override path {path!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"Unknown override path {path!r}")
        node[keys[-1]] = value
    return from_params(type(config), params)


# --- run configuration (validated JSON documents) -------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    path: str
    label_column: str
    weight_column: Optional[str] = None
    schema_path: Optional[str] = None


class SplitSection(_Section):
    valid_fraction: float = 0.3
    seed: int = 42


class BaseSection(_Section):
    kind: Literal["logistic", "external_scores"] = "logistic"
    params: Dict[str, Any] = Field(default_factory=dict)


class CalibratorSection(_Section):
    kind: Literal["mcgrad", "platt", "isotonic", "hkrr", "dfmc", "none"] = "mcgrad"
    params: Dict[str, Any] = Field(default_factory=dict)


class GroupsSection(_Section):
    mode: Literal["unspecified", "file"] = "unspecified"
    params: Dict[str, Any] = Field(default_factory=dict)
    path: Optional[str] = None


class RunConfig(_Section):
    data: DataSection
    split: SplitSection = Field(default_factory=SplitSection)
    base: BaseSection = Field(default_factory=BaseSection)
    calibrator: CalibratorSection = Field(default_factory=CalibratorSection)
    groups: GroupsSection = Field(default_factory=GroupsSection)
    output_dir: str


CALIBRATOR_PARAMS: Dict[str, Optional[type]] = {
    "mcgrad": McGradConfig,
    "hkrr": HKRRConfig,
    "dfmc": GBDTConfig,
    "platt": None,
    "isotonic": None,
    "none": None,
}


def calibrator_config(kind: str, params: Dict[str, Any]) -> Any:
    if kind == "dfmc":
        unknown = sorted(set(params) - {f.name for f in dataclasses.fields(GBDTConfig)})
        if unknown:
            raise ConfigError(f"Unknown GBDTConfig parameters: {unknown}")
        return dfmc_gbdt_config(**params)
    cls = CALIBRATOR_PARAMS[kind]
    if cls is None:
        if params:
            raise ConfigError(f"Calibrator {kind!r} takes no parameters")
        return None
    return from_params(cls, params)


def base_config(kind: str, params: Dict[str, Any]) -> Any:
    if kind == "logistic":
        return from_params(LogisticConfig, params)
    unknown = sorted(set(params) - {"column"})
    if unknown or "column" not in params:
        raise ConfigError("external_scores base needs exactly one parameter: 'column'")
    return dict(params)


def resolve_run_config(document: Dict[str, Any]) -> RunConfig:
    """Validate a run-config document and materialise every default."""
    try:
        config = RunConfig.model_validate(document)
    except Exception as exc:  # pydantic.ValidationError
        raise ConfigError(str(exc)) from exc
    SplitSpec(valid_fraction=config.split.valid_fraction, seed=config.split.seed)
    base = base_config(config.base.kind, config.base.params)
    calibrator = calibrator_config(config.calibrator.kind, config.calibrator.params)
    groups = from_params(GroupGenConfig, config.groups.params)
    if config.groups.mode == "file" and not config.groups.path:
        raise ConfigError("groups.mode 'file' requires groups.path")
    config.base.params = asdict(base) if dataclasses.is_dataclass(base) else base
    config.calibrator.params = asdict(calibrator) if calibrator is not None else {}
    config.groups.params = asdict(groups)
    return config


__all__ = [
    "SplitSpec",
    "GBDTConfig",
    "dfmc_gbdt_config",
    "McGradConfig",
    "LogisticConfig",
    "HKRRConfig",
    "GroupGenConfig",
    "SyntheticSpec",
    "ABLATION_OVERRIDES",
    "GROUP_FEATURE_VARIANTS",
    "AblationGrid",
    "BenchConfig",
    "from_params",
    "with_overrides",
    "RunConfig",
    "calibrator_config",
    "base_config",
    "resolve_run_config",
]
