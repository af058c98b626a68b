"""Tagged JSON envelopes for every fitted model kind."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Dict, Tuple

import numpy as np

from .calibrators import DFMCModel, HKRRModel, IdentityModel, IsotonicModel, LogisticModel, PlattModel
from .errors import DataError
from .gbdt import TreeEnsemble
from .mcgrad import McGradModel


def _logistic_payload(model: LogisticModel) -> Dict[str, Any]:
    return {
        "coefficients": model.coefficients.tolist(),
        "intercept": model.intercept,
        "l2": model.l2,
        "mean": model.mean.tolist(),
        "scale": model.scale.tolist(),
        "converged": model.converged,
        "gradient_norm": model.gradient_norm,
    }


def _logistic_model(payload: Dict[str, Any]) -> LogisticModel:
    return LogisticModel(
        coefficients=np.asarray(payload["coefficients"], dtype=np.float64),
        intercept=float(payload["intercept"]),
        l2=float(payload["l2"]),
        mean=np.asarray(payload["mean"], dtype=np.float64),
        scale=np.asarray(payload["scale"], dtype=np.float64),
        converged=bool(payload["converged"]),
        gradient_norm=float(payload["gradient_norm"]),
    )


def _platt_payload(model: PlattModel) -> Dict[str, Any]:
    return {"a": model.a, "b": model.b, "eps": model.eps, "degenerate": model.degenerate, "converged": model.converged}


def _isotonic_payload(model: IsotonicModel) -> Dict[str, Any]:
    return {"breakpoints": model.breakpoints.tolist(), "values": model.values.tolist()}


def _isotonic_model(payload: Dict[str, Any]) -> IsotonicModel:
    return IsotonicModel(
        breakpoints=np.asarray(payload["breakpoints"], dtype=np.float64),
        values=np.asarray(payload["values"], dtype=np.float64),
    )


def _hkrr_payload(model: HKRRModel) -> Dict[str, Any]:
    return {
        "group_names": list(model.group_names),
        "bucket_width": model.bucket_width,
        "alpha": model.alpha,
        "patches": [[g, b, delta] for g, b, delta in model.patches],
        "converged": model.converged,
        "n_sweeps": model.n_sweeps,
    }


def _hkrr_model(payload: Dict[str, Any]) -> HKRRModel:
    return HKRRModel(
        group_names=list(payload["group_names"]),
        bucket_width=float(payload["bucket_width"]),
        alpha=float(payload["alpha"]),
        patches=[(int(g), int(b), float(delta)) for g, b, delta in payload["patches"]],
        converged=bool(payload["converged"]),
        n_sweeps=int(payload["n_sweeps"]),
    )


def _dfmc_payload(model: DFMCModel) -> Dict[str, Any]:
    return {
        "ensemble": model.ensemble.to_dict(),
        "group_names": list(model.group_names),
        "n_features": model.n_features,
        "eps": model.eps,
    }


def _dfmc_model(payload: Dict[str, Any]) -> DFMCModel:
    return DFMCModel(
        ensemble=TreeEnsemble.from_dict(payload["ensemble"]),
        group_names=list(payload["group_names"]),
        n_features=int(payload["n_features"]),
        eps=float(payload["eps"]),
    )


_CODECS: Dict[str, Tuple[type, Callable[[Any], Dict[str, Any]], Callable[[Dict[str, Any]], Any]]] = {
    "gbdt": (TreeEnsemble, lambda m: m.to_dict(), TreeEnsemble.from_dict),
    "mcgrad": (McGradModel, lambda m: m.to_dict(), McGradModel.from_dict),
    "logistic": (LogisticModel, _logistic_payload, _logistic_model),
    "platt": (PlattModel, _platt_payload, lambda p: PlattModel(**p)),
    "isotonic": (IsotonicModel, _isotonic_payload, _isotonic_model),
    "hkrr": (HKRRModel, _hkrr_payload, _hkrr_model),
    "dfmc": (DFMCModel, _dfmc_payload, _dfmc_model),
    "identity": (IdentityModel, lambda m: {}, lambda p: IdentityModel()),
}


def model_kind(model: Any) -> str:
    for kind, (cls, _, _) in _CODECS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"No serializer for {type(model).__name__}")


def to_envelope(model: Any) -> Dict[str, Any]:
    kind = model_kind(model)
    return {"kind": kind, "payload": _CODECS[kind][1](model)}


def from_envelope(document: Dict[str, Any]) -> Any:
    kind = document.get("kind") if isinstance(document, dict) else None
    if kind not in _CODECS:
        raise DataError(f"Unknown model kind {kind!r}")
    try:
        return _CODECS[kind][2](document["payload"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"Malformed {kind} model payload: {exc}") from exc


def save_model(model: Any, path: str | Path) -> None:
    # json writes floats with repr, which round-trips exactly
    Path(path).write_text(json.dumps(to_envelope(model), allow_nan=False))


def load_model(path: str | Path) -> Any:
    try:
        document = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    return from_envelope(document)


__all__ = ["model_kind", "to_envelope", "from_envelope", "save_model", "load_model"]
