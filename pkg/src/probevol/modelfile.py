"""Versioned JSON model files.

Floats are written with Python's shortest round-trip repr, so a loaded model
reproduces predictions bit for bit.
"""

from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .errors import ModelFormatError, ModelShapeError, ModelTruncatedError, ModelVersionError
from .errors import StructuralError
from .features import Standardizer
from .nn import LayerSpec, NetworkParams

MAGIC = "probevol-model"
VERSION = 1
_MAGIC_PREFIX = '{"magic": "%s"' % MAGIC


def _array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _unarray(d: dict, what: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.asarray(d["data"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelShapeError(f"{what}: malformed array record") from exc
    if data.size != int(np.prod(shape)):
        raise ModelShapeError(f"{what}: {data.size} values cannot fill shape {shape}")
    return data.reshape(shape)


def model_to_dict(params: NetworkParams, spec: LayerSpec, standardizer: Optional[Standardizer] = None) -> dict:
    return {
        "magic": MAGIC,
        "version": VERSION,
        "spec": spec.to_dict(),
        "params": {
            "weights": [_array(w) for w in params.weights],
            "biases": [_array(b) for b in params.biases],
            "bn_scale": [_array(a) for a in params.bn_scale],
            "bn_shift": [_array(a) for a in params.bn_shift],
            "running_mean": [_array(a) for a in params.running_mean],
            "running_var": [_array(a) for a in params.running_var],
            "output_scale": params.output_scale,
            "output_offset": params.output_offset,
        },
        "standardizer": None if standardizer is None else standardizer.to_dict(),
    }


def save_model(path, params: NetworkParams, spec: LayerSpec, standardizer: Optional[Standardizer] = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(params, spec, standardizer), fh)
        fh.write("\n")


def load_model(path):
    """Returns ``(params, spec, standardizer)``; standardizer may be None."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        if text.startswith(_MAGIC_PREFIX):
            raise ModelTruncatedError(f"{path}: model file is incomplete ({exc.msg})") from exc
        raise ModelFormatError(f"{path}: not a model file") from exc
    if not isinstance(doc, dict) or doc.get("magic") != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic header)")
    version = doc.get("version")
    if not isinstance(version, int) or version > VERSION or version < 1:
        raise ModelVersionError(f"{path}: model format version {version!r}; this build reads up to {VERSION}")
    try:
        spec = LayerSpec.from_dict(doc["spec"])
        p = doc["params"]
        params = NetworkParams(
            weights=[_unarray(a, f"weights[{i}]") for i, a in enumerate(p["weights"])],
            biases=[_unarray(a, f"biases[{i}]") for i, a in enumerate(p["biases"])],
            bn_scale=[_unarray(a, "bn_scale") for a in p["bn_scale"]],
            bn_shift=[_unarray(a, "bn_shift") for a in p["bn_shift"]],
            running_mean=[_unarray(a, "running_mean") for a in p["running_mean"]],
            running_var=[_unarray(a, "running_var") for a in p["running_var"]],
            output_scale=float(p["output_scale"]),
            output_offset=float(p["output_offset"]),
        )
        std = doc.get("standardizer")
        standardizer = None if std is None else Standardizer.from_dict(std)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelShapeError(f"{path}: inconsistent model record ({exc})") from exc
    try:
        params.validate(spec)
    except StructuralError as exc:
        raise ModelShapeError(f"{path}: {exc}") from exc
    if standardizer is not None and standardizer.mean.shape != (spec.input_dim,):
        raise ModelShapeError(f"{path}: standardizer width does not match input_dim")
    return params, spec, standardizer
