"""JSON checkpoints for energy models.

Floats are written with Python's shortest round-trip repr, so loading a saved
model reproduces every parameter bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import inr
from .errors import ConfigurationError, FormatError
from .normalization import NormStats


def checkpoint_dict(model: inr.EnergyModel) -> dict:
    meta, p = model.meta, model.params
    return {
        "version": inr.FORMAT_VERSION,
        "meta": {
            "d": meta.d,
            "m": meta.m,
            "L": meta.L,
            "widths": list(meta.widths),
            "omega0": meta.omega0,
            "sigma_train": meta.sigma_train,
            "seed": meta.seed,
            "norm": model.norm.to_dict(),
        },
        "params": {
            "B": p.B.tolist(),
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(p.Ws, p.bs)],
            "head": {"W": p.head_W.tolist(), "b": p.head_b.tolist()},
        },
    }


def checkpoint_to_json(model: inr.EnergyModel) -> str:
    return json.dumps(checkpoint_dict(model), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def _matrix(obj, what):
    arr = np.array(obj, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"{what} must be a matrix")
    return arr


def model_from_dict(obj: dict) -> inr.EnergyModel:
    try:
        if obj.get("version") != inr.FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {obj.get('version')!r}")
        meta, params = obj["meta"], obj["params"]
        B = _matrix(params["B"], "B")
        Ws, bs = [], []
        for i, layer in enumerate(params["layers"]):
            Ws.append(_matrix(layer["W"], f"layer {i} W"))
            bs.append(np.array(layer["b"], dtype=np.float64))
        head_W = _matrix(params["head"]["W"], "head W")
        head_b = np.array(params["head"]["b"], dtype=np.float64).reshape(-1)
        widths = tuple(int(w) for w in meta["widths"])
        if int(meta["L"]) != len(widths):
            raise FormatError("meta.L disagrees with meta.widths")
        norm = NormStats.from_dict(meta["norm"])
        m = inr.ModelMeta(
            d=int(meta["d"]), m=int(meta["m"]), widths=widths, omega0=float(meta["omega0"]),
            sigma_train=None if meta.get("sigma_train") is None else float(meta["sigma_train"]),
            seed=meta.get("seed"), norm=norm,
        )
        return inr.EnergyModel(inr.Params(B, tuple(Ws), tuple(bs), head_W, head_b).frozen(), m)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, ConfigurationError) as exc:
        raise FormatError(f"invalid checkpoint: {exc}") from None


def save_checkpoint(path, model: inr.EnergyModel) -> None:
    Path(path).write_text(checkpoint_to_json(model) + "\n", encoding="utf-8")


def load_checkpoint(path) -> inr.EnergyModel:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: checkpoint must be a JSON object")
    return model_from_dict(obj)
