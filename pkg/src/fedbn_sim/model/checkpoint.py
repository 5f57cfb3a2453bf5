"""JSON checkpoints: a list of tagged layers with shapes and flat entries."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mlp import BatchNorm, Dense, MlpParams
from .theory import TheoryParams


def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(doc: dict) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def params_to_dict(p: MlpParams | TheoryParams) -> dict:
    if isinstance(p, TheoryParams):
        return {
            "kind": "theory",
            "alpha": p.alpha,
            "layers": [
                {"tag": "Dense", "arrays": {"V": _pack(p.V), "c": _pack(p.c)}},
                {"tag": "BatchNorm", "arrays": {"gamma": _pack(p.gamma)}},
            ],
        }
    layers = []
    for layer in p.layers:
        names = layer.trainable + layer.state
        entry = {"tag": layer.tag, "arrays": {n: _pack(getattr(layer, n)) for n in names}}
        if isinstance(layer, BatchNorm):
            entry["momentum"] = layer.momentum
            entry["epsilon"] = layer.epsilon
        layers.append(entry)
    return {"kind": "mlp", "layers": layers}


def params_from_dict(doc: dict) -> MlpParams | TheoryParams:
    if doc["kind"] == "theory":
        dense, bn = doc["layers"]
        return TheoryParams(
            V=_unpack(dense["arrays"]["V"]),
            gamma=_unpack(bn["arrays"]["gamma"]),
            c=_unpack(dense["arrays"]["c"]),
            alpha=float(doc["alpha"]),
        )
    layers = []
    for entry in doc["layers"]:
        arrays = {k: _unpack(v) for k, v in entry["arrays"].items()}
        if entry["tag"] == "Dense":
            layers.append(Dense(arrays["W"], arrays["b"]))
        elif entry["tag"] == "BatchNorm":
            layers.append(BatchNorm(
                arrays["gamma"], arrays["beta"], arrays["running_mean"], arrays["running_var"],
                float(entry["momentum"]), float(entry["epsilon"]),
            ))
        else:
            raise ValueError(f"unknown layer tag {entry['tag']!r}")
    return MlpParams(layers)


def save_params(path: str | Path, p: MlpParams | TheoryParams) -> None:
    Path(path).write_text(json.dumps(params_to_dict(p)) + "\n", encoding="ascii")


def load_params(path: str | Path) -> MlpParams | TheoryParams:
    return params_from_dict(json.loads(Path(path).read_text(encoding="ascii")))
