"""JSON checkpoints: model parameters, loss settings and centroids."""

from __future__ import annotations

import json

import numpy as np

from ..losses import LossConfig
from ..model import Layer, Model, SoftmaxHead

VERSION = 1


class CheckpointError(ValueError):
    pass


def _floats(arr):
    # Python's float repr is the shortest string that round-trips exactly
    return [float(v) for v in np.asarray(arr, dtype=np.float64).ravel()]


def to_dict(model: Model, loss_config: LossConfig = None, centroids: dict = None, seed=0, extra=None) -> dict:
    params = {}
    for name, p in model.detach().named_parameters():
        params[name] = {"shape": list(np.shape(p)), "data": _floats(p)}
    doc = {
        "version": VERSION,
        "seed": int(seed),
        "layer_dims": [int(d) for d in model.layer_dims],
        "class_count": int(model.class_count),
        "activations": list(model.activations),
        "params": params,
        "loss_config": (loss_config or LossConfig()).to_dict(),
        "centroids": {str(c): _floats(v) for c, v in sorted((centroids or {}).items())},
    }
    if extra:
        doc["extra"] = extra
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save(path, model, loss_config=None, centroids=None, seed=0, extra=None):
    text = dumps(to_dict(model, loss_config, centroids, seed, extra))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def from_dict(doc: dict):
    """(model, loss_config, centroids, doc)."""
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        dims = doc["layer_dims"]
        acts = doc["activations"]
        P = doc["params"]

        def arr(name):
            return np.array(P[name]["data"], dtype=np.float64).reshape(P[name]["shape"])

        layers = [Layer(arr(f"layer{i + 1}.weight"), arr(f"layer{i + 1}.bias"), acts[i])
                  for i in range(len(dims) - 1)]
        model = Model(layers, SoftmaxHead(arr("head.weight"), arr("head.bias")), {"seed": doc.get("seed", 0)})
        lc = LossConfig(**doc.get("loss_config", {}))
        cents = {int(c): np.array(v, dtype=np.float64) for c, v in doc.get("centroids", {}).items()}
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return model, lc, cents, doc


def load(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
    return from_dict(doc)
