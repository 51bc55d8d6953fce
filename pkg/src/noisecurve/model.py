"""MLP softmax classifier: backbone, affine head, hyperplane geometry."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

ACTIVATIONS = ("relu", "none")


class DegenerateBoundaryError(ValueError):
    """Two head rows coincide, so their decision boundary is not a hyperplane."""


@dataclass
class Layer:
    weight: object  # (out, in) array, or a Var when bound to a tape
    bias: object
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class SoftmaxHead:
    weight: object  # (C, d)
    bias: object    # (C,)

    @property
    def class_count(self):
        return dc.value_of(self.weight).shape[0]


@dataclass
class Model:
    layers: list
    head: SoftmaxHead
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("backbone needs at least one layer")
        prev = None
        for i, layer in enumerate(self.layers):
            w = dc.value_of(layer.weight)
            b = dc.value_of(layer.bias)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i + 1}: weight {w.shape} / bias {b.shape} mismatch")
            if prev is not None and w.shape[1] != prev:
                raise ValueError(f"layer {i + 1} expects {w.shape[1]} inputs, previous layer gives {prev}")
            prev = w.shape[0]
        hw = dc.value_of(self.head.weight)
        hb = dc.value_of(self.head.bias)
        if hw.ndim != 2 or hb.shape != (hw.shape[0],):
            raise ValueError("head weight/bias mismatch")
        if hw.shape[0] < 2:
            raise ValueError("need at least two classes")
        if hw.shape[1] != prev:
            raise ValueError(f"head expects d={hw.shape[1]}, backbone gives {prev}")

    @property
    def input_dim(self) -> int:
        return dc.value_of(self.layers[0].weight).shape[1]

    @property
    def feature_dim(self) -> int:
        return dc.value_of(self.layers[-1].weight).shape[0]

    @property
    def class_count(self) -> int:
        return self.head.class_count

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def layer_dims(self) -> list:
        return [self.input_dim] + [dc.value_of(l.weight).shape[0] for l in self.layers]

    @property
    def activations(self) -> list:
        return [l.activation for l in self.layers]

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layer{i + 1}.weight", layer.weight))
            out.append((f"layer{i + 1}.bias", layer.bias))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def with_parameters(self, params) -> "Model":
        params = list(params)
        if len(params) != 2 * self.depth + 2:
            raise ValueError("wrong number of parameter tensors")
        layers = [Layer(params[2 * i], params[2 * i + 1], l.activation) for i, l in enumerate(self.layers)]
        return Model(layers, SoftmaxHead(params[-2], params[-1]), dict(self.meta))

    def bind(self, tape: dc.Tape) -> "Model":
        """Copy whose parameters are leaves of ``tape``."""
        return self.with_parameters([tape.leaf(dc.value_of(p)) for p in self.parameters()])

    def detach(self) -> "Model":
        return self.with_parameters([np.array(dc.value_of(p)) for p in self.parameters()])

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([dc.value_of(p).ravel() for p in self.parameters()])


def init_model(layer_dims, class_count, seed=0, activations=None) -> Model:
    """Seeded uniform(+-1/sqrt(fan_in)) initialisation.

    ``layer_dims`` is ``[input, hidden..., feature_dim]``.
    """
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs an input and at least one output extent")
    n_layers = len(layer_dims) - 1
    if activations is None:
        activations = ["relu"] * n_layers
    if len(activations) != n_layers:
        raise ValueError("one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(layer_dims[:-1], layer_dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(w, b, act))
    bound = 1.0 / np.sqrt(layer_dims[-1])
    head = SoftmaxHead(rng.uniform(-bound, bound, size=(class_count, layer_dims[-1])),
                       rng.uniform(-bound, bound, size=class_count))
    return Model(layers, head, {"seed": seed})


def _flatten_input(model, x):
    v = dc.value_of(x)
    k = model.input_dim
    if v.shape[-1:] == (k,):
        return x
    # grids (h, w, c), single or batched, are flattened row-major
    if v.ndim in (3, 4) and int(np.prod(v.shape[-3:])) == k:
        shape = v.shape[:-3] + (k,)
        return dc.reshape(x, shape) if isinstance(x, dc.Var) else v.reshape(shape)
    raise ValueError(f"input of shape {v.shape} does not match input dimension {k}")


def layer_outputs(model: Model, x) -> list:
    """Activations after every backbone layer, first to last."""
    h = _flatten_input(model, x)
    outs = []
    for layer in model.layers:
        h = dc.affine(h, layer.weight, layer.bias)
        if layer.activation == "relu":
            h = dc.relu(h)
        outs.append(h)
    return outs


def features(model: Model, x):
    """Penultimate-layer features q = f(x) (rows for batched x)."""
    return layer_outputs(model, x)[-1]


def features_at_layer(model: Model, x, layer_index: int):
    if not 1 <= layer_index <= model.depth:
        raise IndexError(f"layer_index must be in [1, {model.depth}], got {layer_index}")
    h = _flatten_input(model, x)
    for layer in model.layers[:layer_index]:
        h = dc.affine(h, layer.weight, layer.bias)
        if layer.activation == "relu":
            h = dc.relu(h)
    return h


def logits(model_or_head, q):
    head = model_or_head.head if isinstance(model_or_head, Model) else model_or_head
    return dc.affine(q, head.weight, head.bias)


def predict(model: Model, x):
    """argmax of the logits; ties go to the lowest class index."""
    z = dc.value_of(logits(model, features(model, x)))
    return np.argmax(z, axis=-1)


def hyperplane_distance(head: SoftmaxHead, q, c: int, i: int) -> float:
    """Distance from feature ``q`` to the boundary between classes c and i."""
    if c == i:
        raise ValueError("distinct classes required")
    w = dc.value_of(head.weight)
    b = dc.value_of(head.bias)
    dw = w[c] - w[i]
    db = b[c] - b[i]
    n = np.linalg.norm(dw)
    if n == 0.0:
        if db == 0.0:
            raise DegenerateBoundaryError(f"classes {c} and {i} have identical head rows")
        raise DegenerateBoundaryError(f"classes {c} and {i}: equal weights, boundary is empty")
    return float(abs(dw @ np.asarray(q, dtype=np.float64) + db) / n)


def boundary_distances(head: SoftmaxHead, q: np.ndarray, c: int) -> np.ndarray:
    """Distances of rows of ``q`` to every boundary P_ci, i != c; shape (n, C-1)."""
    w = dc.value_of(head.weight)
    b = dc.value_of(head.bias)
    others = [i for i in range(w.shape[0]) if i != c]
    dw = w[c] - w[others]
    db = b[c] - b[others]
    n = np.linalg.norm(dw, axis=1)
    if np.any(n == 0.0):
        bad = others[int(np.flatnonzero(n == 0.0)[0])]
        raise DegenerateBoundaryError(f"classes {c} and {bad} share a head row")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    return np.abs(q @ dw.T + db) / n


def scale_transform(model: Model, nu: float) -> Model:
    """Scale the last backbone layer and the head bias by ``nu``.

    Features scale by ``nu`` and all logits by ``nu``, so predictions are
    unchanged while margins and dispersions scale by ``nu``.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    new = model.detach()
    last = new.layers[-1]
    if nu != 1:
        last.weight = last.weight * nu
        last.bias = last.bias * nu
        new.head.bias = new.head.bias * nu
    return new


def scale_direction(model: Model) -> np.ndarray:
    """Fixed vector u with T_nu(theta) - theta = (nu - 1) u."""
    parts = []
    n = model.depth
    for name, p in model.named_parameters():
        arr = dc.value_of(p).ravel()
        keep = name in (f"layer{n}.weight", f"layer{n}.bias", "head.bias")
        parts.append(arr if keep else np.zeros_like(arr))
    return np.concatenate(parts)


def clone(model: Model) -> Model:
    return copy.deepcopy(model.detach())
