"""Class centroids: batch means, momentum blending, partial-momentum views."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

MODES = ("naive", "momentum", "partial")


@dataclass
class Centroids:
    """Centroid rows for a set of class ids; ``values`` may be a Var."""

    classes: tuple
    values: object  # (k, d)

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        if len(self.classes) != dc.value_of(self.values).shape[0]:
            raise ValueError("one centroid row per class")

    def row_of(self, c) -> int:
        try:
            return self.classes.index(int(c))
        except ValueError:
            raise KeyError(f"no centroid for class {c}") from None

    def array(self) -> np.ndarray:
        return np.array(dc.value_of(self.values))

    def as_dict(self) -> dict:
        arr = self.array()
        return {c: arr[i] for i, c in enumerate(self.classes)}

    @classmethod
    def from_dict(cls, mapping):
        keys = sorted(mapping)
        return cls(tuple(keys), np.array([mapping[k] for k in keys], dtype=np.float64))


def _averaging_matrix(labels, classes):
    labels = np.asarray(labels)
    mat = np.zeros((len(classes), labels.shape[0]))
    for r, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples")
        mat[r, idx] = 1.0 / idx.size
    return mat


def batch_centroid(batch) -> Centroids:
    """Per-class mean of the clean features of ``batch``."""
    classes = batch.classes
    if not classes:
        raise ValueError("empty batch")
    mat = _averaging_matrix(batch.labels, classes)
    return Centroids(classes, dc.matmul(mat, batch.features))


@dataclass
class CentroidState:
    """Momentum bookkeeping: constant snapshots of the previous centroids."""

    gamma: float = 0.9
    mode: str = "partial"
    previous: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown centroid mode {self.mode!r}")

    def snapshot(self) -> Centroids | None:
        return Centroids.from_dict(self.previous) if self.previous else None


def momentum_update(state: CentroidState, current: Centroids) -> Centroids:
    """gamma * previous + (1 - gamma) * current, previous held constant.

    A class seen for the first time starts from its current mean. The
    state keeps the new values as the next step's snapshot; classes absent
    from ``current`` keep their stored value.
    """
    if not 0.0 <= state.gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    cur = dc.value_of(current.values)
    prev = np.array([state.previous.get(c, cur[i]) for i, c in enumerate(current.classes)])
    blended = dc.add(state.gamma * prev, dc.mul(1.0 - state.gamma, current.values))
    out = Centroids(current.classes, blended)
    arr = dc.value_of(blended)
    for i, c in enumerate(current.classes):
        state.previous[c] = np.array(arr[i])
    return out


def centroid_views(state: CentroidState, batch):
    """(compact_view, margin_view) for the configured mode.

    partial: momentum centroids for compactness, batch means for margin.
    """
    if state.mode not in MODES:
        raise ValueError(f"unknown centroid mode {state.mode!r}")
    current = batch_centroid(batch)
    if state.mode == "naive":
        for c, v in current.as_dict().items():
            state.previous[c] = v
        return current, current
    smoothed = momentum_update(state, current)
    if state.mode == "momentum":
        return smoothed, smoothed
    return smoothed, current
