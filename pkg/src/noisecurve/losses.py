"""Softmax, compactness, margin, regularisation and noisy-alignment losses."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .centroids import Centroids
from .model import DegenerateBoundaryError, Model, features, logits


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma_reg: float = 1e-3
    lam: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 5.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_reg", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta_v <= 0 or self.delta_d <= 0:
            raise ValueError("delta_v and delta_d must be positive")
        if self.delta_d <= self.delta_v:
            warnings.warn("delta_d <= delta_v: margin guarantee does not apply", stacklevel=2)

    def to_dict(self):
        return asdict(self)


@dataclass
class ClassBatch:
    """Clean features grouped by label, with optional parallel noisy features."""

    features: object  # (n, d) array or Var
    labels: np.ndarray
    noisy: object = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        f = dc.value_of(self.features)
        if f.ndim != 2 or f.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, d) with one label per row")
        if self.noisy is not None and dc.value_of(self.noisy).shape != f.shape:
            raise ValueError("noisy features must parallel the clean ones")

    @property
    def classes(self) -> tuple:
        return tuple(int(c) for c in np.unique(self.labels))


def softmax_loss_from_logits(z, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    return dc.neg(dc.mean(dc.softmax_log_prob(z, labels)))


def softmax_loss(model: Model, x, y):
    """Mean negative log-probability of the true class."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.size == 0:
        raise ValueError("empty batch")
    if np.any(y < 0) or np.any(y >= model.class_count):
        raise ValueError("label out of range")
    return softmax_loss_from_logits(logits(model, features(model, x)), y)


def _hinge_sq_per_class(feats, labels, centroids: Centroids, delta_v):
    labels = np.asarray(labels, dtype=np.int64)
    classes = tuple(int(c) for c in np.unique(labels))
    if not classes:
        raise ValueError("empty batch")
    rows = np.array([centroids.row_of(c) for c in labels])
    m = dc.take(centroids.values, rows)
    dist = dc.norm(dc.sub(m, feats), axis=-1)
    h = dc.hinge(dc.sub(dist, delta_v))
    # mean over classes of the within-class mean
    weights = np.zeros(labels.shape[0])
    for c in classes:
        idx = labels == c
        weights[idx] = 1.0 / (idx.sum() * len(classes))
    return dc.sum_(dc.mul(weights, dc.square(h)))


def compact_loss(batch: ClassBatch, centroids: Centroids, delta_v: float):
    """Squared hinge on distance to the class centroid, slack delta_v."""
    return _hinge_sq_per_class(batch.features, batch.labels, centroids, delta_v)


def noisy_align_loss(batch: ClassBatch, centroids: Centroids, delta_v: float):
    """Compactness of noisy-input features around clean-data centroids."""
    if batch.noisy is None:
        raise ValueError("batch carries no noisy features")
    return _hinge_sq_per_class(batch.noisy, batch.labels, centroids, delta_v)


def margin_terms(head, centroids: Centroids, delta_d: float):
    """Per-class [delta_d + d(m_c, P_ci) sign(z_i - z_c)]_+ maximised over i != c.

    The signed distance d * sign(z_i - z_c) equals -(z_c - z_i)/||W_c - W_i||,
    with sign(0) = +1 so a centroid on the boundary counts as wrong-side.
    Returns a (k,) vector aligned with ``centroids.classes``.
    """
    w = head.weight
    b = head.bias
    wv = dc.value_of(w)
    C = wv.shape[0]
    if len(centroids.classes) < 2 and C < 2:
        raise ValueError("margin loss needs at least two classes")
    terms = []
    for r, c in enumerate(centroids.classes):
        others = np.array([i for i in range(C) if i != c])
        dw = dc.sub(dc.take(w, c), dc.take(w, others))          # (C-1, d)
        db = dc.sub(dc.take(b, c), dc.take(b, others))          # (C-1,)
        wn = dc.norm(dw, axis=-1)
        if np.any(dc.value_of(wn) == 0.0):
            raise DegenerateBoundaryError(f"class {c} shares a head row with another class")
        m = dc.take(centroids.values, r)
        gap = dc.add(dc.matmul(dw, m), db)                      # z_c - z_i
        signed = dc.div(dc.neg(gap), wn)                        # d * sign(z_i - z_c)
        terms.append(dc.reshape(dc.max_(dc.hinge(dc.add(signed, delta_d)), axis=-1), (1,)))
    return dc.concat(terms)


def margin_loss(head, centroids: Centroids, delta_d: float):
    """Mean over present classes of the worst-boundary margin hinge."""
    if len(centroids.classes) == 0:
        raise ValueError("no centroids")
    return dc.mean(margin_terms(head, centroids, delta_d))


def reg_loss(centroids: Centroids):
    """Mean centroid norm."""
    if len(centroids.classes) == 0:
        raise ValueError("no centroids")
    return dc.mean(dc.norm(centroids.values, axis=-1))


@dataclass
class LossBreakdown:
    total: object
    softmax: float
    compact: float
    margin: float
    reg: float
    noisy: float

    def terms(self) -> dict:
        return {"softmax": self.softmax, "compact": self.compact, "margin": self.margin,
                "reg": self.reg, "noisy": self.noisy}

    def value(self) -> float:
        return float(dc.value_of(self.total))


def total_loss(model: Model, batch: ClassBatch, views, config: LossConfig) -> LossBreakdown:
    """L_S + alpha L_compact + beta L_margin + gamma_reg L_reg + lambda L_noisy.

    ``views`` is (compact_view, margin_view). The regulariser uses the
    margin view; the noisy term uses the compact view. Terms with a zero
    weight are skipped, and reported as 0.
    """
    compact_view, margin_view = views
    ls = softmax_loss_from_logits(logits(model, batch.features), batch.labels)
    total = ls
    parts = {"compact": 0.0, "margin": 0.0, "reg": 0.0, "noisy": 0.0}
    weighted = []
    if config.alpha:
        t = compact_loss(batch, compact_view, config.delta_v)
        parts["compact"] = float(dc.value_of(t))
        weighted.append(dc.mul(config.alpha, t))
    if config.beta:
        t = margin_loss(model.head, margin_view, config.delta_d)
        parts["margin"] = float(dc.value_of(t))
        weighted.append(dc.mul(config.beta, t))
    if config.gamma_reg:
        t = reg_loss(margin_view)
        parts["reg"] = float(dc.value_of(t))
        weighted.append(dc.mul(config.gamma_reg, t))
    if config.lam and batch.noisy is not None:
        t = noisy_align_loss(batch, compact_view, config.delta_v)
        parts["noisy"] = float(dc.value_of(t))
        weighted.append(dc.mul(config.lam, t))
    for t in weighted:
        total = dc.add(total, t)
    return LossBreakdown(total, float(dc.value_of(ls)), **parts)
