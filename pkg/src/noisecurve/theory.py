"""Feature-space geometry (dispersion, margin), the compactness/margin
guarantees, the ramp margin loss and generalization slack, the in-ball mass
tau, and histogram Jensen-Shannon divergence between class features."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Model, boundary_distances, features, features_at_layer


def group_by_class(feats, labels) -> dict:
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    return {int(c): feats[labels == c] for c in np.unique(labels)}


def _pairwise_exact(a, b):
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def class_dispersion(features_by_class: dict) -> dict:
    """Largest pairwise distance inside each class (0 for a singleton)."""
    out = {}
    for c, q in features_by_class.items():
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if q.shape[0] == 0:
            raise ValueError(f"class {c} is empty")
        out[c] = float(_pairwise_exact(q, q).max()) if q.shape[0] > 1 else 0.0
    return out


def class_margin_from_features(head, features_by_class: dict) -> dict:
    """Smallest distance from a class's features to any of its boundaries."""
    return {c: float(boundary_distances(head, q, c).min()) for c, q in features_by_class.items()}


def class_margin(model: Model, x, labels) -> dict:
    return class_margin_from_features(model.head, group_by_class(features(model, x), labels))


def _compact_zero(features_by_class, centroids, delta_v):
    worst = 0.0
    for c, q in features_by_class.items():
        d = np.linalg.norm(np.asarray(q) - np.asarray(centroids[c]), axis=1)
        worst = max(worst, float(np.max(d - delta_v, initial=0.0)))
    return worst == 0.0, worst


def dispersion_check(features_by_class: dict, centroids: dict, delta_v: float) -> dict:
    """Zero compactness loss implies every class dispersion is at most 2 delta_v."""
    zero, _ = _compact_zero(features_by_class, centroids, delta_v)
    disp = max(class_dispersion(features_by_class).values())
    if not zero:
        return {"applicable": False, "holds": None, "max_dispersion": disp, "bound": 2 * delta_v}
    return {"applicable": True, "holds": bool(disp <= 2 * delta_v), "max_dispersion": disp,
            "bound": 2 * delta_v}


def _margin_zero(head, centroids, delta_d):
    """True when every centroid is on its own side and delta_d from every boundary."""
    w = np.asarray(head.weight)
    b = np.asarray(head.bias)
    for c, m in centroids.items():
        z = w @ np.asarray(m) + b
        others = [i for i in range(len(b)) if i != c]
        if np.any(z[others] >= z[c]):
            return False
        if np.min(boundary_distances(head, m, c)) < delta_d:
            return False
    return True


def margin_separation_check(head, features_by_class: dict, centroids: dict, delta_v: float, delta_d: float) -> dict:
    """Zero compactness and margin losses imply margin >= delta_d - delta_v, and,
    when delta_d > 2 delta_v, intra-class distances below inter-class ones."""
    zero_c, _ = _compact_zero(features_by_class, centroids, delta_v)
    zero_m = _margin_zero(head, centroids, delta_d)
    out = {"applicable": bool(zero_c and zero_m), "margin_holds": None, "separation_holds": None}
    margins = class_margin_from_features(head, features_by_class)
    out["min_margin"] = min(margins.values())
    out["margin_bound"] = delta_d - delta_v
    if not out["applicable"]:
        return out
    if delta_d > delta_v:
        out["margin_holds"] = bool(out["min_margin"] >= delta_d - delta_v)
    if delta_d > 2 * delta_v:
        intra = max(class_dispersion(features_by_class).values())
        classes = sorted(features_by_class)
        inter = min(_pairwise_exact(features_by_class[a], features_by_class[b]).min()
                    for i, a in enumerate(classes) for b in classes[i + 1:])
        out["max_intra"] = intra
        out["min_inter"] = float(inter)
        out["separation_holds"] = bool(intra < inter)
    return out


@dataclass
class GeometryReport:
    dispersion: dict
    margin: dict
    min_margin: float
    max_dispersion: float
    dispersion_check: dict = field(default_factory=dict)
    margin_check: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["dispersion"] = {str(k): v for k, v in self.dispersion.items()}
        d["margin"] = {str(k): v for k, v in self.margin.items()}
        return d


def geometry_report(model: Model, x, labels, centroids: dict, delta_v, delta_d) -> GeometryReport:
    by = group_by_class(features(model, x), labels)
    disp = class_dispersion(by)
    marg = class_margin_from_features(model.head, by)
    return GeometryReport(disp, marg, min(marg.values()), max(disp.values()),
                          dispersion_check(by, centroids, delta_v),
                          margin_separation_check(model.head, by, centroids, delta_v, delta_d))


# --------------------------------------------------------- generalization

def phi_rho(tau, rho):
    """Ramp: 1 for tau <= 0, 1 - tau/rho on [0, rho], 0 beyond."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    tau = np.asarray(tau, dtype=np.float64)
    out = np.clip(1.0 - tau / rho, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def sphere_score(feats, m, r):
    """h(x) = r^2 - ||f(x) - m||^2 for each feature row."""
    q = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    return r * r - np.sum((q - np.asarray(m)) ** 2, axis=1)


def empirical_margin_risk(model, m, samples, r, rho):
    """Mean ramp loss of the hypersphere score; ``model=None`` means samples are features."""
    if not 0 < rho < r * r:
        raise ValueError("need 0 < rho < r^2")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    q = samples if model is None else features(model, samples)
    return float(np.mean(phi_rho(sphere_score(q, m, r), rho)))


def generalization_bound(Lambda, R, N, rho, delta):
    """Additive slack (2/rho)(L^2 + 2RL + R^2/sqrt(N)) + 3 sqrt(ln(2/delta) / (2N))."""
    if min(Lambda, R, N, rho, delta) <= 0 or delta >= 1:
        raise ValueError("arguments must be positive, delta < 1")
    return (2.0 / rho) * (Lambda ** 2 + 2.0 * R * Lambda + R ** 2 / np.sqrt(N)) \
        + 3.0 * np.sqrt(np.log(2.0 / delta) / (2.0 * N))


# ---------------------------------------------------------------- JSD

def tau_estimate(features_by_class: dict, centroids: dict, delta_v: float) -> float:
    """Smallest per-class fraction of features within delta_v of the class centroid."""
    fr = []
    for c, q in features_by_class.items():
        q = np.atleast_2d(q)
        if q.shape[0] == 0:
            raise ValueError(f"class {c} is empty")
        fr.append(float(np.mean(np.linalg.norm(q - np.asarray(centroids[c]), axis=1) <= delta_v)))
    return min(fr)


@dataclass
class Histogram:
    edges: tuple          # one array of bin edges per dimension
    counts: np.ndarray

    @property
    def total(self):
        return float(self.counts.sum())

    def probabilities(self):
        return self.counts / self.total

    @classmethod
    def of(cls, points, edges):
        counts, _ = np.histogramdd(np.asarray(points, dtype=np.float64), bins=list(edges))
        return cls(tuple(np.asarray(e) for e in edges), counts)


def box_edges(points, bins=32):
    """Uniform edges on the bounding box of ``points`` (n, k)."""
    points = np.atleast_2d(points)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    return tuple(np.linspace(l, h, bins + 1) for l, h in zip(lo, hi))


def _kl(p, q):
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd_histogram(P: Histogram, Q: Histogram) -> float:
    """Jensen-Shannon divergence in nats between two histograms on the same bins."""
    if len(P.edges) != len(Q.edges) or any(
            a.shape != b.shape or not np.array_equal(a, b) for a, b in zip(P.edges, Q.edges)):
        raise ValueError("histograms use different binning")
    p = P.probabilities().ravel()
    q = Q.probabilities().ravel()
    m = 0.5 * (p + q)
    return max(0.0, 0.5 * _kl(p, m) + 0.5 * _kl(q, m))


def projection(dim, seed, k=2):
    return np.random.default_rng(seed).standard_normal((dim, k))


def pair_jsd(a, b, seed=0, bins=32):
    """JSD of two feature clouds after a fixed random 2-D projection."""
    proj = projection(a.shape[1], seed)
    pa, pb = a @ proj, b @ proj
    edges = box_edges(np.vstack([pa, pb]), bins)
    return jsd_histogram(Histogram.of(pa, edges), Histogram.of(pb, edges))


def layer_divergence_check(model: Model, x, labels, centroids: dict, delta_v, layer_index,
                   bins=32, seed=0, tolerance=0.02) -> dict:
    """Pairwise class JSD at one layer against the (2 tau - 1)^2 / 2 floor."""
    labels = np.asarray(labels)
    classes = [int(c) for c in np.unique(labels)]
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    tau = tau_estimate(group_by_class(features(model, x), labels), centroids, delta_v)
    floor = (2 * tau - 1) ** 2 / 2
    report = {"tau": tau, "threshold": floor, "layer": layer_index, "applicable": tau >= 0.5, "pairs": []}
    if tau < 0.5:
        report["holds"] = None
        return report
    by = group_by_class(features_at_layer(model, x, layer_index), labels)
    ok = True
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            j = pair_jsd(by[a], by[b], seed, bins)
            passed = j >= floor - tolerance
            ok &= passed
            report["pairs"].append({"classes": [a, b], "jsd": j, "holds": bool(passed)})
    report["holds"] = bool(ok)
    report["min_jsd"] = min(p["jsd"] for p in report["pairs"])
    return report
