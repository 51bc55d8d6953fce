"""Numeric verification suites; each returns machine-readable assertions."""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from .. import curvature as cv
from .. import data as D
from .. import diffcore as dc
from .. import theory as th
from ..centroids import CentroidState, Centroids, batch_centroid, momentum_update
from ..losses import ClassBatch, compact_loss, margin_loss, noisy_align_loss, reg_loss, softmax_loss
from ..model import (Layer, Model, SoftmaxHead, boundary_distances, features, init_model, predict,
                     scale_direction, scale_transform)
from . import checkpoint as ckpt

SUITES = ("gradients", "propositions", "curvature-bounds", "generalization", "jsd", "serialization")


def check(name, passed, measured=None, tolerance=None, **extra):
    return {"name": name, "passed": bool(passed), "measured": measured, "tolerance": tolerance, **extra}


def _rel(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(b), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


# ----------------------------------------------------------------- gradients

def _loss_terms(model, x, xn, y, delta_v, delta_d):
    """Scalar loss terms for a bound model; centroids are the batch means."""
    q = features(model, x)
    qn = features(model, xn)
    batch = ClassBatch(q, y, qn)
    cents = batch_centroid(batch)
    return {
        "softmax": softmax_loss(model, x, y),
        "compact": compact_loss(batch, cents, delta_v),
        "margin": margin_loss(model.head, cents, delta_d),
        "reg": reg_loss(cents),
        "noisy": noisy_align_loss(batch, cents, delta_v),
    }


def gradient_errors(rng, step=1e-5):
    """Max relative error between reverse-mode and central differences, per term."""
    d_in, hidden, d, C = 3, int(rng.integers(3, 6)), int(rng.integers(2, 4)), 3
    model = init_model([d_in, hidden, d], C, seed=int(rng.integers(2 ** 31)),
                       activations=["relu", str(rng.choice(["relu", "none"]))])
    n = 9
    x = rng.standard_normal((n, d_in))
    xn = x + 0.3 * rng.standard_normal((n, d_in))
    y = np.arange(n) % C
    delta_v = float(rng.uniform(0.01, 0.3))
    delta_d = float(rng.uniform(0.5, 3.0))
    shapes = [np.shape(p) for p in model.parameters()]
    sizes = [int(np.prod(s)) for s in shapes]
    flat0 = model.flat_parameters()

    def unflat(v):
        out, k = [], 0
        for s, m in zip(shapes, sizes):
            out.append(v[k:k + m].reshape(s))
            k += m
        return out

    errors = {}
    tape = dc.Tape()
    bound = model.with_parameters([tape.leaf(p) for p in model.parameters()])
    xv = tape.leaf(x)
    terms = _loss_terms(bound, xv, xn, y, delta_v, delta_d)
    for name, t in terms.items():
        g = dc.backward(tape, t)
        analytic = np.concatenate([g[p].ravel() for p in bound.parameters()] + [g[xv].ravel()])

        def fn(v, name=name):
            m = model.with_parameters(unflat(v[:flat0.size]))
            return float(_loss_terms(m, v[flat0.size:].reshape(x.shape), xn, y, delta_v, delta_d)[name])

        numeric = dc.finite_difference_gradient(fn, np.concatenate([flat0, x.ravel()]), step)
        errors[name] = _rel(analytic, numeric)
    return errors


def suite_gradients(seed=0, instances=100):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(instances):
        for k, v in gradient_errors(rng).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return [check(f"fd-agreement/{k}", v <= 1e-5, v, 1e-5, instances=instances) for k, v in worst.items()]


# -------------------------------------------------------------- propositions

def _min_distance(head, cents):
    return min(float(np.min(boundary_distances(head, cents[c], c))) for c in range(cents.shape[0]))


def _momentum_scene(rng, gamma, active):
    """Backbone gradients of the margin loss under momentum and batch centroids.

    Returns (momentum gradient, (1 - gamma) x batch gradient, margin loss).
    The inactive regime uses a nearest-centroid head, which puts every class
    mean on its own side of each boundary, with delta_d at half the smallest
    distance.
    """
    d_in, d, C, n = 4, 3, 3, 12
    model = init_model([d_in, 6, d], C, seed=int(rng.integers(2 ** 31)), activations=["relu", "none"])
    x = rng.standard_normal((n, d_in))
    y = np.arange(n) % C
    if not active:
        means = np.array([features(model, x[y == c]).mean(0) for c in range(C)])
        model = model.with_parameters(model.parameters()[:-2] + [means, -0.5 * np.sum(means ** 2, 1)])
    tape = dc.Tape()
    params = [tape.leaf(p) for p in model.parameters()[:-2]]
    head = model.head  # held fixed: gradients are taken w.r.t. the backbone only
    bound = model.with_parameters(params + [head.weight, head.bias])
    cur = batch_centroid(ClassBatch(features(bound, x), y))
    plain = Centroids(cur.classes, cur.array())
    delta_d = 50.0 if active else 0.5 * _min_distance(head, plain.array())
    state = CentroidState(gamma, "momentum")
    state.previous = {c: v + 1e-4 * rng.standard_normal(v.shape) for c, v in plain.as_dict().items()}
    mom = momentum_update(state, cur)
    g_naive = dc.backward(tape, margin_loss(head, cur, delta_d))
    g_mom = dc.backward(tape, margin_loss(head, mom, delta_d))
    a = np.concatenate([g_mom[p].ravel() for p in params])
    b = (1.0 - gamma) * np.concatenate([g_naive[p].ravel() for p in params])
    return a, b, float(margin_loss(head, plain, delta_d))


def momentum_gradient_errors(seed=0, trials=20):
    rng = np.random.default_rng(seed)
    out = {}
    for gamma in (0.0, 0.5, 0.9):
        for active in (True, False):
            worst, losses = 0.0, []
            for _ in range(trials):
                a, b, loss = _momentum_scene(rng, gamma, active)
                denom = np.maximum(np.abs(b), 1e-300)
                err = np.where((a == 0) & (b == 0), 0.0, np.abs(a - b) / denom)
                worst = max(worst, float(err.max(initial=0.0)))
                losses.append(loss)
            out[(gamma, active)] = (worst, float(np.max(losses)))
    return out


def random_scene(rng):
    """Constructive scene with zero compactness and margin losses.

    Centroids are spread so that a nearest-centroid head puts each one at
    least delta_d from every boundary; features are uniform in the
    delta_v-ball around their centroid.
    """
    C = int(rng.integers(2, 6))
    d = int(rng.integers(2, 6))
    delta_v = float(rng.uniform(0.1, 1.0))
    delta_d = float(delta_v * rng.uniform(1.05, 4.0))
    while True:
        cents = rng.standard_normal((C, d)) * rng.uniform(1, 5) * delta_d
        diffs = [np.linalg.norm(cents[i] - cents[j]) for i in range(C) for j in range(i + 1, C)]
        if min(diffs) / 2 >= delta_d:
            break
    head = SoftmaxHead(cents.copy(), -0.5 * np.sum(cents ** 2, 1))
    feats = {}
    for c in range(C):
        n = int(rng.integers(1, 30))
        u = rng.standard_normal((n, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = delta_v * rng.uniform(0, 1, n) ** (1.0 / d)
        feats[c] = cents[c] + u * r[:, None]
    return head, feats, {c: cents[c] for c in range(C)}, delta_v, delta_d


def scene_violations(seed=0, scenes=1000):
    rng = np.random.default_rng(seed)
    v2 = v3a = v3b = 0
    applicable = 0
    for _ in range(scenes):
        head, feats, cents, dv, dd = random_scene(rng)
        p2 = th.dispersion_check(feats, cents, dv)
        p3 = th.margin_separation_check(head, feats, cents, dv, dd)
        applicable += p2["applicable"] and p3["applicable"]
        v2 += p2["holds"] is False
        v3a += p3["margin_holds"] is False
        v3b += p3["separation_holds"] is False
    return {"scenes": scenes, "applicable": applicable, "dispersion_violations": v2,
            "margin_violations": v3a, "separation_violations": v3b}


def transform_report(model: Model, x, labels, nu):
    """Prediction agreement and margin/dispersion ratios under the rescaling map."""
    new = scale_transform(model, nu)
    agree = float(np.mean(predict(new, x) == predict(model, x)))
    by0 = th.group_by_class(features(model, x), labels)
    by1 = th.group_by_class(features(new, x), labels)
    m0 = min(th.class_margin_from_features(model.head, by0).values())
    m1 = min(th.class_margin_from_features(new.head, by1).values())
    d0 = max(th.class_dispersion(by0).values())
    d1 = max(th.class_dispersion(by1).values())
    return new, {"nu": nu, "agreement": agree, "margin_ratio": m1 / m0, "dispersion_ratio": d1 / d0}


def antiparallel_cosine(model: Model):
    theta = model.flat_parameters()
    a = scale_transform(model, 2.0).flat_parameters() - theta
    b = scale_transform(model, 0.5).flat_parameters() - theta
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def toy_model(seed=0, epochs=30):
    """Small classifier trained briefly on blobs, for rescaling checks."""
    from .config import default
    from .train import train
    cfg = default(seed=seed, train__method="normal", train__epochs=epochs, train__lr=0.01,
                  data__n_per_class=50)
    ds = D.gen_blobs(4, 50, 8, 1.0, seed)
    return train(cfg, ds).model, ds


def suite_propositions(seed=0):
    out = []
    for (gamma, active), (err, loss) in momentum_gradient_errors(seed).items():
        regime = "active" if active else "inactive"
        ok = err <= 1e-9 and ((loss > 0) if active else (loss == 0))
        out.append(check(f"momentum-gradient/gamma={gamma}/{regime}", ok, err, 1e-9, margin_loss=loss))
    sv = scene_violations(seed)
    for k in ("dispersion_violations", "margin_violations", "separation_violations"):
        out.append(check(f"scenes/{k}", sv[k] == 0 and sv["applicable"] == sv["scenes"], sv[k], 0,
                         scenes=sv["scenes"], applicable=sv["applicable"]))
    model, ds = toy_model(seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1000, model.input_dim)) * 2.0
    for nu in (0.2, 1.0, 5.0):
        _, rep = transform_report(model, ds.flat(), ds.labels, nu)
        agree = float(np.mean(predict(scale_transform(model, nu), x) == predict(model, x)))
        out.append(check(f"rescale/nu={nu}/agreement", agree == 1.0, agree, 0.0))
        out.append(check(f"rescale/nu={nu}/margin-ratio", abs(rep["margin_ratio"] - nu) <= 1e-9 * nu,
                         rep["margin_ratio"], 1e-9))
        out.append(check(f"rescale/nu={nu}/dispersion-ratio", abs(rep["dispersion_ratio"] - nu) <= 1e-9 * nu,
                         rep["dispersion_ratio"], 1e-9))
    cos = antiparallel_cosine(model)
    out.append(check("rescale/antiparallel", abs(cos + 1.0) <= 1e-12, cos, 1e-12))
    u = scale_direction(model)
    diff = scale_transform(model, 3.0).flat_parameters() - model.flat_parameters()
    out.append(check("rescale/fixed-direction", _rel(diff, 2.0 * u) <= 1e-12, _rel(diff, 2.0 * u), 1e-12))
    return out


# ---------------------------------------------------------- curvature bounds

def quadratic_bound_counts(seed=0, instances=100, n=500):
    rng = np.random.default_rng(seed)
    up = lo = 0
    positive_lower = 0
    for i in range(instances):
        dim = int(rng.integers(2, 9))
        sigma = float(rng.uniform(0.1, 1.0))
        hook = cv.quadratic_instance(dim, sigma, rng, curvature_scale=float(rng.uniform(0.1, 3.0)),
                                     grad_scale=float(rng.choice([1.0, 0.05, 0.0])),
                                     feature_scale=float(rng.uniform(0.5, 2.0)))
        delta = hook.feature_scale * sigma * np.sqrt(dim) * float(rng.uniform(0.5, 1.5))
        rep = cv.theorem1_check(hook, np.zeros(dim), 0, sigma, delta, n=n, rng=rng)
        up += rep.upper_holds
        lo += rep.lower_holds
        positive_lower += rep.lower_rhs > 0
    return {"instances": instances, "upper": up, "lower": lo, "nontrivial_lower": positive_lower}


def noise_moments(seed=0, n=100_000, dim=5, sigma=0.7):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((dim, dim))
    H = 0.5 * (B + B.T)
    return cv.moment_check(H, sigma, n, rng)


def suite_curvature_bounds(seed=0):
    out = []
    qc = quadratic_bound_counts(seed)
    out.append(check("curvature-bound/upper", qc["upper"] == qc["instances"], qc["upper"], qc["instances"]))
    out.append(check("curvature-bound/lower", qc["lower"] == qc["instances"], qc["lower"], qc["instances"],
                     nontrivial=qc["nontrivial_lower"]))
    m = noise_moments(seed)
    z = abs(m["sq_mean"] - m["sq_target"]) / m["sq_se"]
    out.append(check("moments/fourth-moment", z <= 3.0, z, 3.0))
    zv = float(np.max(np.abs(m["vec_mean"]) / m["vec_se"]))
    out.append(check("moments/odd-moment", zv <= 4.0, zv, 4.0))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        B = rng.standard_normal((8, 8))
        H = B + B.T
        worst = max(worst, abs(cv.eig_sums(H)[0] - np.sum(H * H)) / np.sum(H * H))
    out.append(check("eig-sums/frobenius", worst <= 1e-10, worst, 1e-10))
    hook = cv.QuadraticHook(np.diag([1.0, 2.0]))
    est = cv.curvature_estimate(hook, np.zeros(2), 0, 1e-2, 2000, np.random.default_rng(seed))
    # per-draw value is e^T A^2 e; its variance is 2 tr(A^4) for Gaussian e
    se = math.sqrt(2 * (1 + 16) / 2000)
    out.append(check("estimator/quadratic", abs(est - 5.0) <= 3 * se, est, 3 * se))
    return out


# ------------------------------------------------------------ generalization

def bound_holdout_scene(seed, n_per_class=30, quantile=0.9, rho_frac=0.5, delta=0.05):
    """Train a tiny model, fit a class hypersphere, compare the bound to a 10x holdout."""
    from .config import default
    from .train import train
    cfg = default(seed=seed, train__method="normal", train__epochs=15, train__lr=0.01)
    tr = D.gen_blobs(3, n_per_class, 4, 1.0, seed)
    hold = D.gen_blobs(3, 10 * n_per_class, 4, 1.0, seed + 10_000)
    model = train(cfg, tr).model
    q = features(model, tr.flat())
    c = int(seed % 3)
    qc = q[tr.labels == c]
    m = qc.mean(axis=0)
    r = float(np.quantile(np.linalg.norm(qc - m, axis=1), quantile)) + 1e-9
    rho = rho_frac * r * r
    risk = th.empirical_margin_risk(None, m, qc, r, rho)
    lam = float(np.max(np.linalg.norm(q, axis=1)))
    R = float(np.linalg.norm(m))
    slack = th.generalization_bound(lam, max(R, 1e-12), len(qc), rho, delta)
    qh = features(model, hold.flat())[hold.labels == c]
    err = float(np.mean(th.sphere_score(qh, m, r) < 0))
    return {"risk": risk, "slack": slack, "holdout_error": err, "holds": risk + slack >= err}


def suite_generalization(seed=0, scenes=50):
    out = []
    slack = th.generalization_bound(1.0, 1.0, 10_000, 0.5, 0.05)
    ref = 4.0 * (1 + 2 + 0.01) + 3.0 * math.sqrt(math.log(40.0) / 20_000)
    out.append(check("margin-bound/slack-value", abs(slack - ref) <= 1e-9, slack, 1e-9, reference=ref))
    lim = th.generalization_bound(1.0, 1.0, 1e12, 0.5, 0.05)
    out.append(check("margin-bound/large-N", abs(lim - 12.0) <= 1e-4, lim, 1e-4))
    a = th.generalization_bound(1.0, 1.0, 1e4, 0.5, 0.05) - 3 * math.sqrt(math.log(40) / 2e4)
    b = th.generalization_bound(1.0, 1.0, 1e4, 1.0, 0.05) - 3 * math.sqrt(math.log(40) / 2e4)
    out.append(check("margin-bound/rho-doubling", abs(a - 2 * b) <= 1e-12, a / b, 1e-12))
    held = sum(bound_holdout_scene(seed * 1000 + s)["holds"] for s in range(scenes))
    out.append(check("margin-bound/holdout-scenes", held == scenes, held, scenes))
    return out


# --------------------------------------------------------------------- JSD

def separated_scene(seed=0, n=200):
    """Identity backbone on tight clusters far apart: class JSD is close to ln 2."""
    rng = np.random.default_rng(seed)
    means = D.simplex_means(3, 4, 10.0)
    labels = np.repeat(np.arange(3), n)
    x = means[labels] + 0.05 * rng.standard_normal((3 * n, 4))
    model = Model([Layer(np.eye(4), np.zeros(4), "none")], SoftmaxHead(means, np.zeros(3)))
    cents = {c: x[labels == c].mean(0) for c in range(3)}
    return th.layer_divergence_check(model, x, labels, cents, 0.5, 1, seed=seed)


def suite_jsd(seed=0):
    out = []
    edges = (np.linspace(0, 1, 3),)
    P = th.Histogram(edges, np.array([3.0, 1.0]))
    Q = th.Histogram(edges, np.array([1.0, 3.0]))
    out.append(check("jsd/identical", th.jsd_histogram(P, P) == 0.0, th.jsd_histogram(P, P), 0.0))
    dis = th.jsd_histogram(th.Histogram(edges, np.array([1.0, 0.0])), th.Histogram(edges, np.array([0.0, 1.0])))
    out.append(check("jsd/disjoint", abs(dis - math.log(2)) <= 1e-12, dis, 1e-12))
    p, q = np.array([0.75, 0.25]), np.array([0.25, 0.75])
    m = (p + q) / 2
    ref = 0.5 * sum(p * np.log(p / m)) + 0.5 * sum(q * np.log(q / m))
    out.append(check("jsd/two-bin", abs(th.jsd_histogram(P, Q) - ref) <= 1e-12, th.jsd_histogram(P, Q), 1e-12))
    out.append(check("jsd/symmetric", th.jsd_histogram(P, Q) == th.jsd_histogram(Q, P), None, 0.0))
    rep = separated_scene(seed)
    out.append(check("divergence/separated", rep["holds"] and rep["min_jsd"] >= 0.5, rep["min_jsd"], 0.5,
                     tau=rep["tau"]))
    return out


# ----------------------------------------------------------- serialization

def suite_serialization(seed=0):
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "d.rnl")
        for name, ds in (("blobs", D.gen_blobs(3, 10, 4, 1.0, seed)), ("rings", D.gen_rings(3, 10, seed)),
                         ("textures", D.gen_textures(3, 5, 8, 8, seed, channels=2))):
            D.save(ds, path)
            out.append(check(f"roundtrip/{name}", D.load(path).equals(ds)))
        raw = open(path, "rb").read()
        for label, blob, err in (("magic", b"XXXX" + raw[4:], D.MagicError),
                                 ("header", raw[:4] + (7).to_bytes(4, "little") + raw[8:], D.HeaderError),
                                 ("length", raw[:-3], D.LengthError)):
            with open(path, "wb") as fh:
                fh.write(blob)
            try:
                D.load(path)
                got = None
            except D.DataFormatError as exc:
                got = type(exc)
            out.append(check(f"error/{label}", got is err, getattr(got, "code", None), err.code))
        model = init_model([4, 5, 3], 3, seed=seed)
        p1 = os.path.join(tmp, "c.json")
        text = ckpt.save(p1, model, centroids={0: np.array([0.1, 1 / 3, 2.0])}, seed=seed)
        m2, _, cents, _ = ckpt.load(p1)
        out.append(check("checkpoint/roundtrip",
                         ckpt.dumps(ckpt.to_dict(m2, centroids=cents, seed=seed)) == text))
    return out


def run_suite(name, seed=0):
    fn = {"gradients": suite_gradients, "propositions": suite_propositions,
          "curvature-bounds": suite_curvature_bounds, "generalization": suite_generalization,
          "jsd": suite_jsd, "serialization": suite_serialization}.get(name)
    if fn is None:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    checks = fn(seed)
    return {"suite": name, "seed": seed, "passed": all(c["passed"] for c in checks), "checks": checks}
