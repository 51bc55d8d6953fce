"""Accuracy under perturbations, and per-sample curvature reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .. import perturb
from ..curvature import curvature_estimates, exact_hessian, eig_sums, HESSIAN_DIM_CAP
from ..data import Dataset
from ..losses import softmax_loss_from_logits
from ..model import Model, features, logits, predict

# eval streams are keyed (seed, TAG_EVAL, perturbation index, repeat, sample index)
TAG_EVAL, TAG_CURVE_NOISE, TAG_CURVE_DIRS = 10, 11, 12

METRIC_FIELDS = ["run_id", "method", "perturbation", "repeat", "accuracy", "loss_softmax", "seed"]


@dataclass
class MetricsRecord:
    run_id: str
    method: str
    perturbation: str
    repeat: int
    accuracy: float
    loss_softmax: float
    seed: int

    def row(self):
        return [self.run_id, self.method, self.perturbation, str(self.repeat),
                fmt(self.accuracy), fmt(self.loss_softmax), str(self.seed)]


def fmt(v) -> str:
    """17 significant digits, so a float survives a text round trip."""
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "nan"
    return format(float(v), ".17g")


def accuracy(model: Model, x, labels) -> float:
    return float(np.mean(predict(model, np.asarray(x).reshape(len(labels), -1)) == labels))


def evaluate(model: Model, test: Dataset, specs, repeats, seed, run_id="run", method="", clamp=None):
    """One record per (perturbation, repeat); clean accuracy always comes first."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if test.input_dim != model.input_dim:
        raise ValueError(f"dataset dimension {test.input_dim} != model input {model.input_dim}")
    specs = [perturb.Gaussian(0.0)] + [s for s in specs]
    out = []
    for p, spec in enumerate(specs):
        name = "clean" if p == 0 else perturb.label(spec)
        for r in range(repeats):
            x = perturb.noised_samples(test.x, spec, seed, test.index, clamp, key=(TAG_EVAL, p, r))
            flat = x.reshape(len(test), -1)
            z = logits(model, features(model, flat))
            acc = float(np.mean(np.argmax(z, axis=1) == test.labels))
            loss = float(softmax_loss_from_logits(z, test.labels))
            out.append(MetricsRecord(run_id, method, name, r, acc, loss, int(seed)))
    return out


def summarize(records) -> list:
    """Mean and std of accuracy per perturbation, in first-seen order."""
    groups = {}
    for rec in records:
        groups.setdefault((rec.method, rec.perturbation), []).append(rec.accuracy)
    return [{"method": m, "perturbation": p, "mean": float(np.mean(a)), "std": float(np.std(a)),
             "repeats": len(a)} for (m, p), a in groups.items()]


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for rec in records:
        w.writerow(rec.row())
    return buf.getvalue()


# ---------------------------------------------------------------- curvature

def pearson(a, b):
    """Pearson coefficient, or None when either side is constant or too short."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def curvature_report(model: Model, test: Dataset, sigma, repeats=10, t=1e-2, K=20, seed=0,
                     exact=False, grid=None):
    """Per-sample curvature with noisy-correctness counts, plus aggregates.

    Returns ``(rows, summary)``: rows carry index, label, curvature, the
    number k of correct predictions over ``repeats`` Gaussian draws and
    clean correctness; the summary carries the retained-accuracy curve, the
    groups G(k) with their mean curvature, the Pearson coefficient over
    (k, mean curvature), and quartiles of the lowest-90% curvatures.
    """
    flat = test.flat()
    lam = curvature_estimates(model, flat, test.labels, t, K, seed=hash_key(seed, TAG_CURVE_DIRS))
    correct = np.zeros(len(test), dtype=np.int64)
    for r in range(repeats):
        noisy = perturb.noised_samples(test.x, perturb.Gaussian(sigma), seed, test.index,
                                       key=(TAG_CURVE_NOISE, r)).reshape(len(test), -1)
        correct += predict(model, noisy) == test.labels
    clean = predict(model, flat) == test.labels
    rows = []
    for i in range(len(test)):
        row = {"index": int(test.index[i]), "label": int(test.labels[i]), "curvature": float(lam[i]),
               "correct_count": int(correct[i]), "clean_correct": int(clean[i])}
        if exact and flat.shape[1] <= HESSIAN_DIM_CAP:
            row["sum_sq_eigs"] = eig_sums(exact_hessian(model, flat[i], test.labels[i]))[0]
        rows.append(row)
    return rows, curvature_summary(lam, correct, repeats, grid)


def hash_key(seed, tag):
    # derive a single integer seed for curvature_estimates' per-sample streams
    return int(perturb.stream(seed, tag).integers(0, 2 ** 62))


def curvature_summary(lam, correct, repeats, grid=None) -> dict:
    lam = np.asarray(lam, dtype=np.float64)
    frac = np.asarray(correct, dtype=np.float64) / repeats
    grid = grid or [round(0.1 * i, 1) for i in range(1, 11)]
    order = np.argsort(lam, kind="stable")
    curve = []
    for p in grid:
        keep = order[:max(1, int(round(p * lam.size)))]
        curve.append({"p": p, "accuracy": float(frac[keep].mean())})
    groups = []
    for k in range(repeats + 1):
        sel = correct == k
        if sel.any():
            groups.append({"k": k, "count": int(sel.sum()), "mean_curvature": float(lam[sel].mean())})
    r = pearson([g["k"] for g in groups], [g["mean_curvature"] for g in groups])
    low = np.sort(lam)[:max(1, int(round(0.9 * lam.size)))]
    q1, med, q3 = np.percentile(low, [25, 50, 75])
    return {"retained_accuracy": curve, "groups": groups, "pearson": r, "pearson_defined": r is not None,
            "low90": {"q1": float(q1), "median": float(med), "q3": float(q3)},
            "mean_curvature": float(lam.mean())}


def curvature_csv(rows) -> str:
    if not rows:
        return ""
    keys = list(rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in rows:
        w.writerow([fmt(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
    return buf.getvalue()
