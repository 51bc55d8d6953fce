"""Training loops for the baselines and the centroid-loss method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import data as D
from .. import diffcore as dc
from .. import perturb
from ..centroids import CentroidState, centroid_views
from ..losses import ClassBatch, LossConfig, compact_loss, margin_loss, softmax_loss_from_logits, total_loss
from ..centroids import Centroids
from ..model import Model, features, init_model, logits
from .config import ExperimentConfig

# stream tags, so shuffles and noise never share a generator
TAG_SPLIT, TAG_SHUFFLE, TAG_NOISE = 0, 1, 2


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch, batch, terms):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {terms}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainResult:
    model: Model
    centroids: dict
    loss_config: LossConfig
    log: list = field(default_factory=list)
    final: dict = field(default_factory=dict)


def build_dataset(cfg: ExperimentConfig) -> D.Dataset:
    v = cfg.values
    gen = v["data.generator"]
    if gen == "blobs":
        return D.gen_blobs(v["data.classes"], v["data.n_per_class"], v["data.dim"], v["data.spread"], cfg.seed)
    if gen == "rings":
        return D.gen_rings(v["data.classes"], v["data.n_per_class"], cfg.seed)
    if gen == "textures":
        return D.gen_textures(v["data.classes"], v["data.n_per_class"], v["data.height"], v["data.width"],
                              cfg.seed, v["data.channels"], v["data.jitter"], v["data.shift"])
    return D.load(v["data.path"])


def split(cfg: ExperimentConfig, ds: D.Dataset):
    """(train, test) stratified split."""
    return D.stratified_split(ds, 1.0 - cfg["data.test_ratio"], cfg.seed)


def lr_at(epoch, cfg: ExperimentConfig) -> float:
    total = cfg["train.epochs"]
    drops = sum(epoch >= round(m * total) for m in cfg["train.milestones"])
    return cfg["train.lr"] * cfg["train.lr_decay"] ** drops


def initial_model(cfg: ExperimentConfig, input_dim, class_count) -> Model:
    dims = [input_dim, *cfg["model.hidden"]]
    acts = list(cfg["model.activations"]) or None
    return init_model(dims, class_count, seed=cfg.seed, activations=acts)


def _method_loss(method, bound, x, xn, y, state, lc, stab_w):
    if method == "normal":
        ls = softmax_loss_from_logits(logits(bound, features(bound, x)), y)
        return ls, {"softmax": float(ls.value)}
    if method == "noisy_only":
        ls = softmax_loss_from_logits(logits(bound, features(bound, xn)), y)
        return ls, {"softmax": float(ls.value)}
    if method == "clean_plus_noisy":
        both = np.concatenate([x, xn])
        ls = softmax_loss_from_logits(logits(bound, features(bound, both)), np.concatenate([y, y]))
        return ls, {"softmax": float(ls.value)}
    if method == "stability":
        q = features(bound, x)
        qn = features(bound, xn)
        ls = softmax_loss_from_logits(logits(bound, q), y)
        st = dc.mean(dc.norm(dc.sub(q, qn), axis=-1))
        return dc.add(ls, dc.mul(stab_w, st)), {"softmax": float(ls.value), "stability": float(st.value)}
    # ours: clean and noisy passes through the same parameters
    q = features(bound, x)
    qn = features(bound, xn) if xn is not None else None
    batch = ClassBatch(q, y, qn)
    br = total_loss(bound, batch, centroid_views(state, batch), lc)
    return br.total, br.terms()


def train(cfg: ExperimentConfig, train_ds: D.Dataset, model: Model = None) -> TrainResult:
    """SGD with momentum, weight decay and step learning-rate decay."""
    method = cfg.method
    lc = cfg.loss_config()
    model = (model or initial_model(cfg, train_ds.input_dim, train_ds.class_count)).detach()
    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    state = CentroidState(cfg["train.centroid_gamma"], cfg["train.centroid_mode"])
    X = train_ds.flat()
    Y = train_ds.labels
    n = len(Y)
    bs = cfg["train.batch_size"]
    mom, wd = cfg["train.momentum"], cfg["train.weight_decay"]
    noise = cfg.noise
    log = []
    for epoch in range(cfg["train.epochs"]):
        lr = lr_at(epoch, cfg)
        order = perturb.stream(cfg.seed, TAG_SHUFFLE, epoch).permutation(n)
        sums, batches = {}, 0
        for b, start in enumerate(range(0, n, bs)):
            rows = order[start:start + bs]
            x, y = X[rows], Y[rows]
            xn = None
            if noise is not None and method != "normal":
                rng = perturb.stream(cfg.seed, TAG_NOISE, epoch, b)
                xn = perturb.apply_batch(noise, train_ds.x[rows], rng).reshape(len(rows), -1)
            tape = dc.Tape()
            bound = model.with_parameters([tape.leaf(p) for p in params])
            loss, terms = _method_loss(method, bound, x, xn, y, state, lc, cfg["train.stability_weight"])
            value = float(loss.value)
            terms["total"] = value
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, terms)
            grads = dc.backward(tape, loss)
            for i, leaf in enumerate(bound.parameters()):
                g = grads[leaf] + wd * params[i]
                velocity[i] = mom * velocity[i] + g
                params[i] = params[i] - lr * velocity[i]
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        model = model.with_parameters(params)
        log.append({"epoch": epoch, "lr": lr, **{k: v / batches for k, v in sums.items()}})
    model = model.with_parameters(params)
    cents = final_centroids(model, train_ds)
    if method == "ours" and state.previous:
        cents = {**cents, **{c: np.array(v) for c, v in state.previous.items()}}
    res = TrainResult(model, cents, lc, log)
    res.final = hinge_summary(model, train_ds, lc)
    return res


def final_centroids(model: Model, ds: D.Dataset) -> dict:
    q = features(model, ds.flat())
    return {int(c): q[ds.labels == c].mean(axis=0) for c in np.unique(ds.labels)}


def hinge_summary(model: Model, ds: D.Dataset, lc: LossConfig) -> dict:
    """Compactness and margin losses over the whole set with its class-mean centroids."""
    q = features(model, ds.flat())
    cents = final_centroids(model, ds)
    c = Centroids.from_dict(cents)
    batch = ClassBatch(q, ds.labels)
    return {"compact": float(compact_loss(batch, c, lc.delta_v)),
            "margin": float(margin_loss(model.head, c, lc.delta_d))}
