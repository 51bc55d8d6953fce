"""Shared fixtures-by-function for the test modules."""

import functools

import numpy as np

from noisecurve import data as D
from noisecurve.harness import config as C
from noisecurve.harness import train as T


def naive_forward(model, x):
    """Layer-by-layer evaluation with explicit Python loops as an oracle."""
    h = [list(map(float, row)) for row in np.atleast_2d(x)]
    outs = []
    for layer in model.layers:
        W, b = np.asarray(layer.weight), np.asarray(layer.bias)
        new = []
        for row in h:
            vals = []
            for o in range(W.shape[0]):
                s = float(b[o])
                for i, v in enumerate(row):
                    s += float(W[o, i]) * v
                vals.append(max(s, 0.0) if layer.activation == "relu" else s)
            new.append(vals)
        h = new
        outs.append(np.array(h))
    return outs


@functools.lru_cache(maxsize=None)
def trained_blobs_model(seed=0, epochs=30):
    cfg = C.default(seed=seed, train__method="normal", train__epochs=epochs, train__lr=0.01)
    ds = D.gen_blobs(4, 50, 8, 1.0, seed)
    return T.train(cfg, ds).model, ds
