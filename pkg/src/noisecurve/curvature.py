"""Input-space loss curvature: gradients, Hessian-vector products, the
finite-difference curvature estimator, an exact-Hessian oracle, and the
stability-based curvature bounds.

Anything exposing ``loss(X)``, ``grad(X)``, ``features(X)``, ``logits(X)``
and ``head_row_norm`` can be analysed; :class:`ModelSurface` wraps a
trained classifier and :class:`QuadraticHook` is an exactly quadratic test
surface.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .model import Model, features, logits

HESSIAN_DIM_CAP = 64


# ----------------------------------------------------------------- surfaces

class ModelSurface:
    """Per-sample softmax loss of ``model`` at label ``y`` as a function of the input."""

    def __init__(self, model: Model, y: int):
        self.model = model.detach()
        self.y = int(y)
        self.head_row_norm = float(np.max(np.linalg.norm(self.model.head.weight, axis=1)))

    @property
    def dim(self):
        return self.model.input_dim

    def _rows(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X.reshape(-1, self.dim), X.ndim == 1

    def loss(self, X):
        rows, single = self._rows(X)
        z = logits(self.model, features(self.model, rows))
        out = -dc.softmax_log_prob(z, np.full(len(rows), self.y))
        return float(out[0]) if single else out

    def grad(self, X):
        """Input gradient of every row in one reverse pass (rows are independent)."""
        rows, single = self._rows(X)
        tape = dc.Tape()
        xv = tape.leaf(rows)
        z = logits(self.model, features(self.model, xv))
        total = dc.neg(dc.sum_(dc.softmax_log_prob(z, np.full(len(rows), self.y))))
        g = dc.backward(tape, total)[xv]
        return g[0] if single else g

    def features(self, X):
        rows, single = self._rows(X)
        q = features(self.model, rows)
        return q[0] if single else q

    def logits(self, X):
        rows, single = self._rows(X)
        z = logits(self.model, features(self.model, rows))
        return z[0] if single else z


class QuadraticHook:
    """l(x) = c + g.(x - x0) + 1/2 (x - x0)^T A (x - x0), exactly.

    Features are ``feature_scale * x`` and the head is ``kappa * [I; -I]``,
    so feature distances, head row norms and logit magnitudes are known in
    closed form.
    """

    def __init__(self, A, g=None, c=0.0, x0=None, feature_scale=1.0, kappa=1.0):
        self.A = np.asarray(A, dtype=np.float64)
        n = self.A.shape[0]
        self.g = np.zeros(n) if g is None else np.asarray(g, dtype=np.float64)
        self.c = float(c)
        self.x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64)
        self.feature_scale = float(feature_scale)
        self.kappa = float(kappa)
        self.head_row_norm = self.kappa

    @property
    def dim(self):
        return self.A.shape[0]

    def loss(self, X):
        D = np.asarray(X, dtype=np.float64) - self.x0
        return self.c + D @ self.g + 0.5 * np.einsum("...i,ij,...j->...", D, self.A, D)

    def grad(self, X):
        D = np.asarray(X, dtype=np.float64) - self.x0
        return self.g + D @ (0.5 * (self.A + self.A.T))

    def features(self, X):
        return self.feature_scale * np.asarray(X, dtype=np.float64)

    def logits(self, X):
        q = self.features(X)
        return self.kappa * np.concatenate([q, -q], axis=-1)


def _surface(model, y):
    return model if not isinstance(model, Model) else ModelSurface(model, y)


# -------------------------------------------------------------- derivatives

def input_gradient(model, x, y):
    """Gradient of the per-sample softmax loss with respect to the input."""
    x = np.asarray(x, dtype=np.float64)
    return _surface(model, y).grad(x.reshape(-1)).reshape(x.shape)


def input_gradients(model: Model, X, Y):
    """Per-row input gradients for a labelled batch (one reverse pass)."""
    X = np.asarray(X, dtype=np.float64)
    rows = X.reshape(len(X), -1)
    tape = dc.Tape()
    xv = tape.leaf(rows)
    z = logits(model.detach(), features(model.detach(), xv))
    total = dc.neg(dc.sum_(dc.softmax_log_prob(z, np.asarray(Y, dtype=np.int64))))
    return dc.backward(tape, total)[xv].reshape(X.shape)


def hvp(model, x, y, v, t):
    """Forward-difference Hessian-vector product (grad(x + t v) - grad(x)) / t."""
    if not t > 0:
        raise ValueError("t must be positive")
    s = _surface(model, y)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    g = s.grad(np.stack([x, x + t * v]))
    out = (g[1] - g[0]) / t
    if not np.all(np.isfinite(out)):
        raise dc.NonFiniteError("non-finite Hessian-vector product")
    return out


def curvature_estimate(model, x, y, t=1e-2, K=20, rng=None, eps=None):
    """(1/K) sum_j ||grad(x + t e_j) - grad(x)||^2 / t^2 with e_j ~ N(0, I).

    ``eps`` may supply the K directions explicitly (rows).
    """
    if not t > 0 or K < 1:
        raise ValueError("need t > 0 and K >= 1")
    s = _surface(model, y)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if eps is None:
        eps = (rng if rng is not None else np.random.default_rng()).standard_normal((K, x.size))
    eps = np.asarray(eps, dtype=np.float64).reshape(K, x.size)
    g = s.grad(np.vstack([x[None, :], x + t * eps]))
    diff = g[1:] - g[0]
    sq = np.sum(diff * diff, axis=1) / (t * t)
    if not np.all(np.isfinite(sq)):
        raise dc.NonFiniteError("non-finite curvature estimate")
    return float(np.mean(sq))


def curvature_estimates(model: Model, X, Y, t=1e-2, K=20, seed=0):
    """Estimator for every row of X; sample i uses the stream keyed by (seed, i)."""
    from .perturb import stream
    out = np.empty(len(X))
    for i, (x, y) in enumerate(zip(X, Y)):
        out[i] = curvature_estimate(model, x, y, t, K, stream(seed, i))
    return out


def exact_hessian(model, x, y, step=1e-4, symmetrize=True):
    """Columns by central differences of the input gradient along each axis."""
    s = _surface(model, y)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    if n > HESSIAN_DIM_CAP:
        raise ValueError(f"input dimension {n} exceeds the exact-Hessian cap {HESSIAN_DIM_CAP}")
    E = np.eye(n) * step
    g = s.grad(np.vstack([x + E, x - E]))
    H = ((g[:n] - g[n:]) / (2.0 * step)).T
    return 0.5 * (H + H.T) if symmetrize else H


def jacobi_eigenvalues(H, tol=1e-12, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    A = np.array(H, dtype=np.float64)
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A))
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.sqrt(np.sum(A[offdiag] ** 2)) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
    else:
        raise ArithmeticError("Jacobi iteration did not converge")
    return np.diag(A).copy()


def eig_sums(H):
    """(sum of squared eigenvalues, sum of absolute eigenvalues, trace)."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("square matrix required")
    if np.max(np.abs(H - H.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(H), initial=0.0)):
        raise ValueError("matrix is not symmetric")
    lam = jacobi_eigenvalues(0.5 * (H + H.T))
    return float(np.sum(lam * lam)), float(np.sum(np.abs(lam))), float(np.sum(lam))


# ----------------------------------------------------------------- stability

@dataclass
class StabilityEstimate:
    eta: float
    l_out: float          # nan when every draw stayed inside the ball
    n_samples: int
    sigma: float
    delta: float
    l_out_defined: bool = True


def _draws(model, x, y, sigma, n, rng):
    s = _surface(model, y)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    X = x + sigma * rng.standard_normal((n, x.size))
    return s, x, X


def _stability_from(s, x, X, sigma, delta):
    shift = np.linalg.norm(s.features(X) - s.features(x), axis=1)
    inside = shift <= delta
    losses = np.asarray(s.loss(X), dtype=np.float64)
    eta = float(np.mean(inside))
    outside = losses[~inside]
    est = StabilityEstimate(eta, float(np.mean(outside)) if outside.size else float("nan"),
                            len(X), float(sigma), float(delta), bool(outside.size))
    return est, losses


def stability_estimates(model, x, y, sigma, delta, n=500, rng=None) -> StabilityEstimate:
    """Monte-Carlo probability that the feature stays within ``delta`` under N(0, sigma^2) noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    s, x, X = _draws(model, x, y, sigma, n, rng)
    return _stability_from(s, x, X, sigma, delta)[0]


@dataclass
class CurvatureReport:
    lambda_estimate: float
    sum_sq_eigs: float
    sum_abs_eigs: float
    trace: float
    eta: float
    l_out: float
    loss: float
    grad_norm: float
    head_row_norm: float
    k_max: float
    sigma: float
    delta: float
    upper_rhs: float
    lower_lhs: float
    lower_rhs: float
    upper_holds: bool
    lower_holds: bool
    n_samples: int
    seed: object = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def upper_bound_rhs(eta, head_row_norm, delta, k_max, sigma):
    return 8.0 / sigma ** 4 * (eta * head_row_norm ** 2 * delta ** 2 + 4.0 * (1.0 - eta) * k_max ** 2)


def lower_bound_rhs(eta, l_out, loss, grad_norm, sigma):
    gap = 0.0 if eta == 1.0 else (1.0 - eta) * (l_out - loss) ** 2
    return 4.0 / sigma ** 4 * (gap - sigma ** 2 * grad_norm ** 2)


def theorem1_check(model, x, y, sigma, delta, n=500, rng=None, t=1e-2, K=20, seed=None) -> CurvatureReport:
    """Both curvature bounds at one sample, with exact-Hessian eigenvalue sums."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    s, x, X = _draws(model, x, y, sigma, n, rng)
    est, _ = _stability_from(s, x, X, sigma, delta)
    k_max = float(max(np.max(np.abs(s.logits(X))), np.max(np.abs(s.logits(x)))))
    H = exact_hessian(s, x, y)
    sq, ab, tr = eig_sums(H)
    loss = float(s.loss(x))
    gnorm = float(np.linalg.norm(s.grad(x)))
    lam = curvature_estimate(s, x, y, t, K, rng)
    up = upper_bound_rhs(est.eta, s.head_row_norm, delta, k_max, sigma)
    lo = lower_bound_rhs(est.eta, est.l_out, loss, gnorm, sigma)
    lhs = 2.0 * sq + ab * ab
    return CurvatureReport(lam, sq, ab, tr, est.eta, est.l_out, loss, gnorm, s.head_row_norm,
                           k_max, float(sigma), float(delta), up, lhs, lo,
                           bool(sq <= up), bool(lhs >= lo), n, seed)


def quadratic_instance(dim, sigma, rng, curvature_scale=1.0, grad_scale=1.0, feature_scale=1.0):
    """Random exactly-quadratic surface centred at the origin.

    The head scale kappa is chosen so that for every perturbation with
    ||e|| <= sigma (sqrt(dim) + 8) the loss change stays within
    2 kappa ||f(e) - f(0)|| / sqrt(dim), which keeps the change inside the
    feature ball below 2 kappa delta and outside it below 2 K_max.
    """
    B = rng.standard_normal((dim, dim))
    A = curvature_scale * 0.5 * (B + B.T)
    g = grad_scale * rng.standard_normal(dim)
    r = sigma * (np.sqrt(dim) + 8.0)
    lip = np.linalg.norm(g) + 0.5 * np.linalg.norm(A, 2) * r
    kappa = lip * np.sqrt(dim) / (2.0 * feature_scale)
    return QuadraticHook(A, g, c=float(rng.uniform(0.0, 2.0)), feature_scale=feature_scale, kappa=kappa)


def moment_check(H, sigma, n, rng):
    """Monte-Carlo moments of the Gaussian quadratic form e^T H e.

    Returns sample means and standard errors of (e^T H e)^2 and e (e^T H e),
    with the closed-form target 2 sigma^4 ||H||_F^2 + sigma^4 tr(H)^2.
    """
    H = np.asarray(H, dtype=np.float64)
    E = sigma * rng.standard_normal((n, H.shape[0]))
    quad = np.einsum("ni,ij,nj->n", E, H, E)
    sq = quad * quad
    vec = E * quad[:, None]
    target = 2 * sigma ** 4 * np.sum(H * H) + sigma ** 4 * np.trace(H) ** 2
    return {
        "sq_mean": float(sq.mean()), "sq_se": float(sq.std(ddof=1) / np.sqrt(n)), "sq_target": float(target),
        "vec_mean": vec.mean(axis=0), "vec_se": vec.std(axis=0, ddof=1) / np.sqrt(n),
    }
