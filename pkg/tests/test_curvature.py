import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi

from helpers import trained_blobs_model
from noisecurve import curvature as cv
from noisecurve import diffcore as dc
from noisecurve.model import Layer, Model, SoftmaxHead, init_model


def linear_model(W, b=None):
    C, d = W.shape
    return Model([Layer(np.eye(d), np.zeros(d), "none")], SoftmaxHead(W, np.zeros(C) if b is None else b))


def test_zero_weight_model_has_zero_input_gradient():
    m = init_model([3, 4], 3, seed=0)
    m = m.with_parameters([np.zeros_like(p) for p in m.parameters()])
    np.testing.assert_array_equal(cv.input_gradient(m, np.ones(3), 1), np.zeros(3))


def test_input_gradient_matches_fd():
    m = init_model([4, 6, 3], 3, seed=2, activations=["relu", "none"])
    x = np.random.default_rng(0).standard_normal(4)
    s = cv.ModelSurface(m, 2)
    fd = dc.finite_difference_gradient(lambda v: s.loss(v), x)
    np.testing.assert_allclose(cv.input_gradient(m, x, 2), fd, rtol=1e-5, atol=1e-9)


def test_linear_model_gradient_closed_form():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((4, 3))
    x = rng.standard_normal(3)
    z = W @ x
    p = np.exp(z - z.max())
    p /= p.sum()
    np.testing.assert_allclose(cv.input_gradient(linear_model(W), x, 2), (p - np.eye(4)[2]) @ W, atol=1e-10)


def test_batched_gradients_equal_single():
    m = init_model([3, 5, 2], 3, seed=0)
    X = np.random.default_rng(0).standard_normal((6, 3))
    Y = np.arange(6) % 3
    G = cv.input_gradients(m, X, Y)
    for i in range(6):
        np.testing.assert_allclose(G[i], cv.input_gradient(m, X[i], Y[i]), atol=1e-14)


@given(st.floats(1e-6, 10.0))
def test_hvp_exact_for_quadratic(t):
    rng = np.random.default_rng(3)
    B = rng.standard_normal((4, 4))
    A = B + B.T
    hook = cv.QuadraticHook(A, rng.standard_normal(4))
    v = rng.standard_normal(4)
    np.testing.assert_allclose(cv.hvp(hook, rng.standard_normal(4), 0, v, t), A @ v, rtol=1e-6, atol=1e-6)


def test_hvp_zero_direction():
    m = init_model([3, 4], 2, seed=0)
    np.testing.assert_array_equal(cv.hvp(m, np.ones(3), 0, np.zeros(3), 1e-2), np.zeros(3))
    with pytest.raises(ValueError):
        cv.hvp(m, np.ones(3), 0, np.ones(3), 0.0)


def test_hvp_step_refinement_on_smooth_model():
    rng = np.random.default_rng(4)
    for seed in range(5):
        m = init_model([4, 6, 3], 3, seed=seed, activations=["none", "none"])
        x, v = rng.standard_normal(4), rng.standard_normal(4)
        a, b = cv.hvp(m, x, 1, v, 1e-2), cv.hvp(m, x, 1, v, 1e-3)
        assert np.linalg.norm(a - b) <= 1e-3 * np.linalg.norm(b)


def test_estimator_on_diagonal_quadratic():
    hook = cv.QuadraticHook(np.diag([1.0, 2.0]))
    est = cv.curvature_estimate(hook, np.zeros(2), 0, 1e-2, 2000, np.random.default_rng(0))
    assert abs(est - 5.0) <= 3 * np.sqrt(2 * 17 / 2000)


def test_estimator_zero_and_step_invariance():
    assert cv.curvature_estimate(cv.QuadraticHook(np.zeros((3, 3))), np.ones(3), 0, 1e-2, 7,
                                 np.random.default_rng(0)) == 0.0
    rng = np.random.default_rng(5)
    B = rng.standard_normal((5, 5))
    hook = cv.QuadraticHook(B + B.T, rng.standard_normal(5))
    eps = rng.standard_normal((50, 5))
    x = rng.standard_normal(5)
    a = cv.curvature_estimate(hook, x, 0, 1e-2, 50, eps=eps)
    b = cv.curvature_estimate(hook, x, 0, 1.0, 50, eps=eps)
    assert abs(a - b) <= 1e-12 * abs(b)


def test_estimator_tracks_exact_hessian_on_trained_mlp():
    # a ReLU network is piecewise smooth; the probe step must stay inside one
    # activation region, so the comparison uses t = 1e-4
    m, ds = trained_blobs_model()
    for i in range(0, 200, 25):
        x, y = ds.flat()[i], ds.labels[i]
        exact = cv.eig_sums(cv.exact_hessian(m, x, y))[0]
        est = cv.curvature_estimate(m, x, y, 1e-4, 2000, np.random.default_rng(i))
        assert abs(est - exact) <= 0.2 * exact


def test_exact_hessian_recovers_quadratic():
    rng = np.random.default_rng(6)
    B = rng.standard_normal((6, 6))
    A = B + B.T
    np.testing.assert_allclose(cv.exact_hessian(cv.QuadraticHook(A, rng.standard_normal(6)), rng.standard_normal(6), 0),
                               A, atol=1e-8)


def test_hessian_symmetry_and_trace_consistency():
    m = init_model([5, 7, 3], 3, seed=1, activations=["none", "none"])
    x = np.random.default_rng(0).standard_normal(5)
    H = cv.exact_hessian(m, x, 0, symmetrize=False)
    assert np.linalg.norm(H - H.T) <= 1e-4 * np.linalg.norm(H)
    Hs = cv.exact_hessian(m, x, 0)
    assert abs(np.trace(Hs) - cv.eig_sums(Hs)[2]) <= 1e-8
    with pytest.raises(ValueError):
        cv.exact_hessian(init_model([65, 2], 2), np.zeros(65), 0)


def test_eig_sums_small_cases():
    assert cv.eig_sums(np.diag([3.0, -4.0])) == pytest.approx((25.0, 7.0, -1.0), abs=1e-12)
    assert cv.eig_sums(np.eye(4)) == pytest.approx((4.0, 4.0, 4.0), abs=1e-12)
    with pytest.raises(ValueError):
        cv.eig_sums(np.array([[0.0, 1.0], [0.0, 0.0]]))


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_jacobi_matches_frobenius_and_lapack(seed, n):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    H = B + B.T
    sq, ab, tr = cv.eig_sums(H)
    assert abs(sq - np.sum(H * H)) <= 1e-10 * np.sum(H * H)
    np.testing.assert_allclose(np.sort(cv.jacobi_eigenvalues(H)), np.linalg.eigvalsh(H), atol=1e-9)
    assert tr == pytest.approx(np.trace(H), abs=1e-9)


def test_stability_limits():
    m = init_model([3, 4], 2, seed=0)
    x = np.ones(3)
    assert cv.stability_estimates(m, x, 0, 1e-9, 1e-3, 200, np.random.default_rng(0)).eta == 1.0
    est = cv.stability_estimates(m, x, 0, 0.5, 0.0, 300, np.random.default_rng(1))
    X = x + 0.5 * np.random.default_rng(1).standard_normal((300, 3))
    assert est.eta == 0.0
    assert est.l_out == pytest.approx(float(np.mean(cv.ModelSurface(m, 0).loss(X))), abs=1e-12)


def test_stability_identity_backbone_follows_chi():
    d, sigma, delta, n = 4, 0.5, 0.9, 20_000
    m = linear_model(np.eye(d))
    eta = cv.stability_estimates(m, np.zeros(d), 0, sigma, delta, n, np.random.default_rng(2)).eta
    p = chi.cdf(delta / sigma, d)
    assert abs(eta - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_bounds_trivial_when_feature_never_leaves_ball():
    m, ds = trained_blobs_model()
    rep = cv.theorem1_check(m, ds.flat()[0], ds.labels[0], 0.05, 1e6, n=200, rng=np.random.default_rng(0))
    assert rep.eta == 1.0 and not rep.to_dict()["l_out"]
    assert rep.lower_rhs <= 0 <= rep.lower_lhs
    assert rep.upper_holds and rep.lower_holds


def test_quadratic_construction_satisfies_both_bounds():
    rng = np.random.default_rng(11)
    for _ in range(20):
        dim = int(rng.integers(2, 7))
        hook = cv.quadratic_instance(dim, 0.3, rng, grad_scale=float(rng.choice([1.0, 0.05])))
        rep = cv.theorem1_check(hook, np.zeros(dim), 0, 0.3, 0.3 * np.sqrt(dim), n=400, rng=rng)
        assert rep.upper_holds and rep.lower_holds


def test_moments_match_closed_form():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((4, 4))
    r = cv.moment_check(B + B.T, 0.8, 100_000, rng)
    assert abs(r["sq_mean"] - r["sq_target"]) <= 3 * r["sq_se"]
    assert np.all(np.abs(r["vec_mean"]) <= 4 * r["vec_se"])
