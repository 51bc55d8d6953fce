import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import trained_blobs_model
from noisecurve import theory as th
from noisecurve.harness.verify import random_scene
from noisecurve.model import Layer, Model, SoftmaxHead, features, scale_transform


def test_dispersion_small_cases():
    d = th.class_dispersion({0: np.array([[1.0, 1.0]]), 1: np.array([[0.0, 0.0], [3.0, 4.0]])})
    assert d == {0: 0.0, 1: 5.0}
    with pytest.raises(ValueError):
        th.class_dispersion({0: np.zeros((0, 2))})


def test_dispersion_brute_force():
    pts = np.random.default_rng(0).standard_normal((50, 3))
    best = max(math.dist(a, b) for a, b in itertools.combinations(pts.tolist(), 2))
    assert th.class_dispersion({0: pts})[0] == pytest.approx(best, abs=1e-12)


def test_margin_one_dimensional():
    head = SoftmaxHead(np.array([[1.0], [-1.0]]), np.zeros(2))
    assert th.class_margin_from_features(head, {0: np.array([[1.0]])})[0] == pytest.approx(1.0)
    assert th.class_margin_from_features(head, {0: np.array([[0.0], [4.0]])})[0] == 0.0


def test_margin_scales_with_transform():
    m, ds = trained_blobs_model()
    a = th.class_margin(m, ds.flat(), ds.labels)
    b = th.class_margin(scale_transform(m, 3.0), ds.flat(), ds.labels)
    for c in a:
        assert b[c] == pytest.approx(3 * a[c], rel=1e-12)


def test_dispersion_check_not_applicable_when_loss_positive():
    feats = {0: np.array([[0.0, 0.0], [5.0, 0.0]])}
    r = th.dispersion_check(feats, {0: np.zeros(2)}, 1.0)
    assert r["applicable"] is False and r["holds"] is None


def test_random_scenes_never_violate():
    rng = np.random.default_rng(42)
    for _ in range(200):
        head, feats, cents, dv, dd = random_scene(rng)
        assert th.dispersion_check(feats, cents, dv)["holds"] is True
        r = th.margin_separation_check(head, feats, cents, dv, dd)
        assert r["applicable"] and r["margin_holds"] is True
        assert r["separation_holds"] is (True if dd > 2 * dv else None)


def test_margin_separation_check_skips_margin_claim_without_gap():
    head, feats, cents, dv, dd = random_scene(np.random.default_rng(0))
    r = th.margin_separation_check(head, feats, cents, dv, 0.5 * dv)
    assert r["margin_holds"] is None and r["separation_holds"] is None


def test_geometry_report_on_identity_model():
    q = np.array([[4.0, 0.0], [4.2, 0.0], [-4.0, 0.0]])
    m = Model([Layer(np.eye(2), np.zeros(2), "none")], SoftmaxHead(np.array([[1.0, 0], [-1.0, 0]]), np.zeros(2)))
    rep = th.geometry_report(m, q, [0, 0, 1], {0: np.array([4.1, 0.0]), 1: np.array([-4.0, 0.0])}, 0.5, 2.0)
    assert rep.max_dispersion == pytest.approx(0.2)
    assert rep.min_margin == pytest.approx(4.0)
    assert rep.dispersion_check["holds"] and rep.margin_check["margin_holds"] and rep.margin_check["separation_holds"]
    assert set(rep.to_dict()["margin"]) == {"0", "1"}


def test_phi_rho_ramp():
    assert th.phi_rho(0.25, 0.5) == 0.5
    np.testing.assert_array_equal(th.phi_rho(np.array([-1.0, 0.0, 1.0]), 0.5), [1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        th.phi_rho(0.1, 0.0)


def test_empirical_risk_cases():
    far = np.full((4, 2), 10.0)
    assert th.empirical_margin_risk(None, np.zeros(2), far, 1.0, 0.5) == 1.0
    pts = np.array([[0.0, 0.0], [0.9, 0.0], [2.0, 0.0]])
    # scores r^2 - |q|^2 = 1, 0.19, -3 against rho 0.5
    expect = np.mean([0.0, 1 - 0.19 / 0.5, 1.0])
    assert th.empirical_margin_risk(None, np.zeros(2), pts, 1.0, 0.5) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        th.empirical_margin_risk(None, np.zeros(2), pts, 1.0, 1.0)


def test_generalization_slack_reference():
    ref = 4.0 * (1 + 2 + 0.01) + 3.0 * math.sqrt(math.log(40.0) / 20_000)
    assert th.generalization_bound(1, 1, 10_000, 0.5, 0.05) == pytest.approx(ref, abs=1e-9)
    assert ref == pytest.approx(12.080743, abs=1e-6)
    assert th.generalization_bound(1, 1, 1e12, 0.5, 0.05) == pytest.approx(12.0, abs=1e-4)
    with pytest.raises(ValueError):
        th.generalization_bound(1, 1, 10, 0.5, 1.5)


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.05, 5))
def test_doubling_rho_halves_first_term(lam, R, rho):
    tail = 3.0 * math.sqrt(math.log(2 / 0.05) / (2 * 100))
    a = th.generalization_bound(lam, R, 100, rho, 0.05) - tail
    b = th.generalization_bound(lam, R, 100, 2 * rho, 0.05) - tail
    assert a == pytest.approx(2 * b, rel=1e-9)


def test_tau_counts():
    c = {0: np.zeros(2), 1: np.zeros(2)}
    inside = {0: np.zeros((3, 2)), 1: np.zeros((2, 2))}
    assert th.tau_estimate(inside, c, 0.5) == 1.0
    assert th.tau_estimate({0: np.zeros((3, 2)), 1: np.full((2, 2), 9.0)}, c, 0.5) == 0.0
    half = {0: np.array([[0.0, 0.0], [9.0, 9.0]]), 1: np.zeros((2, 2))}
    assert th.tau_estimate(half, c, 0.5) == 0.5


def _kl_reference(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def test_jsd_cases():
    edges = (np.array([0.0, 0.5, 1.0]),)
    P = th.Histogram(edges, np.array([3.0, 1.0]))
    Q = th.Histogram(edges, np.array([1.0, 3.0]))
    assert th.jsd_histogram(P, P) == 0.0
    disjoint = th.jsd_histogram(th.Histogram(edges, np.array([2.0, 0.0])), th.Histogram(edges, np.array([0.0, 5.0])))
    assert disjoint == pytest.approx(math.log(2), abs=1e-12)
    p, q = [0.75, 0.25], [0.25, 0.75]
    m = [(a + b) / 2 for a, b in zip(p, q)]
    ref = 0.5 * _kl_reference(p, m) + 0.5 * _kl_reference(q, m)
    assert th.jsd_histogram(P, Q) == pytest.approx(ref, abs=1e-12)
    from scipy.spatial.distance import jensenshannon
    assert th.jsd_histogram(P, Q) == pytest.approx(jensenshannon(p, q) ** 2, abs=1e-12)
    with pytest.raises(ValueError):
        th.jsd_histogram(P, th.Histogram((np.array([0.0, 0.3, 1.0]),), np.array([1.0, 1.0])))


@given(st.integers(0, 10_000))
def test_jsd_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((50, 3))
    b = rng.standard_normal((40, 3)) + rng.uniform(0, 3)
    j = th.pair_jsd(a, b, seed=seed % 7)
    assert 0.0 <= j <= math.log(2) + 1e-12
    assert j == pytest.approx(th.pair_jsd(b, a, seed=seed % 7), abs=1e-12)


def test_layer_divergence_degenerate_and_separated():
    m = Model([Layer(np.eye(2), np.zeros(2), "none")], SoftmaxHead(np.eye(2), np.zeros(2)))
    # exactly half of each class sits inside its ball, so the floor is 0
    half = np.vstack([np.zeros((5, 2)), np.full((5, 2), 3.0), np.full((5, 2), 1.0), np.full((5, 2), -3.0)])
    y = np.repeat([0, 1], 10)
    rep = th.layer_divergence_check(m, half, y, {0: np.zeros(2), 1: np.ones(2)}, 0.5, 1)
    assert rep["tau"] == 0.5 and rep["threshold"] == 0.0 and rep["holds"]
    rng = np.random.default_rng(0)
    sep = np.vstack([rng.normal(0, 0.05, (100, 2)), rng.normal(0, 0.05, (100, 2)) + 20])
    rep = th.layer_divergence_check(m, sep, np.repeat([0, 1], 100), {0: np.zeros(2), 1: np.full(2, 20.0)}, 0.5, 1)
    assert rep["tau"] == 1.0 and rep["holds"] and rep["min_jsd"] == pytest.approx(math.log(2))
    low = th.layer_divergence_check(m, sep, np.repeat([0, 1], 100), {0: np.full(2, 9.0), 1: np.full(2, 9.0)}, 0.5, 1)
    assert low["applicable"] is False and low["holds"] is None
