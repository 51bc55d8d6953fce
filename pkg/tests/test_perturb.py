import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from noisecurve import data as D
from noisecurve import perturb as P


def grid(h=8, w=8, c=1, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w, c))


def test_gaussian_moments():
    out = P.apply(P.Gaussian(0.3), np.zeros(100_000), P.stream(0, 1))
    assert abs(out.mean()) <= 4 * 0.3 / np.sqrt(1e5)
    assert abs(out.std() / 0.3 - 1) <= 0.02


def test_uniform_bounds():
    out = P.apply(P.Uniform(0.2), np.zeros(10_000), P.stream(0))
    assert out.min() >= -0.2 and out.max() <= 0.2


def test_du_sample_constant_and_ragged():
    const = np.full((9, 9, 2), 0.7)
    np.testing.assert_allclose(P.apply(P.DUSample(3), const, P.stream(0)), const, atol=1e-15)
    g = np.arange(25, dtype=float).reshape(5, 5, 1)
    out = P.apply(P.DUSample(2), g, P.stream(0))
    assert out.shape == g.shape
    assert out[0, 0, 0] == np.mean([0, 1, 5, 6])
    assert out[4, 4, 0] == 24.0  # a 1x1 trailing block keeps its value


def test_full_occlusion_zeros_grid():
    out = P.apply(P.Occlusion(1, 8, 8, 0.0), grid(), P.stream(0))
    assert np.all(out == 0.0)


def test_stripes_fill_whole_lines():
    out = P.apply(P.Stripes(1, 2, "horizontal", -1.0), grid(), P.stream(3))
    rows = np.flatnonzero(np.all(out == -1.0, axis=(1, 2)))
    assert len(rows) == 2 and rows[1] == rows[0] + 1


def test_grid_only_variants_reject_vectors():
    for spec in (P.Occlusion(), P.Stripes(), P.DUSample()):
        with pytest.raises(ValueError):
            P.apply(spec, np.zeros(5), P.stream(0))
    with pytest.raises(ValueError):
        P.apply(P.Occlusion(1, 9, 9), grid(), P.stream(0))


def test_parameter_validation():
    for bad in (lambda: P.Gaussian(-1), lambda: P.DUSample(1), lambda: P.Stripes(orientation="diag"),
                lambda: P.Compose((P.Compose(()),))):
        with pytest.raises(ValueError):
            bad()


def test_seed_stability_and_distinct_masks():
    g = grid()
    spec = P.Occlusion(3, 2, 2)
    a = P.apply(spec, g, P.stream(5, 0))
    np.testing.assert_array_equal(a, P.apply(spec, g, P.stream(5, 0)))
    masks = {P.apply(spec, g, P.stream(s, 0)).tobytes() for s in range(100)}
    assert len(masks) == 100


def test_identity_specs_leave_data_unchanged():
    ds = D.gen_blobs(2, 5, 3, 1.0, 0)
    assert P.noised_dataset(ds, P.Gaussian(0.0), 1).equals(ds)
    assert P.is_identity(P.Compose((P.Gaussian(0), P.Uniform(0))))


def test_keyed_streams_follow_original_indices():
    ds = D.gen_blobs(3, 10, 4, 1.0, 0)
    perm = np.random.default_rng(1).permutation(len(ds))
    full = P.noised_dataset(ds, P.Gaussian(0.5), 9)
    shuffled = P.noised_dataset(ds.subset(perm), P.Gaussian(0.5), 9)
    np.testing.assert_array_equal(shuffled.x, full.x[perm])


def test_compose_du_then_occlusion_on_textures():
    ds = D.gen_textures(2, 4, 8, 8, 0)
    spec = P.Compose((P.DUSample(3), P.Occlusion(2, 3, 3)))
    out = P.noised_dataset(ds, spec, 0)
    assert out.x.shape == ds.x.shape
    # both effects present: blocks are constant up to the occluded cells, and some cells are zero
    assert np.mean(out.x == 0.0) > 0
    du = P.noised_dataset(ds, P.DUSample(3), 0)
    keep = out.x != 0.0
    np.testing.assert_allclose(out.x[keep], du.x[keep])
    assert P.label(spec) == "du_sample(down_factor=3)+occlusion(n_patches=2,patch_h=3,patch_w=3,fill_value=0.0)"


def test_clamp():
    out = P.apply(P.Gaussian(5.0), np.full(100, 0.5), P.stream(0), clamp=(0.0, 1.0))
    assert out.min() >= 0.0 and out.max() <= 1.0


specs = st.one_of(
    st.builds(P.Gaussian, st.floats(0, 3)),
    st.builds(P.Uniform, st.floats(0, 3)),
    st.builds(P.Occlusion, st.integers(0, 30), st.integers(1, 4), st.integers(1, 4), st.floats(-1, 1)),
    st.builds(P.Stripes, st.integers(0, 12), st.integers(1, 3), st.sampled_from(["vertical", "horizontal"]),
              st.floats(-1, 1)),
    st.builds(P.DUSample, st.integers(2, 5)),
)


@given(st.lists(specs, min_size=0, max_size=3))
def test_flat_round_trip(parts):
    spec = P.Compose(tuple(parts)) if len(parts) != 1 else parts[0]
    assert P.from_flat(P.to_flat(spec, "noise"), "noise") == spec


def test_from_flat_rejects_unknown_keys():
    with pytest.raises(ValueError):
        P.from_flat({"p.variant": "gaussian", "p.sigma": "1", "p.color": "red"}, "p")
    with pytest.raises(ValueError):
        P.from_flat({"p.variant": "blur"}, "p")
