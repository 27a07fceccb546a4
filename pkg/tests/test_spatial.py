import numpy as np
import pytest

from taillight.autodiff import ShapeError, Tensor
from taillight.spatial import apply_spatial, init_spatial, spatial_scores, spatial_weights

F64 = np.float64


def make_params(rng, d=4, hidden=5, k=6, random_bias=True):
    p = init_spatial(d, hidden, k, rng, F64)
    if random_bias:
        p["spatial.b_a_zh"] = Tensor(rng.normal(size=k))
        p["spatial.b_a"] = Tensor(rng.normal(size=1))
    return p


def scores_per_cell(z, h, p):
    """Evaluate the additive score one cell at a time with plain loops."""
    d, gh, gw = z.shape
    phi1 = p["spatial.phi1"].data[:, :, 0, 0]
    phi2 = p["spatial.phi2"].data[0, :, 0, 0]
    out = np.zeros((gh, gw))
    for i in range(gh):
        for j in range(gw):
            m = sum(phi2[a] * sum(phi1[a, b] * z[b, i, j] for b in range(d)) for a in range(d))
            pre = p["spatial.W_a_z"].data[:, 0] * m + p["spatial.W_a_h"].data @ h + p["spatial.b_a_zh"].data
            out[i, j] = p["spatial.W_a"].data[0] @ np.tanh(pre) + p["spatial.b_a"].data[0]
    return out


def test_scores_match_per_cell_oracle():
    rng = np.random.default_rng(11)
    p = make_params(rng)
    for _ in range(5):
        z, h = rng.normal(size=(4, 3, 3)), rng.normal(size=5)
        got = spatial_scores(Tensor(z), Tensor(h), p).data
        np.testing.assert_allclose(got, scores_per_cell(z, h, p), atol=1e-10, rtol=0)


def test_degenerate_scores():
    rng = np.random.default_rng(0)
    p = make_params(rng)
    p["spatial.W_a"] = Tensor(np.zeros((1, 6)))
    a = spatial_scores(Tensor(rng.normal(size=(4, 3, 3))), Tensor(rng.normal(size=5)), p).data
    np.testing.assert_array_equal(a, np.full((3, 3), p["spatial.b_a"].data[0]))
    p = make_params(rng, random_bias=False)
    z = np.ones((4, 3, 3)) * rng.normal(size=(4, 1, 1))
    a = spatial_scores(Tensor(z), Tensor(np.zeros(5)), p).data
    np.testing.assert_allclose(a, np.full((3, 3), a[0, 0]), atol=1e-15)


def test_weights_examples():
    np.testing.assert_allclose(spatial_weights(Tensor(np.full((7, 7), 0.3))).data, np.full((7, 7), 1 / 49))
    a = np.random.default_rng(2).normal(size=(3, 3))
    a[1, 2] = a.max() + 20
    assert spatial_weights(Tensor(a)).data[1, 2] > 0.999
    a = np.random.default_rng(3).normal(size=(4, 4))
    assert spatial_weights(Tensor(a)).data.tobytes() == spatial_weights(Tensor(a + 0.0)).data.tobytes()
    np.testing.assert_allclose(spatial_weights(Tensor(a + 5.0)).data, spatial_weights(Tensor(a)).data, atol=1e-15)


def test_weights_are_probability_maps_1000_random():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        g = int(rng.integers(2, 8))
        alpha = spatial_weights(Tensor(rng.normal(0, rng.uniform(0.1, 30), size=(g, g)))).data
        assert (alpha >= 0).all()
        assert abs(alpha.sum() - 1) <= 1e-6


def test_apply_examples():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 4, 4))
    np.testing.assert_allclose(apply_spatial(Tensor(z), Tensor(np.full((4, 4), 1 / 16))).data, z / 16)
    onehot = np.zeros((4, 4))
    onehot[2, 1] = 1
    out = apply_spatial(Tensor(z), Tensor(onehot)).data
    expect = np.zeros_like(z)
    expect[:, 2, 1] = z[:, 2, 1]
    np.testing.assert_array_equal(out, expect)
    alpha = rng.uniform(size=(4, 4))
    got = apply_spatial(Tensor(z), Tensor(alpha)).data
    for c in range(3):
        for i in range(4):
            for j in range(4):
                assert got[c, i, j] == z[c, i, j] * alpha[i, j]


def test_grid_mismatch_rejected():
    with pytest.raises(ShapeError):
        apply_spatial(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 3))))
    p = make_params(np.random.default_rng(0), d=4)
    with pytest.raises(ShapeError):
        spatial_scores(Tensor(np.zeros((5, 3, 3))), Tensor(np.zeros(5)), p)
