import numpy as np
import pytest
from scipy.linalg import hadamard
from hypothesis import given, settings, strategies as st

from splatdistill import phis
from splatdistill.errors import DataError, ShapeError


def population(rng, m, d, rank=None):
    rank = d if rank is None else rank
    mix = rng.normal(size=(rank, d)) * rng.uniform(0.1, 5.0, (rank, 1))
    return rng.normal(size=(m, rank)) @ mix + rng.normal(size=d) * 3


def out_var(t, x):
    return np.var(t.apply(x), axis=0, ddof=1)


def test_isotropic_data_stays_unit_variance(rng):
    x = rng.normal(size=(200000, 8))
    t = phis.fit(x)
    assert t.output_dim == 8
    np.testing.assert_allclose(out_var(t, x), 1.0, atol=1e-3)


def test_two_dim_principal_variances():
    # exact principal variances (4, 1) along a rotated basis
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5000, 2))
    z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(z, rowvar=False))).T
    ang = 0.3
    basis = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    x = (z * [2.0, 1.0]) @ basis.T
    t = phis.fit(x)
    assert t.output_dim == 2
    np.testing.assert_allclose(t.eigenvalues, [4.0, 1.0], rtol=1e-10)
    unscaled = (x - t.mean) @ t.rotation.T
    np.testing.assert_allclose(np.var(unscaled, axis=0, ddof=1), 2.5, rtol=1e-10)
    np.testing.assert_allclose(out_var(t, x), 1.0, rtol=1e-10)


def test_three_dims_pad_to_four(rng):
    x = population(rng, 4000, 3)
    t = phis.fit(x)
    assert t.output_dim == 4
    y = t.apply(x)
    np.testing.assert_allclose(np.var(y, axis=0, ddof=1), 1.0, atol=1e-3)
    energy_in = np.sum((x - t.mean) ** 2)
    np.testing.assert_allclose(np.sum(y**2), energy_in * t.scale**2, rtol=1e-10)


@settings(max_examples=20, deadline=None)
@given(d=st.sampled_from([2, 3, 8, 16, 33]), seed=st.integers(0, 10_000),
       low_rank=st.booleans())
def test_variance_equalization_orthogonality_roundtrip(d, seed, low_rank):
    rng = np.random.default_rng(seed)
    x = population(rng, 3 * d + 50, d, rank=max(1, d // 2) if low_rank else None)
    t = phis.fit(x)
    v = out_var(t, x)
    assert np.ptp(v) <= 1e-4
    assert abs(v.mean() - 1.0) <= 1e-4
    np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(t.output_dim), atol=1e-6)
    np.testing.assert_allclose(t.invert(t.apply(x)), x, atol=1e-6)


def test_apply_basic_properties(rng):
    x = population(rng, 500, 5)
    t = phis.fit(x)
    assert np.allclose(t.apply(t.mean), 0.0)
    a, b = x[0], x[1]
    np.testing.assert_allclose(np.linalg.norm(t.apply(a) - t.apply(b)),
                               t.scale * np.linalg.norm(a - b), rtol=1e-12)


def test_distance_scaled_by_transform_scale():
    t = phis.PhisTransform(np.zeros(2), np.eye(2), 0.5)
    out = t.apply(np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert np.linalg.norm(out[0] - out[1]) == pytest.approx(1.0)


def test_invert_special_inputs(rng):
    x = population(rng, 800, 5)
    t = phis.fit(x)
    np.testing.assert_allclose(t.invert(np.zeros(8)), t.mean)

    # the scaled image of a principal direction inverts to that direction
    u = np.linalg.eigh(np.cov(x, rowvar=False))[1][:, ::-1]
    h = hadamard(8) / np.sqrt(8)
    for k in range(5):
        y = t.scale * h[:, k]
        back = t.invert(y) - t.mean
        assert abs(abs(back @ u[:, k]) - 1.0) < 1e-6
        np.testing.assert_allclose(np.abs(back), np.abs(u[:, k]), atol=1e-6)

    # padded-only directions are outside the image of apply and unpad discards them
    for j in range(5, 8):
        y = t.rotation[:, j]
        coords = t.rotation.T @ y
        assert np.abs(coords[:5]).max() < 1e-6
        np.testing.assert_allclose(t.invert(y), t.mean, atol=1e-6)


def test_rotation_preserves_centered_cosines(rng):
    x = population(rng, 400, 6)
    t = phis.fit(x)
    a, b = x[3] - t.mean, x[7] - t.mean
    ya, yb = t.apply(x[3]), t.apply(x[7])
    cos_in = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    cos_out = ya @ yb / np.linalg.norm(ya) / np.linalg.norm(yb)
    assert cos_in == pytest.approx(cos_out, abs=1e-12)


def test_errors(rng):
    with pytest.raises(DataError):
        phis.fit(rng.normal(size=(4, 4)))
    t = phis.fit(rng.normal(size=(50, 4)))
    with pytest.raises(ShapeError):
        t.apply(np.zeros(3))
    with pytest.raises(ShapeError):
        t.invert(np.zeros(3))


def test_chps_roundtrip(tmp_path, rng):
    t = phis.fit(population(rng, 300, 5))
    phis.save(t, tmp_path / "t.chps")
    back = phis.load(tmp_path / "t.chps")
    assert back.scale == t.scale
    np.testing.assert_array_equal(back.mean, t.mean)
    np.testing.assert_array_equal(back.rotation, t.rotation)
    raw = (tmp_path / "t.chps").read_bytes()
    assert raw[:4] == b"CHPS" and len(raw) == 4 + 4 + 4 + 8 + 8 * (5 + 64)
