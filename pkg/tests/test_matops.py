import numpy as np
import pytest

import matops
from checks import NS_BAND, conditioned_matrix
from matops import MatrixError, NewtonSchulzConfig


def _quintic(s, steps=5):
    a, b, c = matops.DEFAULT_COEFFICIENTS
    for _ in range(steps):
        s = a * s + b * s ** 3 + c * s ** 5
    return s


@pytest.mark.parametrize("shape", [(5, 5), (9, 4), (3, 11), (1, 6), (7, 1)])
def test_svd_matches_numpy(rng, shape):
    a = rng.standard_normal(shape)
    r = matops.svd(a)
    assert r.k == min(shape)
    np.testing.assert_allclose(r.s, np.linalg.svd(a, compute_uv=False), atol=1e-10)
    np.testing.assert_allclose(r.reconstruct(), a, atol=1e-10)
    np.testing.assert_allclose(r.u.T @ r.u, np.eye(r.k), atol=1e-10)
    np.testing.assert_allclose(r.v.T @ r.v, np.eye(r.k), atol=1e-10)
    assert np.all(np.diff(r.s) <= 0)


def test_svd_rank_deficient_completes_basis(rng):
    x = rng.standard_normal((6, 1))
    y = rng.standard_normal((1, 4))
    r = matops.svd(x @ y)
    assert r.s[0] == pytest.approx(np.linalg.norm(x) * np.linalg.norm(y), rel=1e-10)
    assert np.all(r.s[1:] == 0.0)
    np.testing.assert_allclose(r.u.T @ r.u, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(r.reconstruct(), x @ y, atol=1e-10)


def test_svd_of_zero_matrix():
    r = matops.svd(np.zeros((3, 2)))
    assert np.all(r.s == 0.0)
    np.testing.assert_allclose(r.u.T @ r.u, np.eye(2), atol=1e-12)


def test_singular_value_range_agrees_with_eigvalsh(rng):
    a = rng.standard_normal((8, 5))
    lo, hi = matops.singular_value_range(a)
    eig = np.linalg.eigvalsh(a.T @ a)
    assert lo == pytest.approx(np.sqrt(eig[0]), rel=1e-9)
    assert hi == pytest.approx(np.sqrt(eig[-1]), rel=1e-9)


def test_newton_schulz_identity_closed_form():
    out = matops.newton_schulz(np.eye(4))
    expected = _quintic(1.0 / (2.0 + 1e-7))
    np.testing.assert_allclose(out, expected * np.eye(4), atol=1e-12)
    assert expected == pytest.approx(0.76544, abs=1e-4)


def test_newton_schulz_output_in_band(rng):
    for rows, cols in [(4, 4), (16, 64), (64, 16), (33, 47), (64, 128)]:
        lo, hi = matops.singular_value_range(matops.newton_schulz(conditioned_matrix(rng, rows, cols)))
        assert NS_BAND[0] < lo and hi < NS_BAND[1]


def test_newton_schulz_transpose_and_scale(rng):
    g = 1e3 * conditioned_matrix(rng, 12, 7)
    out = matops.newton_schulz(g)
    np.testing.assert_allclose(matops.newton_schulz(g.T), out.T, atol=1e-12)
    np.testing.assert_allclose(matops.newton_schulz(10.0 * g), out, atol=1e-9)


def test_newton_schulz_shares_singular_vectors(rng):
    g = conditioned_matrix(rng, 10, 6)
    out = matops.newton_schulz(g)
    r = matops.svd(g)
    # U^T NS(G) V is diagonal with entries p^5(sigma / ||G||_F)
    core = r.u.T @ out @ r.v
    expected = _quintic(r.s / (np.linalg.norm(g) + 1e-7))
    np.testing.assert_allclose(core, np.diag(expected), atol=1e-10)


def test_cubic_iteration_converges_to_polar_factor(rng):
    g = conditioned_matrix(rng, 8, 12)
    cfg = NewtonSchulzConfig(steps=15, coefficients=matops.CUBIC_COEFFICIENTS)
    gap = np.linalg.norm(matops.newton_schulz(g, cfg) - matops.polar_factor(g)) / np.sqrt(8)
    assert gap <= 0.05


def test_polar_factor_is_orthogonal(rng):
    q = matops.polar_factor(rng.standard_normal((7, 4)))
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-10)


@pytest.mark.parametrize("bad", [np.array([1.0, 2.0]), np.array([[1.0, np.nan]]), np.array([[np.inf]]),
                                 np.zeros((0, 3))])
def test_as_matrix_rejects(bad):
    with pytest.raises(MatrixError):
        matops.as_matrix(bad)


def test_newton_schulz_rejects_non_finite():
    with pytest.raises(MatrixError):
        matops.newton_schulz(np.array([[1.0, np.nan], [0.0, 1.0]]))


@pytest.mark.parametrize("kwargs", [{"steps": 0}, {"eps": 0.0}, {"coefficients": (1.0, 2.0)}])
def test_newton_schulz_config_validation(kwargs):
    with pytest.raises(MatrixError):
        NewtonSchulzConfig(**kwargs)


def test_binary_codec_is_bit_exact(tmp_path, rng):
    a = rng.standard_normal((3, 5)) * 1e-300
    path = tmp_path / "a.bin"
    matops.write_matrix(path, a)
    assert path.stat().st_size == 16 + 8 * 15
    b = matops.read_matrix(path)
    assert b.shape == (3, 5)
    assert np.array_equal(a, b)


def test_csv_codec_is_bit_exact(tmp_path, rng):
    a = rng.standard_normal((4, 2)) / 3.0
    path = tmp_path / "a.csv"
    matops.write_matrix_csv(path, a)
    assert np.array_equal(matops.read_matrix_csv(path), a)


def test_truncated_payload_rejected(rng):
    blob = matops.matrix_to_bytes(rng.standard_normal((2, 2)))
    with pytest.raises(MatrixError):
        matops.matrix_from_bytes(blob[:-1])
    with pytest.raises(MatrixError):
        matops.matrix_from_bytes(blob[:10])
