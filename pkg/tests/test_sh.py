import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specsplat import sh
from specsplat.core import DomainError, GaussianCloud, SpectralBasis

unit_dirs = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(
    lambda v: sum(x * x for x in v) > 1e-2).map(lambda v: np.array(v) / np.linalg.norm(v))


def one_gaussian(coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = coeffs.shape[0]
    basis = SpectralBasis(tuple(float(x) for x in np.linspace(450, 700, n)))
    return GaussianCloud.create(np.zeros((1, 3)), coeffs[None], basis)


def test_constants():
    assert sh.C0 == pytest.approx(1 / (2 * np.sqrt(np.pi)), abs=1e-15)
    assert sh.C1 == pytest.approx(np.sqrt(3 / (4 * np.pi)), abs=1e-15)
    assert [sh.num_sh_coeffs(d) for d in range(4)] == [1, 4, 9, 16]


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_basis_orthonormal(degree):
    # Gauss-Legendre in cos(theta) times uniform phi integrates degree <= 6 polynomials exactly
    x, w = np.polynomial.legendre.leggauss(12)
    phi = np.arange(24) * 2 * np.pi / 24
    ct, p = np.meshgrid(x, phi, indexing="ij")
    stheta = np.sqrt(1 - ct**2)
    dirs = np.stack([stheta * np.cos(p), stheta * np.sin(p), ct], axis=-1).reshape(-1, 3)
    weights = np.repeat(w, len(phi)) * (2 * np.pi / len(phi))
    y = sh.sh_basis(degree, dirs)
    gram = (y * weights[:, None]).T @ y
    assert np.allclose(gram, np.eye(len(gram)), atol=1e-12)


@given(unit_dirs)
@settings(max_examples=100, deadline=None)
def test_parity(d):
    y_pos, y_neg = sh.eval_sh_basis(3, d), sh.eval_sh_basis(3, -d)
    for l in range(4):
        sl = slice(l * l, (l + 1) ** 2)
        assert np.allclose(y_neg[sl], (-1) ** l * y_pos[sl], atol=1e-12)


@given(unit_dirs)
@settings(max_examples=50, deadline=None)
def test_basis_jacobian_matches_differences(d):
    h = 1e-6
    jac = sh.sh_basis_jacobian(3, d)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (sh.sh_basis(3, d + e) - sh.sh_basis(3, d - e)) / (2 * h)
        assert np.allclose(jac[:, j], fd, atol=1e-8)


def test_degree_zero_radiance_is_offset_dc():
    c = one_gaussian([[0.0], [1.0], [-5.0]])
    out = sh.eval_radiance(c, 0, [0, 0, 1])
    assert np.allclose(out, [0.5, 0.5 + sh.C0, 0.0])


def test_degree_one_depends_on_direction():
    coeffs = np.zeros((1, 4))
    coeffs[0, 2] = 2.0  # the z-aligned lobe
    c = one_gaussian(coeffs)
    assert sh.eval_radiance(c, 0, [0, 0, 1])[0] == pytest.approx(0.5 + 2 * sh.C1)
    assert sh.eval_radiance(c, 0, [0, 0, -1])[0] == pytest.approx(0.0)  # clamped from 0.5 - 2 C1 < 0
    assert sh.eval_radiance(c, 0, [1, 0, 0])[0] == pytest.approx(0.5)


def test_domain_errors():
    c = one_gaussian([[0.0]])
    with pytest.raises(DomainError):
        sh.eval_radiance(c, 0, [0, 0, 2])
    with pytest.raises(IndexError):
        sh.eval_radiance(c, 3, [0, 0, 1])
    with pytest.raises(DomainError):
        sh.sh_basis(4, np.array([0, 0, 1.0]))
    with pytest.raises(DomainError):
        sh.eval_radiance_vjp(c, 0, [0, 0, 1], np.ones(2))


def test_vjp_matches_differences():
    rng = np.random.default_rng(3)
    coeffs = rng.normal(0, 0.3, size=(5, 16))
    coeffs[:, 0] = rng.uniform(0.5, 1.5, size=5)
    c = one_gaussian(coeffs)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    up = rng.standard_normal(5)
    g_coeffs, g_dir = sh.eval_radiance_vjp(c, 0, d, up)
    assert g_coeffs.shape == (5, 16) and g_dir.shape == (3,)
    h = 1e-6
    for idx in [(0, 0), (2, 5), (4, 15)]:
        p, m = c.copy(), c.copy()
        p.sh_coeffs[(0,) + idx] += h
        m.sh_coeffs[(0,) + idx] -= h
        fd = (sh.eval_radiance(p, 0, d) - sh.eval_radiance(m, 0, d)) @ up / (2 * h)
        assert g_coeffs[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)
    # direction gradient of the polynomial extension
    basis = lambda v: sh.decode(coeffs, sh.sh_basis(3, v))[0] @ up
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        assert g_dir[j] == pytest.approx((basis(d + e) - basis(d - e)) / (2 * h), rel=1e-5, abs=1e-8)


def test_vjp_zero_where_clamped():
    c = one_gaussian([[-10.0]])
    g_coeffs, g_dir = sh.eval_radiance_vjp(c, 0, [0, 0, 1], [1.0])
    assert np.all(g_coeffs == 0) and np.all(g_dir == 0)
