import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarsfp.errors import DomainError
from polarsfp.fresnel import (
    DIFFUSE, SPECULAR, ReflectionType, aop_from_normal_perspective, azimuth_candidates_ortho, cross,
    diffuse_zenith_closed_form, dop, dop_diffuse, dop_specular, fresnel_table, normal_from_angles,
    polarization_projection, viewing_angle, zenith_from_dop, zenith_roots,
)

mp.mp.dps = 50


def mp_specular(theta, eta):
    s2 = mp.sin(theta) ** 2
    c = mp.cos(theta)
    return 2 * s2 * c * mp.sqrt(eta**2 - s2) / (eta**2 - s2 - eta**2 * s2 + 2 * s2**2)


def mp_diffuse(theta, eta):
    s2 = mp.sin(theta) ** 2
    c = mp.cos(theta)
    return (eta - 1 / eta) ** 2 * s2 / (2 + 2 * eta**2 - (eta + 1 / eta) ** 2 * s2 + 4 * c * mp.sqrt(eta**2 - s2))


def test_zero_incidence():
    assert dop_specular(0.0, 1.5) == 0.0
    assert dop_diffuse(0.0, 1.5) == 0.0


@pytest.mark.parametrize("eta", [1.1, 1.3, 1.5, 1.8, 2.0, 2.5])
def test_brewster_identity(eta):
    assert abs(dop_specular(np.arctan(eta), eta) - 1.0) < 1e-9


def test_specular_30deg_high_precision():
    ref = mp_specular(mp.radians(30), mp.mpf("1.5"))
    assert abs(dop_specular(np.radians(30.0), 1.5) - float(ref)) < 1e-14


def test_diffuse_grid_high_precision():
    for deg in (5, 30, 60, 85):
        ref = mp_diffuse(mp.radians(deg), mp.mpf("1.5"))
        assert abs(dop_diffuse(np.radians(deg), 1.5) - float(ref)) < 1e-14


def test_diffuse_grazing_limit():
    eta = mp.mpf("1.5")
    limit = (eta - 1 / eta) ** 2 / (2 + 2 * eta**2 - (eta + 1 / eta) ** 2)
    assert float(limit) == pytest.approx(0.3846, abs=1e-4)
    assert dop_diffuse(np.pi / 2 - 1e-9, 1.5) == pytest.approx(float(limit), abs=1e-7)


@pytest.mark.parametrize("eta", [1.3, 1.5, 1.8])
def test_diffuse_monotone(eta):
    rho = dop_diffuse(np.radians(np.arange(0, 89.0001, 0.1)), eta)
    assert np.all(np.diff(rho) > 0)


@pytest.mark.parametrize("eta", [1.1, 1.5, 2.5])
def test_specular_unimodal_at_brewster(eta):
    grid = np.radians(np.arange(0, 89.9, 0.1))
    rho = dop_specular(grid, eta)
    peak = np.argmax(rho)
    assert abs(grid[peak] - np.arctan(eta)) <= np.radians(0.1)
    assert np.all(np.diff(rho[:peak + 1]) > 0)
    assert np.all(np.diff(rho[peak:]) < 0)
    assert np.all((rho >= 0) & (rho <= 1 + 1e-12))


def test_dop_domain_errors():
    with pytest.raises(DomainError):
        dop_specular(np.pi / 2, 1.5)
    with pytest.raises(DomainError):
        dop_diffuse(0.3, 1.0)
    with pytest.raises(DomainError):
        dop_diffuse(-0.1, 1.5)
    with pytest.raises(DomainError):
        dop(0.2, 1.5, "glossy")


def test_reflection_parse():
    assert ReflectionType.parse("Diffuse") is DIFFUSE
    assert ReflectionType.parse(SPECULAR) is SPECULAR


def test_zenith_examples():
    assert zenith_from_dop(0.0, 1.5, "diffuse") == [0.0]
    rho = dop_diffuse(np.radians(30), 1.5)
    (theta,) = zenith_from_dop(rho, 1.5, DIFFUSE)
    assert abs(theta - np.radians(30)) < 1e-6


def test_specular_two_roots():
    roots = zenith_from_dop(0.9, 1.5, SPECULAR)
    assert len(roots) == 2
    lo, hi = roots
    assert lo < np.arctan(1.5) < hi
    for t in roots:
        assert abs(dop_specular(t, 1.5) - 0.9) < 1e-9


def test_unreachable_dop_gives_empty():
    assert zenith_from_dop(0.5, 1.5, DIFFUSE) == []
    with pytest.raises(DomainError):
        zenith_from_dop(1.2, 1.5, DIFFUSE)


def test_closed_form_inverts_diffuse_only():
    theta = np.radians(np.arange(1.0, 81.0))
    for eta in (1.3, 1.5, 1.8):
        back = diffuse_zenith_closed_form(dop_diffuse(theta, eta), eta)
        np.testing.assert_allclose(back, theta, atol=1e-9)
        wrong = diffuse_zenith_closed_form(dop_specular(theta, eta), eta)
        assert np.max(np.abs(wrong - theta)) > 0.1


@settings(max_examples=200, deadline=None)
@given(deg=st.floats(0.5, 80.0), eta=st.floats(1.2, 2.0))
def test_zenith_roundtrip_property(deg, eta):
    theta = np.radians(deg)
    (d,) = zenith_from_dop(float(dop_diffuse(theta, eta)), eta, DIFFUSE)
    assert abs(d - theta) < 1e-6
    roots = zenith_from_dop(float(dop_specular(theta, eta)), eta, SPECULAR)
    assert min(abs(r - theta) for r in roots) < 1e-6


def test_zenith_roots_vectorized_nan():
    out = zenith_roots(np.array([0.1, 0.6]), 1.5, DIFFUSE)
    assert out.shape == (1, 2)
    assert np.isfinite(out[0, 0]) and np.isnan(out[0, 1])


def test_normal_from_angles():
    np.testing.assert_allclose(normal_from_angles(0.0, 1.3), [0, 0, 1])
    np.testing.assert_allclose(normal_from_angles(np.pi / 2, 0.0), [1, 0, 0], atol=1e-16)
    rng = np.random.default_rng(0)
    n = normal_from_angles(rng.uniform(0, np.pi / 2, 500), rng.uniform(0, 2 * np.pi, 500))
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)


def test_viewing_angle():
    z = np.array([0.0, 0.0, 1.0])
    assert viewing_angle(z, z) == 0.0
    assert viewing_angle(z, np.array([1.0, 0, 0])) == pytest.approx(np.pi / 2)
    v = np.array([np.sin(np.radians(10)), 0, np.cos(np.radians(10))])
    assert viewing_angle(z, v) == pytest.approx(np.radians(10))
    with pytest.raises(DomainError):
        viewing_angle(np.array([0, 0, 1.1]), z)


def test_azimuth_candidates():
    c = np.degrees(azimuth_candidates_ortho(np.radians(30)))
    np.testing.assert_allclose(c, [30, 210, 120, 300])
    np.testing.assert_allclose(np.degrees(azimuth_candidates_ortho(0.0)), [0, 180, 90, 270])
    a = np.sort(azimuth_candidates_ortho(np.radians(40)))
    b = np.sort(azimuth_candidates_ortho(np.radians(220)))
    np.testing.assert_allclose(a, b, atol=1e-12)


def _circ_pi(a, b):
    d = np.mod(a - b, np.pi)
    return np.minimum(d, np.pi - d)


def test_orthographic_limit():
    rng = np.random.default_rng(7)
    theta = rng.uniform(0.01, 1.5, 2000)
    alpha = rng.uniform(0, 2 * np.pi, 2000)
    n = normal_from_angles(theta, alpha)
    v = np.broadcast_to([0.0, 0.0, 1.0], n.shape)
    assert _circ_pi(aop_from_normal_perspective(n, v, DIFFUSE), alpha).max() < 1e-9
    assert _circ_pi(aop_from_normal_perspective(n, v, SPECULAR), alpha + np.pi / 2).max() < 1e-9
    # agreement with the orthographic azimuth candidates
    phi = aop_from_normal_perspective(n, v, DIFFUSE)
    cands = azimuth_candidates_ortho(phi)
    hit = np.min(np.abs(np.mod(cands - alpha[:, None] + np.pi, 2 * np.pi) - np.pi), axis=1)
    assert hit.max() < 1e-9


def _random_pairs(rng, k):
    v = rng.normal(size=(k, 3))
    v[:, 2] = np.abs(v[:, 2]) + 1.0
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    n = v + 0.8 * rng.normal(size=(k, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    keep = np.sum(n * v, axis=1) > 0.05
    return n[keep], v[keep]


def test_projection_identities():
    rng = np.random.default_rng(11)
    n, v = _random_pairs(rng, 1000)
    for r in (DIFFUSE, SPECULAR):
        big = polarization_projection(n, v, r)
        assert np.all(big[:, 2] == 0.0)
        n_i = np.cross(n, v)
        d = n_i if r is SPECULAR else np.cross(n_i, v)
        # (d x v) x n_c is orthogonal to d x v
        np.testing.assert_allclose(np.sum(big * np.cross(d, v), axis=1), 0.0, atol=1e-12)


def test_rotation_about_optical_axis():
    rng = np.random.default_rng(5)
    n, v = _random_pairs(rng, 500)
    beta = 0.7
    rot = np.array([[np.cos(beta), -np.sin(beta), 0], [np.sin(beta), np.cos(beta), 0], [0, 0, 1]])
    for r in (DIFFUSE, SPECULAR):
        a = aop_from_normal_perspective(n, v, r)
        b = aop_from_normal_perspective(n @ rot.T, v @ rot.T, r)
        assert _circ_pi(b, a + beta).max() < 1e-9


def test_parallel_normal_raises():
    z = np.array([0.0, 0.0, 1.0])
    with pytest.raises(DomainError):
        aop_from_normal_perspective(z, z, DIFFUSE)


def test_cross_matches_numpy(rng):
    a, b = rng.normal(size=(2, 10, 3))
    np.testing.assert_allclose(cross(a, b), np.cross(a, b), atol=1e-15)


def test_fresnel_table():
    t = fresnel_table(1.5, "diffuse", 1.0, 89.0)
    assert t.shape == (90, 2)
    assert t[0, 1] == 0.0
    np.testing.assert_allclose(t[30, 1], dop_diffuse(np.radians(30), 1.5))
