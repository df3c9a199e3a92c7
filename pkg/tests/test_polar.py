import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarsfp.errors import ConfigurationError, DimensionError, DomainError
from polarsfp.polar import (
    MosaicImage, PolarizerStack, build_representation, decompose, demosaic, encode_aop, synthesize,
)


def stack_of(*values):
    return PolarizerStack(np.array(values, dtype=float).reshape(4, 1, 1))


def test_decompose_half_polarized_at_45():
    s = decompose(stack_of(1.0, 1.5, 1.0, 0.5))
    assert s.i_un[0, 0] == pytest.approx(1.0)
    assert s.rho[0, 0] == pytest.approx(0.5)
    assert s.phi[0, 0] == pytest.approx(np.pi / 4)
    assert s.valid[0, 0]


def test_decompose_unpolarized_is_invalid():
    s = decompose(stack_of(0.7, 0.7, 0.7, 0.7))
    assert s.i_un[0, 0] == pytest.approx(0.7)
    assert s.rho[0, 0] == 0.0
    assert not s.valid[0, 0]
    assert s.low_dop[0, 0]


def test_decompose_fully_polarized():
    s = decompose(stack_of(2, 1, 0, 1))
    assert (s.i_un[0, 0], s.rho[0, 0], s.phi[0, 0]) == pytest.approx((1.0, 1.0, 0.0))


def test_decompose_dark_pixel_masked():
    assert not decompose(stack_of(0, 0, 0, 0)).valid[0, 0]


def test_decompose_rho_clamp_and_reject():
    # raw rho = 1 + 5e-4 -> clamped; 1 + 0.01 -> invalid
    e = 5e-4
    s = decompose(stack_of(2 + 2 * e, 1, 0, 1))
    assert s.valid[0, 0] and s.rho[0, 0] == 1.0
    s = decompose(stack_of(2.02, 1.0, 0.0, 1.0))
    assert not s.valid[0, 0]


def test_synthesize_examples():
    one = np.ones((1, 1))
    np.testing.assert_allclose(synthesize(one, 0 * one, 0.3 * one).images.ravel(), [1, 1, 1, 1])
    np.testing.assert_allclose(synthesize(one, one, 0 * one).images.ravel(), [2, 1, 0, 1], atol=1e-15)


def test_synthesize_domain_errors():
    with pytest.raises(DomainError):
        synthesize(1.0, 1.2, 0.0)
    with pytest.raises(DomainError):
        synthesize(-1.0, 0.5, 0.0)


def test_stack_invariants():
    with pytest.raises(DimensionError):
        PolarizerStack(np.ones((3, 2, 2)))
    with pytest.raises(DomainError):
        PolarizerStack(-np.ones((4, 2, 2)))
    s = PolarizerStack(np.ones((4, 3, 5)))
    assert (s.height, s.width) == (3, 5)


@settings(max_examples=200, deadline=None)
@given(
    i_un=st.floats(1e-3, 1e3),
    rho=st.floats(2e-3, 1.0),
    phi=st.floats(0.0, np.pi, exclude_max=True),
)
def test_roundtrip_property(i_un, rho, phi):
    s = decompose(synthesize(*(np.full((1, 1), x) for x in (i_un, rho, phi))))
    assert s.valid.all()
    assert s.i_un.item() == pytest.approx(i_un, rel=1e-6)
    assert s.rho.item() == pytest.approx(rho, rel=1e-6)
    # phi is periodic; compare on the circle of period pi
    d = abs(s.phi.item() - phi)
    assert min(d, np.pi - d) < 1e-6 * max(1.0, phi)


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(1e-3, 1e3))
def test_scaling_invariance(scale):
    rng = np.random.default_rng(3)
    stack = synthesize(rng.uniform(0.1, 2, (4, 4)), rng.uniform(0.01, 1, (4, 4)), rng.uniform(0, np.pi, (4, 4)))
    a = decompose(stack)
    b = decompose(PolarizerStack(stack.images * scale))
    np.testing.assert_allclose(b.i_un, scale * a.i_un, rtol=1e-12)
    np.testing.assert_allclose(b.rho, a.rho, rtol=1e-10)
    np.testing.assert_allclose(b.phi, a.phi, atol=1e-10)


def test_stokes_array_roundtrip(rng):
    s = decompose(synthesize(rng.uniform(0.1, 2, (3, 4)), rng.uniform(0, 1, (3, 4)), rng.uniform(0, np.pi, (3, 4))))
    from polarsfp.polar import StokesMaps

    t = StokesMaps.from_array(s.to_array())
    np.testing.assert_array_equal(t.valid, s.valid)
    np.testing.assert_array_equal(t.rho, s.rho)


# -- demosaic

def test_demosaic_constant():
    for method in ("nearest", "bilinear"):
        st_ = demosaic(MosaicImage(np.full((6, 8), 0.4)), method)
        np.testing.assert_allclose(st_.images, 0.4)


def test_demosaic_single_cell_nearest():
    layout = (90, 45, 135, 0)
    raw = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = demosaic(MosaicImage(raw, layout), "nearest").images
    for pos, angle in enumerate(layout):
        k = (0, 45, 90, 135).index(angle)
        np.testing.assert_array_equal(out[k], raw.ravel()[pos])


def _bilinear_oracle(raw, layout):
    """Loop-based per-plane bilinear interpolation with edge clamping."""
    h, w = raw.shape
    out = np.zeros((4, h, w))
    for pos, angle in enumerate(layout):
        r, c = divmod(pos, 2)
        k = (0, 45, 90, 135).index(angle)
        plane = raw[r::2, c::2]
        ph, pw = plane.shape
        for y in range(h):
            for x in range(w):
                ly = min(max((y - r) / 2, 0), ph - 1)
                lx = min(max((x - c) / 2, 0), pw - 1)
                y0, x0 = int(np.floor(ly)), int(np.floor(lx))
                y1, x1 = min(y0 + 1, ph - 1), min(x0 + 1, pw - 1)
                fy, fx = ly - y0, lx - x0
                out[k, y, x] = ((1 - fy) * (1 - fx) * plane[y0, x0] + (1 - fy) * fx * plane[y0, x1]
                                + fy * (1 - fx) * plane[y1, x0] + fy * fx * plane[y1, x1])
    return out


def test_demosaic_bilinear_matches_oracle(rng):
    raw = rng.random((8, 8))
    for layout in ((90, 45, 135, 0), (0, 45, 135, 90)):
        got = demosaic(MosaicImage(raw, layout), "bilinear").images
        np.testing.assert_allclose(got, _bilinear_oracle(raw, layout), atol=1e-12)


def test_demosaic_preserves_samples(rng):
    raw = rng.random((6, 10))
    layout = (90, 45, 135, 0)
    for method in ("nearest", "bilinear"):
        out = demosaic(MosaicImage(raw, layout), method).images
        for pos, angle in enumerate(layout):
            r, c = divmod(pos, 2)
            k = (0, 45, 90, 135).index(angle)
            np.testing.assert_allclose(out[k, r::2, c::2], raw[r::2, c::2])


def test_demosaic_errors():
    with pytest.raises(DimensionError):
        MosaicImage(np.zeros((3, 4)))
    with pytest.raises(ConfigurationError):
        MosaicImage(np.zeros((2, 2)), (0, 0, 90, 135))
    with pytest.raises(ConfigurationError):
        demosaic(MosaicImage(np.zeros((2, 2))), "cubic")


# -- representations

def test_encode_aop_examples():
    np.testing.assert_allclose(encode_aop(np.array(0.0)), [1.0, 0.0])
    phi = np.linspace(0, np.pi, 7)
    np.testing.assert_allclose(encode_aop(phi), encode_aop(phi + np.pi), atol=1e-12)


def test_encode_aop_injective_on_half_turn():
    phi = np.linspace(0, np.pi, 1000, endpoint=False)
    enc = encode_aop(phi).T
    d = np.linalg.norm(enc[:, None] - enc[None], axis=-1)
    np.fill_diagonal(d, 1.0)
    assert d.min() > 1e-3


def test_build_representation_variants(rng):
    stack = synthesize(rng.uniform(0.5, 1, (4, 6)), rng.uniform(0.05, 0.5, (4, 6)), rng.uniform(0, np.pi, (4, 6)))
    s = decompose(stack)
    ours = build_representation(s, stack, "ours").channels
    assert ours.shape == (4, 4, 6)
    np.testing.assert_allclose(ours[1] ** 2 + ours[2] ** 2, 1.0)
    np.testing.assert_allclose(ours[0], s.i_un)
    np.testing.assert_allclose(ours[3], s.rho)
    assert build_representation(s, stack, "raw").channels.shape == (4, 4, 6)
    assert build_representation(s, stack, "kondo").channels.shape == (3, 4, 6)
    with pytest.raises(ConfigurationError):
        build_representation(s, stack, "candidates")
    with pytest.raises(ConfigurationError):
        build_representation(s, stack, "bogus")


def test_candidates_representation(sphere64_ortho):
    _, r = sphere64_ortho
    s = decompose(r.stack)
    rep = build_representation(s, r.stack, "candidates", eta=1.5,
                               view=np.broadcast_to([0.0, 0.0, 1.0], r.view.shape))
    assert rep.channels.shape == (12, 64, 64)
