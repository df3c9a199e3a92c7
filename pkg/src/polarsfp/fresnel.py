"""Fresnel relations between surface geometry, refractive index and polarization.

Normals and viewing directions are unit vectors in the view frame (see
:mod:`polarsfp.camera`); the viewing direction points from the surface to the camera.
"""

import enum

import numpy as np

from polarsfp.errors import DomainError

GRAZING_CUTOFF = np.deg2rad(89.9)
BISECT_TOL = 1e-12
BISECT_MAXITER = 200
ROOT_TOL = 1e-9
UNIT_TOL = 1e-6


class ReflectionType(enum.Enum):
    DIFFUSE = "diffuse"
    SPECULAR = "specular"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown reflection type {value!r}") from None


DIFFUSE = ReflectionType.DIFFUSE
SPECULAR = ReflectionType.SPECULAR
# tags of the four orthographic azimuth candidates, in order
AZIMUTH_TYPES = (DIFFUSE, DIFFUSE, SPECULAR, SPECULAR)


def _check_args(theta_v, eta):
    theta_v = np.asarray(theta_v, dtype=float)
    if np.any(eta <= 1):
        raise DomainError(f"refractive index must exceed 1, got {eta}")
    if np.any(theta_v < 0) or np.any(theta_v >= np.pi / 2):
        raise DomainError("viewing angle must lie in [0, pi/2)")
    return theta_v


def _dop_specular(theta_v, eta):
    s2 = np.sin(theta_v) ** 2
    c = np.cos(theta_v)
    num = 2.0 * s2 * c * np.sqrt(eta**2 - s2)
    den = eta**2 - s2 - eta**2 * s2 + 2.0 * s2**2
    return num / den


def _dop_diffuse(theta_v, eta):
    s2 = np.sin(theta_v) ** 2
    c = np.cos(theta_v)
    num = (eta - 1.0 / eta) ** 2 * s2
    den = 2.0 + 2.0 * eta**2 - (eta + 1.0 / eta) ** 2 * s2 + 4.0 * c * np.sqrt(eta**2 - s2)
    return num / den


def dop_specular(theta_v, eta):
    """Degree of polarization of specularly reflected light.

    Zero at normal incidence, one at the Brewster angle ``arctan(eta)``.
    """
    return _dop_specular(_check_args(theta_v, eta), eta)


def dop_diffuse(theta_v, eta):
    """Degree of polarization of diffusely reflected light; increases monotonically with theta_v."""
    return _dop_diffuse(_check_args(theta_v, eta), eta)


def dop(theta_v, eta, reflection):
    if ReflectionType.parse(reflection) is DIFFUSE:
        return dop_diffuse(theta_v, eta)
    return dop_specular(theta_v, eta)


def diffuse_zenith_closed_form(rho, eta):
    """Closed-form inverse of the diffuse DoP curve (cos of the viewing angle under a sqrt).

    Only the diffuse curve is inverted by this expression; the specular curve has
    two branches and is handled by bisection.
    """
    rho = np.asarray(rho, dtype=float)
    root = np.sqrt(np.clip(1.0 - rho**2, 0.0, None))
    num = (eta**4 * (1 - rho**2) + 2 * eta**2 * (2 * rho**2 + rho - 1) + rho**2 + 2 * rho
           - 4 * eta**3 * rho * root + 1)
    den = (rho + 1) ** 2 * (eta**4 + 1) + 2 * eta**2 * (3 * rho**2 + 2 * rho - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.arccos(np.clip(np.sqrt(num / den), -1.0, 1.0))


def bisect(func, lo, hi, target, tol=BISECT_TOL, maxiter=BISECT_MAXITER):
    """Vectorized bisection for ``func(x) == target`` on brackets [lo, hi].

    ``func(lo) - target`` and ``func(hi) - target`` must differ in sign (or vanish).
    """
    lo, hi, target = np.broadcast_arrays(*(np.array(x, dtype=float) for x in (lo, hi, target)))
    lo, hi = lo.copy(), hi.copy()
    f_lo = func(lo) - target
    for _ in range(maxiter):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        f_mid = func(mid) - target
        left = np.sign(f_mid) == np.sign(f_lo)
        lo = np.where(left, mid, lo)
        f_lo = np.where(left, f_mid, f_lo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def zenith_roots(rho, eta, reflection):
    """Vectorized zenith inversion.

    Returns an array of shape (k,) + rho.shape with NaN where a root does not
    exist: k=1 for diffuse, k=2 for specular (below / above Brewster).
    """
    reflection = ReflectionType.parse(reflection)
    rho = np.asarray(rho, dtype=float)
    if eta <= 1:
        raise DomainError(f"refractive index must exceed 1, got {eta}")
    if reflection is DIFFUSE:
        return _diffuse_roots(rho, eta)[None]
    brewster = np.arctan(eta)
    f = lambda t: _dop_specular(t, eta)
    ok = (rho >= 0) & (rho <= 1)
    low = bisect(f, 0.0, brewster, np.where(ok, rho, 0.5))
    rho_floor = _dop_specular(GRAZING_CUTOFF, eta)
    ok_high = ok & (rho > rho_floor) & (rho < 1.0)
    # the descending branch: negate so the function increases
    high = bisect(lambda t: -f(t), brewster, GRAZING_CUTOFF, np.where(ok_high, -rho, -0.5))
    low = np.where(ok, low, np.nan)
    low = np.where(ok & (rho == 0), 0.0, low)
    low = np.where(ok & (rho == 1), brewster, low)
    high = np.where(ok_high, high, np.nan)
    return np.stack([low, high])


def _diffuse_roots(rho, eta):
    rho_max = _dop_diffuse(GRAZING_CUTOFF, eta)
    ok = (rho >= 0) & (rho <= rho_max)
    closed = diffuse_zenith_closed_form(np.where(ok, rho, 0.0), eta)
    good = np.abs(_dop_diffuse(closed, eta) - rho) < ROOT_TOL
    theta = closed
    if not np.all(good | ~ok):
        refined = bisect(lambda t: _dop_diffuse(t, eta), 0.0, GRAZING_CUTOFF, np.where(ok, rho, 0.0))
        theta = np.where(good, closed, refined)
    return np.where(ok, theta, np.nan)


def zenith_from_dop(rho, eta, reflection):
    """All viewing angles in [0, 89.9 deg) whose DoP equals ``rho``.

    Diffuse yields at most one root, specular up to two (one on each side of the
    Brewster angle). An empty list means ``rho`` is unreachable for this model.
    """
    if not 0 <= rho <= 1:
        raise DomainError("degree of polarization must lie in [0, 1]")
    roots = zenith_roots(np.float64(rho), eta, reflection)
    out = []
    for theta in roots:
        theta = float(theta)
        if np.isnan(theta) or any(abs(theta - t) < 1e-9 for t in out):
            continue
        out.append(theta)
    return out


def normal_from_angles(theta, alpha):
    """Unit normal (sin t cos a, sin t sin a, cos t) from zenith and azimuth."""
    theta = np.asarray(theta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(alpha), st * np.sin(alpha), np.cos(theta) + 0 * alpha], axis=-1)


def viewing_angle(n, v):
    n = np.asarray(n, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1) > UNIT_TOL) or np.any(
        np.abs(np.linalg.norm(v, axis=-1) - 1) > UNIT_TOL
    ):
        raise DomainError("viewing_angle expects unit vectors")
    return np.arccos(np.clip(np.sum(n * v, axis=-1), -1.0, 1.0))


def azimuth_candidates_ortho(phi):
    """The four azimuths compatible with AoP ``phi`` under orthographic viewing.

    Returns an array (..., 4) ordered (phi, phi + pi, phi + pi/2, phi - pi/2),
    wrapped to [0, 2 pi); tags are :data:`AZIMUTH_TYPES`.
    """
    phi = np.asarray(phi, dtype=float)
    out = np.stack([phi, phi + np.pi, phi + np.pi / 2, phi - np.pi / 2], axis=-1)
    out = np.mod(out, 2 * np.pi)
    return np.where(out >= 2 * np.pi, 0.0, out)


def cross(a, b):
    """np.cross for (..., 3) arrays without its axis shuffling overhead."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def _cross_nc(a):
    # a x (0, 0, 1)
    return np.stack([a[..., 1], -a[..., 0], np.zeros_like(a[..., 0])], axis=-1)


def polarization_projection(n, v, reflection):
    """The in-image polarization vector Phi = (d x v) x n_c (zero z component).

    The polarization direction d is the incidence-plane normal n x v when it is
    perpendicular to the incidence plane (specular) and (n x v) x v when parallel
    (diffuse). Degenerate pixels (n parallel to v) give Phi = 0.
    """
    n = np.asarray(n, dtype=float)
    v = np.asarray(v, dtype=float)
    n_i = cross(n, v)
    if ReflectionType.parse(reflection) is DIFFUSE:
        d = cross(n_i, v)
    else:
        d = n_i
    return _cross_nc(cross(d, v))


def aop_from_normal_perspective(n, v, reflection, degenerate_tol=1e-12):
    """Angle of polarization in [0, pi) predicted for normal ``n`` seen along ``v``.

    Raises DomainError when n is parallel to v (no incidence plane).
    """
    n = np.asarray(n, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(np.linalg.norm(np.cross(n, v), axis=-1) < degenerate_tol):
        raise DomainError("normal parallel to viewing direction: incidence plane undefined")
    big_phi = polarization_projection(n, v, reflection)
    return _wrap_pi(np.arctan2(big_phi[..., 1], big_phi[..., 0]))


def _wrap_pi(angle):
    out = np.mod(angle, np.pi)
    return np.where(out >= np.pi, 0.0, out)


def fresnel_table(eta, reflection, step_deg=1.0, max_deg=89.0):
    """Rows of (theta_v in degrees, rho) sampled on a uniform grid."""
    thetas = np.arange(0.0, max_deg + 1e-9, step_deg)
    rhos = dop(np.deg2rad(thetas), eta, reflection)
    return np.column_stack([thetas, rhos])
