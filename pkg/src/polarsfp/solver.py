"""Physics-based normal estimation: candidate generation and disambiguation."""

import heapq
from dataclasses import dataclass

import numpy as np

from polarsfp.errors import ConfigurationError, DimensionError
from polarsfp.fresnel import (
    DIFFUSE,
    SPECULAR,
    _dop_diffuse,
    _dop_specular,
    azimuth_candidates_ortho,
    bisect,
    normal_from_angles,
    polarization_projection,
    zenith_roots,
)
from polarsfp.polar import decompose
from polarsfp.scene import NormalMap

# Candidate slots; slot k and k ^ 1 form a pi-ambiguity pair.
SLOT_TYPES = (DIFFUSE, DIFFUSE, SPECULAR, SPECULAR, SPECULAR, SPECULAR)
SLOT_ROOTS = (0, 0, 0, 0, 1, 1)  # zenith root index within the reflection type
N_SLOTS = len(SLOT_TYPES)
PSI_SAMPLES = 720
VERIFY_TOL = 1e-6
PACK_SLOTS = (0, 1, 2, 4)
ICM_SWEEPS = 10


@dataclass
class CandidateField:
    """Per-pixel candidate normals (H, W, 6, 3) and a presence mask (H, W, 6).

    Slots follow :data:`SLOT_TYPES`; ``view`` holds the viewing direction per pixel.
    """

    normals: np.ndarray
    present: np.ndarray
    view: np.ndarray

    @property
    def valid(self):
        return self.present.any(axis=-1)

    @property
    def shape(self):
        return self.present.shape[:2]


def _orthographic_view(shape):
    return np.broadcast_to([0.0, 0.0, 1.0], shape + (3,)).copy()


def _reflections(reflection):
    if reflection in (None, "both"):
        return (DIFFUSE, SPECULAR)
    return ({"diffuse": DIFFUSE, "specular": SPECULAR}[str(getattr(reflection, "value", reflection))],)


def candidate_normals(stokes, view, eta, mode="perspective", reflection="both"):
    """Enumerate every normal consistent with each pixel's (rho, phi).

    Orthographic mode combines zenith roots with the four azimuth candidates.
    Perspective mode searches, for each zenith root, the cone of normals at that
    angle around the pixel's viewing direction for azimuths whose predicted AoP
    matches the measurement modulo pi. Every emitted candidate is re-checked
    against the forward model. Pixels whose DoP is below ``stokes.rho_min`` get the
    single candidate n = v.
    """
    shape = stokes.i_un.shape
    if mode == "orthographic" or view is None:
        if mode == "perspective":
            raise ConfigurationError("perspective candidates need a viewing-direction map")
        view = _orthographic_view(shape)
    elif mode != "perspective":
        raise ConfigurationError(f"unknown projection mode {mode!r}")
    view = np.asarray(view, dtype=float)
    if view.shape != shape + (3,):
        raise DimensionError(f"view map shape {view.shape} does not match image {shape}")
    types = _reflections(reflection)

    normals = np.zeros(shape + (N_SLOTS, 3))
    present = np.zeros(shape + (N_SLOTS,), dtype=bool)
    ys, xs = np.nonzero(stokes.valid)
    rho = stokes.rho[ys, xs]
    phi = stokes.phi[ys, xs]
    v = view[ys, xs]

    for rtype in types:
        roots = zenith_roots(rho, eta, rtype)
        base = 0 if rtype is DIFFUSE else 2
        for r, theta in enumerate(roots):
            slot = base + 2 * r
            ok = ~np.isnan(theta)
            if mode == "orthographic":
                alphas = azimuth_candidates_ortho(phi[ok])
                cols = (0, 1) if rtype is DIFFUSE else (2, 3)
                for side, col in enumerate(cols):
                    n = normal_from_angles(theta[ok], alphas[:, col])
                    normals[ys[ok], xs[ok], slot + side] = n
                    present[ys[ok], xs[ok], slot + side] = True
            else:
                idx = np.nonzero(ok)[0]
                for side, (sel, n) in enumerate(_cone_search(v[idx], theta[idx], phi[idx], rtype)):
                    normals[ys[idx[sel]], xs[idx[sel]], slot + side] = n
                    present[ys[idx[sel]], xs[idx[sel]], slot + side] = True

    present &= _verify(normals, present, stokes, view, eta)

    low = stokes.low_dop
    normals[low, 0] = view[low]
    present[low, 0] = True
    return CandidateField(normals, present, view)


def _cone_basis(v):
    e1 = np.stack([v[:, 2], np.zeros(len(v)), -v[:, 0]], axis=-1)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(v, e1)
    return e1, e2


def _cone_normal(psi, v, theta, e1, e2):
    ct, st = np.cos(theta)[..., None], np.sin(theta)[..., None]
    return ct * v + st * (np.cos(psi)[..., None] * e1 + np.sin(psi)[..., None] * e2)


def _xyz(a):
    return a[..., 0], a[..., 1], a[..., 2]


def _aop_residual(psi, v, theta, e1, e2, phi, rtype):
    """Zero iff the predicted in-image polarization vector is parallel to (cos phi, sin phi).

    Component-wise evaluation of Phi = (d x v) x n_c along the cone; it avoids
    stacking (pixels, samples, 3) temporaries in the 720-sample scan.
    """
    vx, vy, vz = _xyz(v)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    nx = ct * vx + st * (cp * e1[..., 0] + sp * e2[..., 0])
    ny = ct * vy + st * (cp * e1[..., 1] + sp * e2[..., 1])
    nz = ct * vz + st * (cp * e1[..., 2] + sp * e2[..., 2])
    # incidence-plane normal n x v
    ix, iy, iz = ny * vz - nz * vy, nz * vx - nx * vz, nx * vy - ny * vx
    if rtype is DIFFUSE:
        ix, iy, iz = iy * vz - iz * vy, iz * vx - ix * vz, ix * vy - iy * vx
    # (d x v) x n_c = ((d x v)_y, -(d x v)_x, 0)
    wx, wy = iy * vz - iz * vy, iz * vx - ix * vz
    big_x, big_y = wy, -wx
    return big_y * np.cos(phi) - big_x * np.sin(phi)


def _cone_search(v, theta, phi, rtype, chunk=2048):
    """Both azimuth roots on the cone for each pixel; returns [(selector, normals)] x 2."""
    m = len(v)
    out_n = np.zeros((2, m, 3))
    out_ok = np.zeros((2, m), dtype=bool)
    psi = np.linspace(0.0, 2 * np.pi, PSI_SAMPLES, endpoint=False)
    step = psi[1] - psi[0]
    for start in range(0, m, chunk):
        sl = slice(start, min(start + chunk, m))
        vv, tt, pp = v[sl], theta[sl], phi[sl]
        e1, e2 = _cone_basis(vv)
        g = _aop_residual(psi[None, :], vv[:, None], tt[:, None], e1[:, None], e2[:, None], pp[:, None], rtype)
        g_next = np.roll(g, -1, axis=1)
        change = (np.sign(g) != np.sign(g_next)) & (np.sign(g_next) != 0)
        for side in range(2):
            has = change.sum(axis=1) > side
            # position of the (side+1)-th sign change in each row
            order = np.cumsum(change, axis=1)
            col = np.argmax(order > side, axis=1)
            rows = np.nonzero(has)[0]
            col = col[rows]
            lo = psi[col]
            hi = lo + step
            args = (vv[rows], tt[rows], e1[rows], e2[rows], pp[rows], rtype)
            f = lambda x, a=args: _aop_residual(x, *a)
            root = _bisect_sign(f, lo, hi)
            out_n[side, start + rows] = _cone_normal(root, *args[:4])
            out_ok[side, start + rows] = True
    return [(out_ok[s], out_n[s, out_ok[s]]) for s in range(2)]


def _bisect_sign(func, lo, hi, tol=1e-13, maxiter=200):
    f_lo = func(lo)
    for _ in range(maxiter):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        f_mid = func(mid)
        left = np.sign(f_mid) == np.sign(f_lo)
        lo = np.where(left, mid, lo)
        f_lo = np.where(left, f_mid, f_lo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def forward_polarization(n, v, eta, rtype):
    """Predicted (rho, phi) of normals ``n`` seen along ``v``; phi is NaN when n is parallel to v."""
    cos_v = np.clip(np.sum(n * v, axis=-1), -1.0, 1.0)
    theta_v = np.arccos(cos_v)
    rho = _dop_diffuse(theta_v, eta) if rtype is DIFFUSE else _dop_specular(theta_v, eta)
    big = polarization_projection(n, v, rtype)
    mag = np.hypot(big[..., 0], big[..., 1])
    phi = np.where(mag > 1e-12, np.arctan2(big[..., 1], big[..., 0]), np.nan)
    return rho, np.mod(phi, np.pi), cos_v


def aop_distance(a, b):
    """Angular distance between two angles modulo pi."""
    d = np.mod(a - b, np.pi)
    return np.minimum(d, np.pi - d)


def _verify(normals, present, stokes, view, eta):
    ok = np.zeros_like(present)
    for k in range(N_SLOTS):
        m = present[..., k]
        if not np.any(m):
            continue
        n = normals[m, k]
        v = view[m]
        rho, phi, cos_v = forward_polarization(n, v, eta, SLOT_TYPES[k])
        rho_ok = np.abs(rho - stokes.rho[m]) < VERIFY_TOL
        phi_ok = np.isnan(phi) | (aop_distance(np.nan_to_num(phi), stokes.phi[m]) < VERIFY_TOL)
        ok[m, k] = rho_ok & phi_ok & (cos_v > 0)
    return ok


def pack_candidates(field):
    """Pack four candidate slots as 12 channels (C, H, W); missing candidates are zero."""
    chans = []
    for k in PACK_SLOTS:
        n = np.where(field.present[..., k, None], field.normals[..., k, :], 0.0)
        chans.append(n.transpose(2, 0, 1))
    return np.concatenate(chans)


def _angle(a, b):
    return np.arccos(np.clip(np.sum(a * b, axis=-1), -1.0, 1.0))


def disambiguate(field, strategy="smoothness", gt=None, sweeps=ICM_SWEEPS):
    """Choose one candidate per pixel.

    ``oracle`` picks the candidate closest to the ground truth ``gt`` and bounds
    what the physics alone can reach. ``smoothness`` starts from the candidate
    with the smallest viewing angle, makes each connected region consistent by
    best-first propagation, resolves each region's pi-ambiguity with an
    outward-facing-boundary prior and finishes with ICM sweeps over 4-neighbours.
    """
    h, w = field.shape
    valid = field.valid
    if strategy == "oracle":
        if gt is None:
            raise ConfigurationError("oracle disambiguation needs a ground-truth normal map")
        score = np.einsum("hwkc,hwc->hwk", field.normals, gt.normals)
        score = np.where(field.present, score, -np.inf)
        choice = np.argmax(score, axis=-1)
    elif strategy == "smoothness":
        choice = _smoothness(field, sweeps)
    else:
        raise ConfigurationError(f"unknown disambiguation strategy {strategy!r}")
    normals = np.take_along_axis(field.normals, choice[..., None, None], axis=2)[:, :, 0]
    normals = np.where(valid[..., None], normals, 0.0)
    return NormalMap(normals, valid.copy())


def _smoothness(field, sweeps):
    h, w = field.shape
    present, cands, valid = field.present, field.normals, field.valid
    facing = np.einsum("hwkc,hwc->hwk", cands, field.view)
    init = np.argmax(np.where(present, facing, -np.inf), axis=-1)
    choice = init.copy()
    assigned = np.zeros((h, w), dtype=bool)
    theta_init = np.take_along_axis(facing, init[..., None], axis=-1)[..., 0]

    neighbours = ((-1, 0), (1, 0), (0, -1), (0, 1))
    counter = 0
    # seeds in order of decreasing viewing angle (most decisive azimuth first)
    seeds = np.argsort(np.where(valid, theta_init, np.inf), axis=None, kind="stable")
    for flat in seeds:
        sy, sx = divmod(int(flat), w)
        if not valid[sy, sx] or assigned[sy, sx]:
            continue
        component = []
        heap = [(0.0, counter, sy, sx, int(init[sy, sx]))]
        while heap:
            _, _, y, x, k = heapq.heappop(heap)
            if assigned[y, x]:
                continue
            assigned[y, x] = True
            choice[y, x] = k
            component.append((y, x))
            ref = cands[y, x, k]
            for dy, dx in neighbours:
                qy, qx = y + dy, x + dx
                if 0 <= qy < h and 0 <= qx < w and valid[qy, qx] and not assigned[qy, qx]:
                    ang = np.where(present[qy, qx], _angle(cands[qy, qx], ref), np.inf)
                    order = np.argsort(ang, kind="stable")
                    gap = ang[order[1]] - ang[order[0]] if np.isfinite(ang[order[1]]) else np.pi
                    counter += 1
                    heapq.heappush(heap, (-gap, counter, qy, qx, int(order[0])))
        _resolve_flip(component, choice, field)

    for _ in range(sweeps):
        changed = False
        for color in (0, 1):
            changed |= _icm_pass(choice, field, color)
        if not changed:
            break
    return choice


def _resolve_flip(component, choice, field):
    """Swap the whole region to its pi-partners if that makes the silhouette face outward."""
    h, w = field.shape
    valid = field.valid
    ys, xs = np.array(component).T
    kept = np.zeros(2)
    for y, x in zip(ys, xs):
        ox = oy = 0.0
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            qy, qx = y + dy, x + dx
            if 0 <= qy < h and 0 <= qx < w and not valid[qy, qx]:
                ox += dx
                oy += dy
        if ox == 0 and oy == 0:
            continue
        k = choice[y, x]
        partner = k ^ 1 if field.present[y, x, k ^ 1] else k
        for i, kk in enumerate((k, partner)):
            n = field.normals[y, x, kk]
            kept[i] += n[0] * ox + n[1] * oy
    if kept[1] > kept[0]:
        k = choice[ys, xs]
        partner = k ^ 1
        has = field.present[ys, xs, partner]
        choice[ys, xs] = np.where(has, partner, k)


def _icm_pass(choice, field, color):
    h, w = field.shape
    valid = field.valid
    current = np.take_along_axis(field.normals, choice[..., None, None], axis=2)[:, :, 0]
    energy = np.zeros(field.present.shape)
    padded_n = np.pad(current, ((1, 1), (1, 1), (0, 0)))
    padded_v = np.pad(valid, 1)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded_n[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        nv = padded_v[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        ang = np.arccos(np.clip(np.einsum("hwkc,hwc->hwk", field.normals, nb), -1.0, 1.0))
        energy += np.where(nv[..., None], ang, 0.0)
    energy = np.where(field.present, energy, np.inf)
    best = np.argmin(energy, axis=-1)
    cur_e = np.take_along_axis(energy, choice[..., None], axis=-1)[..., 0]
    best_e = np.take_along_axis(energy, best[..., None], axis=-1)[..., 0]
    yy, xx = np.indices((h, w))
    update = valid & ((yy + xx) % 2 == color) & (best_e < cur_e - 1e-12)
    choice[update] = best[update]
    return bool(np.any(update))


def solve(stack, view, eta, mode="perspective", strategy="smoothness", gt=None, reflection="both",
          rho_min=1e-3, sweeps=ICM_SWEEPS):
    """decompose -> candidate_normals -> disambiguate."""
    stokes = decompose(stack, rho_min)
    field = candidate_normals(stokes, view, eta, mode, reflection)
    return disambiguate(field, strategy, gt=gt, sweeps=sweeps)
