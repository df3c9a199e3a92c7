"""Ground-truth preparation from depth captures: denoising, PCA normals, reprojection,
extrinsic refinement and validity masking.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from polarsfp.camera import optical_to_view
from polarsfp.errors import DimensionError, DomainError
from polarsfp.scene import NormalMap

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class PointCloud:
    points: np.ndarray  # (M, 3) optical frame, metres
    pixels: np.ndarray  # (M, 2) source (row, col)


@dataclass
class PrepConfig:
    k_neighbors: int = 30
    max_range: float = 5.0
    min_neighbors: int = 10
    density_radius: float = 0.02
    rot_bracket: float = np.deg2rad(2.0)
    trans_bracket: float = 0.01
    max_cycles: int = 50
    cycle_tol: float = 1e-6


def median_denoise(frames):
    """Per-pixel median over the frames where depth > 0.

    A pixel stays missing (0) only when it is missing in more than half of the
    frames. Even counts take the lower of the two central values.
    """
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[0] == 0:
        raise DimensionError("median_denoise needs at least one frame")
    n = frames.shape[0]
    present = frames > 0
    count = present.sum(axis=0)
    ordered = np.sort(np.where(present, frames, np.inf), axis=0)
    idx = np.maximum(count - 1, 0) // 2
    med = np.take_along_axis(ordered, idx[None], axis=0)[0]
    keep = (count > 0) & ((n - count) * 2 <= n)
    return np.where(keep, med, 0.0)


def depth_to_pointcloud(depth, cam):
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols]
    x = (cols - cam.cx) / cam.fx * z
    y = (rows - cam.cy) / cam.fy * z
    return PointCloud(np.column_stack([x, y, z]), np.column_stack([rows, cols]))


def pca_normals(cloud, k=30):
    """Smallest-eigenvector normals of each point's k-nearest-neighbour covariance.

    Normals face the camera (n . -p > 0). Neighbourhoods of rank < 2 are invalid.
    Returns (normals (M, 3), valid (M,)).
    """
    pts = cloud.points
    if not len(pts) > k >= 3:
        raise DomainError(f"pca_normals needs more than k >= 3 points (k={k}, points={len(pts)})")
    _, nbr = cKDTree(pts).query(pts, k=k)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    valid = evals[:, 1] > 1e-10 * np.maximum(evals[:, 2], 1e-300)
    flip = np.sum(normals * -pts, axis=1) < 0
    normals = np.where(flip[:, None], -normals, normals)
    return normals, valid


def neighbor_density(cloud, radius=0.02):
    """Number of other points within ``radius`` of each point."""
    tree = cKDTree(cloud.points)
    return tree.query_ball_point(cloud.points, r=radius, return_length=True) - 1


def relative_transform(src_cam, dst_cam):
    """(R, t) taking src-camera coords to dst-camera coords; both extrinsics are relative to the depth camera."""
    r_s, t_s = src_cam.rotation, np.asarray(src_cam.translation)
    r_d, t_d = dst_cam.rotation, np.asarray(dst_cam.translation)
    rot = r_d @ r_s.T
    return rot, t_d - rot @ t_s


def reproject_depth(depth, src_cam, dst_cam):
    """Forward-splat a depth map into another camera with a nearest-pixel z-buffer."""
    cloud = depth_to_pointcloud(depth, src_cam)
    rot, t = relative_transform(src_cam, dst_cam)
    pts = cloud.points @ rot.T + t
    out = np.full(dst_cam.shape, np.inf)
    front = pts[:, 2] > 0
    pts = pts[front]
    uv = dst_cam.project(pts)
    u = np.rint(uv[:, 0]).astype(int)
    v = np.rint(uv[:, 1]).astype(int)
    inside = (u >= 0) & (u < dst_cam.width) & (v >= 0) & (v < dst_cam.height)
    np.minimum.at(out, (v[inside], u[inside]), pts[inside, 2])
    return np.where(np.isfinite(out), out, 0.0)


def _standardize(x):
    std = x.std()
    return (x - x.mean()) / std if std > 0 else np.zeros_like(x)


@dataclass
class AlignmentObjective:
    """Photometric misalignment between the depth camera's gray image and I_un.

    Every valid depth pixel is moved into the polarization camera with the
    candidate extrinsics, where I_un is sampled bilinearly. Both intensity sets are
    standardized before taking the mean absolute difference. Points outside the
    polarization image or hidden behind nearer surfaces are excluded; ``freeze``
    fixes that set so the objective is continuous during a line search.
    """

    depth: np.ndarray
    gray: np.ndarray
    i_un: np.ndarray
    depth_cam: object
    pol_cam: object
    min_overlap: float = 0.01
    occlusion_margin: float = 0.02
    _cloud: PointCloud = field(init=False, repr=False)

    def __post_init__(self):
        self._cloud = depth_to_pointcloud(self.depth, self.depth_cam)
        rows, cols = self._cloud.pixels.T
        self._gray = self.gray[rows, cols]
        self._frozen = None

    def _project(self, params):
        params = np.asarray(params, dtype=float)
        rot = Rotation.from_rotvec(params[:3]).as_matrix()
        pts = self._cloud.points @ rot.T + params[3:]
        z = pts[:, 2]
        safe = np.where(z[:, None] > 0, pts, 1.0)
        uv = self.pol_cam.project(safe)
        return uv, z

    def usable(self, params):
        """Points that land inside the polarization image and are visible there."""
        uv, z = self._project(params)
        h, w = self.i_un.shape
        ok = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        cols = np.rint(uv[ok, 0]).astype(int)
        rows = np.rint(uv[ok, 1]).astype(int)
        zbuf = np.full((h, w), np.inf)
        np.minimum.at(zbuf, (rows, cols), z[ok])
        visible = z[ok] <= zbuf[rows, cols] + self.occlusion_margin
        ok[np.nonzero(ok)[0][~visible]] = False
        return ok

    def freeze(self, params=None):
        self._frozen = None if params is None else self.usable(params)

    def overlap(self, params):
        return self.usable(params).sum() / max(self.depth.size, 1)

    def correspondences(self, params):
        ok = self._frozen if self._frozen is not None else self.usable(params)
        uv, _ = self._project(params)
        sampled = map_coordinates(self.i_un, [uv[ok, 1], uv[ok, 0]], order=1, mode="nearest")
        return self._gray[ok], sampled

    def __call__(self, params):
        gray, pol = self.correspondences(params)
        if gray.size < self.min_overlap * self.depth.size or gray.size < 2:
            return np.inf
        return float(np.mean(np.abs(_standardize(gray) - _standardize(pol))))


def golden_section(func, lo, hi, tol=1e-7, maxiter=200):
    """Minimize a unimodal scalar function on [lo, hi]; returns (x, f(x))."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    for _ in range(maxiter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = func(d)
    return (c, fc) if fc <= fd else (d, fd)


@dataclass
class RefineResult:
    camera: object
    objective: float
    initial_objective: float
    cycles: int
    status: str  # "ok" | "infeasible" | "low-confidence"


def refine_extrinsics(depth_cam, pol_cam, depth, gray, i_un, config=None):
    """Coordinate descent over the six extrinsic parameters of ``pol_cam``.

    Each coordinate gets a golden-section line search over +/- its bracket
    around the current value; a move is kept only if it lowers the objective.
    Stops when a full cycle gains less than ``cycle_tol`` or after ``max_cycles``.
    """
    cfg = config or PrepConfig()
    objective = AlignmentObjective(depth, gray, i_un, depth_cam, pol_cam)
    x0 = pol_cam.extrinsic_params.copy()
    f0 = objective(x0)
    if not np.isfinite(f0):
        return RefineResult(pol_cam, f0, f0, 0, "infeasible")
    g, p = objective.correspondences(x0)
    if g.std() < 1e-12 or p.std() < 1e-12:
        return RefineResult(pol_cam, f0, f0, 0, "low-confidence")

    brackets = np.array([cfg.rot_bracket] * 3 + [cfg.trans_bracket] * 3)
    x, fx = x0.copy(), f0
    cycles = 0
    for cycles in range(1, cfg.max_cycles + 1):
        objective.freeze(x)
        f_start = objective(x)
        f_cycle = f_start
        for i in range(6):
            def line(s, i=i):
                trial = x.copy()
                trial[i] = s
                return objective(trial)

            s, fs = golden_section(line, x[i] - brackets[i], x[i] + brackets[i], tol=1e-6 * brackets[i])
            if fs < f_cycle:
                x[i] = s
                f_cycle = fs
        objective.freeze(None)
        fx = objective(x)
        if f_start - f_cycle < cfg.cycle_tol:
            break
    if not fx <= f0:
        return RefineResult(pol_cam, f0, f0, cycles, "ok")
    return RefineResult(pol_cam.with_extrinsics(x), fx, f0, cycles, "ok")


def postprocess_mask(normals, depth, density, max_range=5.0, min_neighbors=10):
    """Validity of ground-truth normals: depth present and in range, dense enough, PCA-valid."""
    valid = normals.valid & (depth > 0) & (depth <= max_range) & (density >= min_neighbors)
    return valid


def normal_map_from_depth(depth, cam, config=None):
    """PCA normals of a depth map, scattered back to pixels in the view frame.

    Returns (NormalMap, density map).
    """
    cfg = config or PrepConfig()
    cloud = depth_to_pointcloud(depth, cam)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    density = np.zeros((h, w), dtype=int)
    if len(cloud.points) > cfg.k_neighbors:
        n, ok = pca_normals(cloud, cfg.k_neighbors)
        rows, cols = cloud.pixels.T
        normals[rows, cols] = optical_to_view(n)
        valid[rows, cols] = ok
        density[rows, cols] = neighbor_density(cloud, cfg.density_radius)
    return NormalMap(normals, valid), density


def prepare_ground_truth(frames, depth_cam, pol_cam, gray=None, i_un=None, config=None):
    """Depth frames -> polarization-aligned ground-truth normals.

    Returns (NormalMap, aligned depth, RefineResult or None).
    """
    cfg = config or PrepConfig()
    depth = median_denoise(frames)
    refine = None
    if gray is not None and i_un is not None:
        refine = refine_extrinsics(depth_cam, pol_cam, depth, gray, i_un, cfg)
        pol_cam = refine.camera
    aligned = reproject_depth(depth, depth_cam, pol_cam)
    intrinsics_only = pol_cam.with_extrinsics(np.zeros(6))
    nm, density = normal_map_from_depth(aligned, intrinsics_only, cfg)
    valid = postprocess_mask(nm, aligned, density, cfg.max_range, cfg.min_neighbors)
    normals = np.where(valid[..., None], nm.normals, 0.0)
    return NormalMap(normals, valid), aligned, refine


def load_depth_frames(directory, fmt="pfm"):
    """Read every frame in ``directory``: 16-bit PNG in millimetres or PFM in metres."""
    from polarsfp.io import read_pfm

    directory = Path(directory)
    if fmt == "png":
        from PIL import Image

        paths = sorted(directory.glob("*.png"))
        frames = [np.asarray(Image.open(p), dtype=float) / 1000.0 for p in paths]
    elif fmt == "pfm":
        paths = sorted(directory.glob("*.pfm"))
        frames = [read_pfm(p).astype(float) for p in paths]
    else:
        raise DomainError(f"unknown depth format {fmt!r}")
    if not frames:
        raise DimensionError(f"no .{fmt} depth frames in {directory}")
    return np.stack(frames)
