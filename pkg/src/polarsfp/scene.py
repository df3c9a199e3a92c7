"""Analytic polarimetric scenes used as ground-truth oracles.

Geometry is given in the optical camera frame (x right, y down, z forward).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from polarsfp.camera import CameraModel, optical_to_view
from polarsfp.errors import ConfigurationError
from polarsfp.fresnel import GRAZING_CUTOFF, ReflectionType, _dop_diffuse, _dop_specular, polarization_projection
from polarsfp.polar import synthesize, wrap_pi
from polarsfp.viewing import viewing_direction_map

OBJECT_KEYS = {"type", "center", "radius", "point", "normal", "eta", "reflection", "albedo", "texture"}
SCENE_KEYS = {"camera", "objects", "projection", "ortho_scale"}


@dataclass
class SceneObject:
    kind: str  # "sphere" | "plane"
    eta: float = 1.5
    reflection: ReflectionType = ReflectionType.DIFFUSE
    albedo: float = 0.8
    center: tuple = (0.0, 0.0, 2.0)
    radius: float = 0.0  # sphere radius, or disk radius for planes (0 = unbounded)
    point: tuple = (0.0, 0.0, 2.0)
    normal: tuple = (0.0, 0.0, -1.0)
    texture: dict = field(default_factory=dict)

    def intersect(self, origins, dirs):
        """Ray parameter t of the first hit (inf if none) and the outward unit normal."""
        if self.kind == "sphere":
            c = np.asarray(self.center, dtype=float)
            oc = origins - c
            b = np.sum(oc * dirs, axis=-1)
            cc = np.sum(oc * oc, axis=-1) - self.radius**2
            disc = b * b - cc
            with np.errstate(invalid="ignore"):
                t = -b - np.sqrt(disc)
            t = np.where((disc >= 0) & (t > 0), t, np.inf)
            hit = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
            return t, (hit - c) / self.radius
        if self.kind == "plane":
            p0 = np.asarray(self.point, dtype=float)
            nrm = np.asarray(self.normal, dtype=float)
            nrm = nrm / np.linalg.norm(nrm)
            denom = dirs @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((p0 - origins) @ nrm) / denom
            t = np.where(np.isfinite(t) & (t > 0), t, np.inf)
            if self.radius > 0:
                hit = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
                t = np.where(np.linalg.norm(hit - p0, axis=-1) <= self.radius, t, np.inf)
            # face the incoming ray
            sign = np.where(denom > 0, -1.0, 1.0)
            return t, sign[..., None] * nrm
        raise ConfigurationError(f"unknown object type {self.kind!r}")

    def shade(self, points):
        """Albedo, optionally modulated by a smooth procedural texture of 3D position."""
        amp = float(self.texture.get("amplitude", 0.0))
        if amp == 0.0:
            return np.full(points.shape[:-1], self.albedo)
        freq = np.asarray(self.texture.get("frequency", (8.0, 8.0, 8.0)), dtype=float)
        phase = np.asarray(self.texture.get("phase", (0.0, 0.7, 1.3)), dtype=float)
        pattern = np.sin(freq[0] * points[..., 0] + phase[0]) * np.cos(freq[1] * points[..., 1] + phase[1])
        pattern = pattern + 0.5 * np.sin(freq[2] * (points[..., 0] + points[..., 1] + points[..., 2]) + phase[2])
        return self.albedo * (1.0 + amp * pattern / 1.5)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - OBJECT_KEYS
        if unknown:
            raise ConfigurationError(f"unknown object keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("eta", "albedo", "radius") if k in d}
        for k in ("center", "point", "normal"):
            if k in d:
                kw[k] = tuple(float(x) for x in d[k])
        if "reflection" in d:
            kw["reflection"] = ReflectionType.parse(d["reflection"])
        if "texture" in d:
            kw["texture"] = dict(d["texture"])
        return cls(kind=d["type"], **kw)

    def to_dict(self):
        d = {"type": self.kind, "eta": self.eta, "reflection": self.reflection.value, "albedo": self.albedo}
        if self.kind == "sphere":
            d.update(center=list(self.center), radius=self.radius)
        else:
            d.update(point=list(self.point), normal=list(self.normal))
            if self.radius:
                d["radius"] = self.radius
        if self.texture:
            d["texture"] = self.texture
        return d


@dataclass
class SyntheticScene:
    camera: CameraModel
    objects: list
    projection: str = "perspective"
    ortho_scale: float = 2.0  # depth whose footprint sets the orthographic pixel size

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - SCENE_KEYS
        if unknown:
            raise ConfigurationError(f"unknown scene keys: {sorted(unknown)}")
        if not d.get("objects"):
            raise ConfigurationError("scene has no objects")
        return cls(
            camera=CameraModel.from_dict(d["camera"]),
            objects=[SceneObject.from_dict(o) for o in d["objects"]],
            projection=d.get("projection", "perspective"),
            ortho_scale=float(d.get("ortho_scale", 2.0)),
        )

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return {
            "camera": self.camera.to_dict(),
            "projection": self.projection,
            "ortho_scale": self.ortho_scale,
            "objects": [o.to_dict() for o in self.objects],
        }


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3), view frame
    valid: np.ndarray  # (H, W) bool

    def to_array(self):
        """(3, H, W) with invalid pixels zeroed, as stored in PSFP files."""
        return np.where(self.valid[..., None], self.normals, 0.0).transpose(2, 0, 1)

    @classmethod
    def from_array(cls, array):
        normals = np.asarray(array, dtype=float).transpose(1, 2, 0)
        norm = np.linalg.norm(normals, axis=-1)
        valid = norm > 0.5
        normals = np.where(valid[..., None], normals / np.where(valid, norm, 1.0)[..., None], 0.0)
        return cls(normals, valid)


@dataclass
class Rendering:
    stack: object  # PolarizerStack
    normals: NormalMap
    depth: np.ndarray  # optical-frame z, 0 on background
    view: np.ndarray  # (H, W, 3) viewing directions
    i_un: np.ndarray
    rho: np.ndarray
    phi: np.ndarray
    theta_v: np.ndarray


def camera_rays(cam, projection, ortho_scale=2.0):
    """Ray origins and unit directions (H, W, 3) in the optical frame, plus view-frame v."""
    u, v = cam.pixel_grid()
    x = (u - cam.cx) / cam.fx
    y = (v - cam.cy) / cam.fy
    if projection == "perspective":
        dirs = np.stack([x, y, np.ones_like(x)], axis=-1)
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.zeros_like(dirs)
        view = viewing_direction_map(cam).channels.transpose(1, 2, 0)
    elif projection == "orthographic":
        origins = np.stack([x * ortho_scale, y * ortho_scale, np.zeros_like(x)], axis=-1)
        dirs = np.broadcast_to([0.0, 0.0, 1.0], origins.shape).copy()
        view = np.broadcast_to([0.0, 0.0, 1.0], origins.shape).copy()
    else:
        raise ConfigurationError(f"unknown projection {projection!r}")
    return origins, dirs, view


def raycast_camera(objects, cam):
    """Depth (camera-frame z) and shaded albedo seen by ``cam``.

    Geometry is expressed in the reference (depth-camera) frame and the camera's
    extrinsics map reference coordinates into its own frame.
    """
    rot = cam.rotation
    t = np.asarray(cam.translation)
    origins, dirs, _ = camera_rays(cam, "perspective")
    centre = -rot.T @ t
    ref_dirs = dirs @ rot
    ref_origins = np.broadcast_to(centre, dirs.shape)
    t_best = np.full(cam.shape, np.inf)
    idx = np.full(cam.shape, -1)
    for i, obj in enumerate(objects):
        tt, _ = obj.intersect(ref_origins, ref_dirs)
        closer = tt < t_best
        t_best = np.where(closer, tt, t_best)
        idx = np.where(closer, i, idx)
    hit = np.isfinite(t_best)
    pts = ref_origins + np.where(hit, t_best, 0.0)[..., None] * ref_dirs
    shade = np.zeros(cam.shape)
    for i, obj in enumerate(objects):
        m = idx == i
        if np.any(m):
            shade[m] = obj.shade(pts[m])
    depth = np.where(hit, t_best * dirs[..., 2], 0.0)
    return depth, shade


def render_scene(scene, projection=None):
    """Render the four polarizer images and the ground-truth normal map of a scene.

    Grazing pixels (viewing angle at or beyond 89.9 deg) and background are masked.
    """
    projection = projection or scene.projection
    cam = scene.camera
    origins, dirs, view = camera_rays(cam, projection, scene.ortho_scale)
    h, w = cam.shape
    t_best = np.full((h, w), np.inf)
    n_best = np.zeros((h, w, 3))
    obj_idx = np.full((h, w), -1)
    for i, obj in enumerate(scene.objects):
        t, nrm = obj.intersect(origins, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        n_best = np.where(closer[..., None], nrm, n_best)
        obj_idx = np.where(closer, i, obj_idx)
    hit = np.isfinite(t_best)
    points = origins + np.where(hit, t_best, 0.0)[..., None] * dirs

    normals = optical_to_view(n_best)
    cos_v = np.clip(np.sum(normals * view, axis=-1), -1.0, 1.0)
    theta_v = np.arccos(cos_v)
    valid = hit & (theta_v < GRAZING_CUTOFF)

    i_un = np.zeros((h, w))
    rho = np.zeros((h, w))
    phi = np.zeros((h, w))
    for i, obj in enumerate(scene.objects):
        m = valid & (obj_idx == i)
        if not np.any(m):
            continue
        i_un[m] = obj.shade(points[m])
        if obj.reflection is ReflectionType.DIFFUSE:
            rho[m] = _dop_diffuse(theta_v[m], obj.eta)
        else:
            rho[m] = _dop_specular(theta_v[m], obj.eta)
        big_phi = polarization_projection(normals[m], view[m], obj.reflection)
        phi[m] = wrap_pi(np.arctan2(big_phi[:, 1], big_phi[:, 0]))
    rho = np.clip(rho, 0.0, 1.0)
    stack = synthesize(i_un, rho, phi)
    depth = np.where(hit, points[..., 2], 0.0)
    return Rendering(
        stack=stack,
        normals=NormalMap(np.where(valid[..., None], normals, 0.0), valid),
        depth=depth,
        view=view,
        i_un=i_un,
        rho=rho,
        phi=phi,
        theta_v=theta_v,
    )


def sphere_scene(size=64, radius=0.8, depth=2.0, eta=1.5, reflection="diffuse", focal=None, albedo=0.8):
    """A single sphere centred on the optical axis, filling most of the frame."""
    focal = focal if focal is not None else 1.1 * size
    cam = CameraModel(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size)
    obj = SceneObject("sphere", eta=eta, reflection=ReflectionType.parse(reflection), albedo=albedo,
                      center=(0.0, 0.0, depth), radius=radius)
    return SyntheticScene(cam, [obj], ortho_scale=depth)


def plane_scene(size=64, normal=(0.3, -0.2, -1.0), depth=2.0, eta=1.5, reflection="diffuse", albedo=0.8,
                focal=None):
    focal = focal if focal is not None else 1.1 * size
    cam = CameraModel(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size)
    obj = SceneObject("plane", eta=eta, reflection=ReflectionType.parse(reflection), albedo=albedo,
                      point=(0.0, 0.0, depth), normal=tuple(normal))
    return SyntheticScene(cam, [obj], ortho_scale=depth)


def random_scene(rng, size=64, n_spheres=3):
    """A random composite of a tilted backdrop plane and a few spheres, used for training data."""
    focal = 1.1 * size
    cam = CameraModel(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size)
    tilt = rng.uniform(-0.4, 0.4, size=2)
    objects = [
        SceneObject(
            "plane", eta=float(rng.uniform(1.4, 1.7)),
            reflection=ReflectionType.DIFFUSE, albedo=float(rng.uniform(0.4, 0.9)),
            point=(0.0, 0.0, 4.0), normal=(float(tilt[0]), float(tilt[1]), -1.0),
            texture={"amplitude": 0.3, "frequency": [float(f) for f in rng.uniform(2, 6, size=3)]},
        )
    ]
    for _ in range(n_spheres):
        z = rng.uniform(2.0, 3.5)
        r = rng.uniform(0.3, 0.7)
        xy = rng.uniform(-0.9, 0.9, size=2) * z / 1.1
        refl = ReflectionType.SPECULAR if rng.uniform() < 0.3 else ReflectionType.DIFFUSE
        objects.append(SceneObject(
            "sphere", eta=float(rng.uniform(1.4, 1.7)), reflection=refl,
            albedo=float(rng.uniform(0.3, 1.0)), center=(float(xy[0]), float(xy[1]), float(z)), radius=float(r),
        ))
    return SyntheticScene(cam, objects)
