"""Shared synthetic fixtures that are too heavy or too parameterized for conftest."""

import numpy as np
from scipy.spatial.transform import Rotation

from polarsfp.camera import CameraModel
from polarsfp.scene import SceneObject, raycast_camera


def _tex(freq, phase):
    return {"amplitude": 0.8, "frequency": freq, "phase": phase}


TRUE_EXTRINSICS = np.array([0.01, -0.02, 0.015, 0.05, 0.002, -0.01])


def textured_rig(scale=1.0):
    """Depth camera and a displaced polarization camera viewing three textured objects.

    Returns (depth_cam, pol_cam at the true pose, depth, gray, i_un).
    """
    objs = [
        SceneObject("plane", point=(0, 0, 3.0), normal=(0.2, 0.1, -1), texture=_tex([6, 5, 4], [0, 0.7, 1.3])),
        SceneObject("plane", point=(-0.3, 0.1, 1.2), normal=(0.3, -0.2, -1), radius=0.45,
                    texture=_tex([9, 7, 5], [0.3, 0.2, 0.1])),
        SceneObject("sphere", center=(0.45, -0.2, 1.8), radius=0.35, texture=_tex([10, 8, 6], [1, 2, 3])),
    ]
    w, h = int(160 * scale), int(120 * scale)
    dcam = CameraModel(160 * scale, 160 * scale, (w - 1) / 2, (h - 1) / 2, w, h)
    pw, ph = int(160 * scale), int(128 * scale)
    pcam = CameraModel(180 * scale, 180 * scale, 80 * scale, 64 * scale, pw, ph).with_extrinsics(TRUE_EXTRINSICS)
    depth, gray = raycast_camera(objs, dcam)
    _, i_un = raycast_camera(objs, pcam)
    return dcam, pcam, depth, gray, i_un


def perturb(params, rng, angle_deg, shift_m):
    """Rotate by ``angle_deg`` about a random axis and translate by ``shift_m`` in a random direction."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    rot = Rotation.from_rotvec(np.deg2rad(angle_deg) * axis) * Rotation.from_rotvec(params[:3])
    return np.concatenate([rot.as_rotvec(), params[3:] + shift_m * d])


def pose_error(a, b):
    """(rotation error in degrees, translation error in mm) between two extrinsic vectors."""
    rot = Rotation.from_rotvec(a[:3]) * Rotation.from_rotvec(b[:3]).inv()
    return float(np.degrees(rot.magnitude())), float(1000 * np.linalg.norm(a[3:] - b[3:]))


# (criterion id, passed, detail) rows printed by the terminal-summary hook in conftest
ACCEPTANCE = []


def record(cid, title, ok, detail):
    ACCEPTANCE.append((cid, title, bool(ok), detail))
    print(f"{cid} {'PASS' if ok else 'FAIL'} {title}: {detail}")
    return ok
