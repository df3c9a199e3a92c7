"""Per-pixel viewing encodings: ray directions, normalized coordinates, frequency encoding."""

from dataclasses import dataclass

import numpy as np

from polarsfp.errors import ConfigurationError

DEFAULT_BANDS = 6
KINDS = ("v", "vc", "vp", "none")


@dataclass
class ViewingEncoding:
    channels: np.ndarray  # (C, H, W)
    kind: str
    bands: int = 0


def viewing_direction_map(cam, flip=False):
    """Unit surface-to-camera direction of every pixel, in the view frame.

    The principal point maps to exactly (0, 0, 1). ``flip`` negates the x/y
    components (camera-to-surface lateral convention).
    """
    u, v = cam.pixel_grid()
    x = -(u - cam.cx) / cam.fx
    y = -(v - cam.cy) / cam.fy
    if flip:
        x, y = -x, -y
    rays = np.stack([x, y, np.ones_like(x)])
    rays /= np.linalg.norm(rays, axis=0, keepdims=True)
    return ViewingEncoding(rays, "v")


def normalized_coords_map(width, height):
    if width < 2 or height < 2:
        raise ConfigurationError("normalized coordinates need width and height >= 2")
    u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return ViewingEncoding(np.stack([2 * u / (width - 1) - 1, 2 * v / (height - 1) - 1]), "vc")


def positional_encoding_map(coords, bands=DEFAULT_BANDS):
    """NeRF-style (sin 2^k pi x, cos 2^k pi x) for k < bands, per coordinate: 4*bands channels."""
    if bands < 1:
        raise ConfigurationError("positional encoding needs at least one band")
    out = []
    for x in coords.channels:
        for k in range(bands):
            arg = (2.0**k) * np.pi * x
            out.append(np.sin(arg))
            out.append(np.cos(arg))
    return ViewingEncoding(np.stack(out), "vp", bands)


def encode_view(kind, cam=None, width=None, height=None, bands=DEFAULT_BANDS):
    """Build the viewing encoding named by ``kind`` (one of v, vc, vp, none)."""
    if cam is not None:
        width, height = cam.width, cam.height
    if kind == "v":
        if cam is None:
            raise ConfigurationError("viewing encoding 'v' needs camera intrinsics")
        return viewing_direction_map(cam)
    if kind == "vc":
        return normalized_coords_map(width, height)
    if kind == "vp":
        return positional_encoding_map(normalized_coords_map(width, height), bands)
    if kind == "none":
        return ViewingEncoding(np.zeros((0, height, width)), "none")
    raise ConfigurationError(f"unknown viewing encoding {kind!r}")


def encoding_channels(kind, bands=DEFAULT_BANDS):
    return {"v": 3, "vc": 2, "vp": 4 * bands, "none": 0}[kind]
