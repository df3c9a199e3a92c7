"""File formats: PFM float maps and the PSFP multi-channel tensor container."""

import re
import struct
from pathlib import Path

import numpy as np

PSFP_MAGIC = b"PSFP"
PSFP_VERSION = 1


class FormatError(ValueError):
    pass


def write_pfm(path, image):
    """Write a 2D (grayscale) or HxWx3 float map as little-endian PFM.

    Rows are stored bottom-to-top as the format requires.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        tag = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"PFM holds 1 or 3 channels, got shape {image.shape}")
    height, width = image.shape[:2]
    payload = np.ascontiguousarray(np.flipud(image)).astype("<f4")
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{width} {height}\n".encode())
        f.write(b"-1.0\n")
        f.write(payload.tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        tag = f.readline().rstrip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: not a PFM file")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", f.readline())
        if dims is None:
            raise FormatError(f"{path}: malformed PFM header")
        width, height = map(int, dims.groups())
        scale = float(f.readline().rstrip())
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(f.read(4 * count), dtype=dtype)
    if data.size != count:
        raise FormatError(f"{path}: truncated PFM payload")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_psfp(path, array):
    """Write an n-d float array: magic, u32 version, u32 ndim, u32 dims, f32 LE row-major."""
    array = np.ascontiguousarray(array, dtype="<f4")
    header = PSFP_MAGIC + struct.pack("<II", PSFP_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes())


def read_psfp(path):
    raw = Path(path).read_bytes()
    if raw[:4] != PSFP_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != PSFP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - offset != 4 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)
