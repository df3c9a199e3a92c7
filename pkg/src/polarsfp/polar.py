"""Polarizer-image decomposition, synthesis, demosaicing and network input representations."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from polarsfp.errors import ConfigurationError, DimensionError, DomainError

POLARIZER_ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)
RHO_MIN = 1e-3
RHO_CLAMP = 1e-3
# Sensor 2x2 cell, row-major, in degrees. Sony polarsens parts ship this order.
DEFAULT_LAYOUT = (90, 45, 135, 0)
VARIANTS = ("ours", "raw", "kondo", "candidates")


@dataclass
class PolarizerStack:
    """Four co-registered intensity maps at polarizer angles 0, 45, 90 and 135 degrees.

    ``images`` has shape (4, H, W) in that angle order.
    """

    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 3 or self.images.shape[0] != 4:
            raise DimensionError(f"expected (4, H, W) stack, got {self.images.shape}")
        if np.any(self.images < 0):
            raise DomainError("polarizer intensities must be non-negative")

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]


@dataclass
class StokesMaps:
    i_un: np.ndarray
    rho: np.ndarray
    phi: np.ndarray
    valid: np.ndarray
    rho_min: float = RHO_MIN

    @property
    def low_dop(self):
        """Pixels masked only because their DoP is below ``rho_min``."""
        return ~self.valid & (self.i_un > 0) & (self.rho < self.rho_min)

    def to_array(self):
        return np.stack([self.i_un, self.rho, self.phi, self.valid.astype(float)])

    @classmethod
    def from_array(cls, array, rho_min=RHO_MIN):
        array = np.asarray(array, dtype=float)
        if array.ndim != 3 or array.shape[0] != 4:
            raise DimensionError(f"expected (4, H, W) Stokes array, got {array.shape}")
        return cls(array[0], array[1], array[2], array[3] > 0.5, rho_min)


@dataclass
class PolarRepresentation:
    channels: np.ndarray  # (C, H, W)
    variant: str


@dataclass
class MosaicImage:
    raw: np.ndarray
    layout: tuple = DEFAULT_LAYOUT

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        h, w = self.raw.shape
        if h % 2 or w % 2:
            raise DimensionError(f"mosaic dimensions must be even, got {h}x{w}")
        if sorted(self.layout) != [0, 45, 90, 135]:
            raise ConfigurationError(f"layout must be a permutation of 0/45/90/135, got {self.layout}")


def demosaic(mosaic, method="bilinear"):
    """Split a polarization filter-array image into a full-resolution PolarizerStack.

    ``nearest`` replicates each 2x2 cell's sample over the cell. ``bilinear``
    interpolates each angle plane from its own sample lattice, clamping at borders.
    """
    raw = mosaic.raw
    h, w = raw.shape
    planes = np.empty((4, h, w))
    for pos, angle in enumerate(mosaic.layout):
        r, c = divmod(pos, 2)
        samples = raw[r::2, c::2]
        k = (0, 45, 90, 135).index(angle)
        if method == "nearest":
            planes[k] = np.repeat(np.repeat(samples, 2, axis=0), 2, axis=1)
        elif method == "bilinear":
            # lattice coordinate of every full-res pixel for this plane
            ys = np.clip((np.arange(h) - r) / 2.0, 0, samples.shape[0] - 1)
            xs = np.clip((np.arange(w) - c) / 2.0, 0, samples.shape[1] - 1)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            planes[k] = map_coordinates(samples, [yy, xx], order=1, mode="nearest")
        else:
            raise ConfigurationError(f"unknown demosaic method {method!r}")
    return PolarizerStack(planes)


def decompose(stack, rho_min=RHO_MIN):
    """Recover unpolarized intensity, DoP and AoP from a PolarizerStack.

    Pixels with zero intensity, DoP below ``rho_min`` or DoP above ``1 + 1e-3``
    are flagged invalid. DoP in (1, 1 + 1e-3] is clamped to 1.
    """
    i0, i45, i90, i135 = stack.images
    i_un = (i0 + i45 + i90 + i135) / 4.0
    s1 = i0 - i90
    s2 = i45 - i135
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.hypot(s1, s2) / (2.0 * i_un)
    rho = np.where(i_un > 0, rho, 0.0)
    phi = wrap_pi(0.5 * np.arctan2(s2, s1))
    valid = (i_un > 0) & (rho >= rho_min) & (rho <= 1.0 + RHO_CLAMP)
    rho = np.where(valid, np.minimum(rho, 1.0), rho)
    return StokesMaps(i_un, rho, phi, valid, rho_min)


def synthesize(i_un, rho, phi):
    """Polarizer images I_un * (1 + rho * cos(2 phi - 2 phi_pol)) at the four angles."""
    i_un, rho, phi = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (i_un, rho, phi)))
    if np.any(rho < 0) or np.any(rho > 1):
        raise DomainError("degree of polarization must lie in [0, 1]")
    if np.any(i_un < 0):
        raise DomainError("unpolarized intensity must be non-negative")
    images = np.stack([i_un * (1.0 + rho * np.cos(2 * phi - 2 * a)) for a in POLARIZER_ANGLES])
    # rho == 1 can leave -1e-17 residue at the extinction angle
    return PolarizerStack(np.maximum(images, 0.0))


def wrap_pi(angle):
    out = np.mod(angle, np.pi)
    return np.where(out >= np.pi, 0.0, out)


def encode_aop(phi):
    return np.stack([np.cos(2 * phi), np.sin(2 * phi)])


def build_representation(stokes, stack, variant="ours", eta=None, view=None):
    """Network input channels for one of the compared representation variants.

    ours: (I_un, cos 2phi, sin 2phi, rho); raw: the four polarizer images;
    kondo: (I_un, phi, rho); candidates: 4 orthographic candidate normals packed
    as 12 channels (needs ``eta``).
    """
    if stokes.i_un.shape != stack.images.shape[1:]:
        raise DimensionError("Stokes maps and stack are not co-registered")
    if variant == "ours":
        channels = np.concatenate([stokes.i_un[None], encode_aop(stokes.phi), stokes.rho[None]])
    elif variant == "raw":
        channels = stack.images.copy()
    elif variant == "kondo":
        channels = np.stack([stokes.i_un, stokes.phi, stokes.rho])
    elif variant == "candidates":
        if eta is None:
            raise ConfigurationError("the candidates representation needs a refractive index")
        from polarsfp.solver import candidate_normals, pack_candidates

        field = candidate_normals(stokes, view, eta, mode="orthographic")
        channels = pack_candidates(field)
    else:
        raise ConfigurationError(f"unknown representation variant {variant!r}")
    return PolarRepresentation(channels, variant)
