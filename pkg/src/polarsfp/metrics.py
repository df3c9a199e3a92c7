"""Angular-error metrics and the cosine training loss."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from polarsfp.errors import DimensionError, NoValidPixelsError

THRESHOLDS = (11.25, 22.5, 30.0)


@dataclass
class MetricsReport:
    mean: float
    median: float
    rmse: float
    acc_11_25: float
    acc_22_5: float
    acc_30: float
    n_valid: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def to_table(self):
        header = f"{'Mean':>8} {'Median':>8} {'RMSE':>8} {'11.25°':>8} {'22.5°':>8} {'30.0°':>8}"
        row = (f"{self.mean:8.2f} {self.median:8.2f} {self.rmse:8.2f} "
               f"{self.acc_11_25:8.1f} {self.acc_22_5:8.1f} {self.acc_30:8.1f}")
        return header + "\n" + row


def angular_error_map(pred, gt):
    """Per-pixel angle between predicted and ground-truth normals, in degrees.

    Returns (errors, mask); errors are zero outside the joint validity mask.
    """
    if pred.normals.shape != gt.normals.shape:
        raise DimensionError(f"normal maps differ in shape: {pred.normals.shape} vs {gt.normals.shape}")
    mask = pred.valid & gt.valid
    cos = np.clip(np.sum(pred.normals * gt.normals, axis=-1), -1.0, 1.0)
    err = np.degrees(np.arccos(cos))
    return np.where(mask, err, 0.0), mask


def summarize(errors, mask):
    e = np.asarray(errors, dtype=float)[mask]
    if e.size == 0:
        raise NoValidPixelsError("no valid pixels to summarize")
    s = np.sort(e)
    return MetricsReport(
        mean=float(e.mean()),
        median=float(s[(s.size - 1) // 2]),
        rmse=float(np.sqrt(np.mean(e**2))),
        acc_11_25=float(100.0 * np.mean(e < THRESHOLDS[0])),
        acc_22_5=float(100.0 * np.mean(e < THRESHOLDS[1])),
        acc_30=float(100.0 * np.mean(e < THRESHOLDS[2])),
        n_valid=int(e.size),
    )


def cosine_loss(pred, gt):
    """Mean of 1 - cos(angle) over jointly valid pixels; lies in [0, 2]."""
    mask = pred.valid & gt.valid
    if not mask.any():
        raise NoValidPixelsError("no jointly valid pixels for the cosine loss")
    return float(np.mean(1.0 - np.sum(pred.normals * gt.normals, axis=-1)[mask]))
