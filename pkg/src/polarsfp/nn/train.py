"""Cosine loss, Adam, cosine learning-rate decay and the training loop."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from polarsfp.errors import ConfigurationError, NumericalError
from polarsfp.polar import build_representation, decompose
from polarsfp.viewing import encode_view


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 1000
    crop: int = 512
    seed: int = 0
    scheduler: str = "cosine"
    steps: int | None = None  # overrides epochs when set

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.crop % 16:
            raise ConfigurationError("crop size must be divisible by 16")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch size and epochs must be positive")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")

    @classmethod
    def toy(cls, **overrides):
        """Desk-scale defaults: 64x64 crops, batch 4."""
        base = dict(lr=1e-3, batch_size=4, epochs=1000, crop=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def cosine_loss_grad(pred, gt, mask):
    """Mean 1 - <pred, gt> over masked pixels of (B, 3, H, W) maps, and its gradient wrt pred."""
    count = int(mask.sum())
    if count == 0:
        raise ConfigurationError("no valid pixels in batch")
    dots = (pred * gt).sum(axis=1)
    loss = float((1.0 - dots)[mask].sum() / count)
    grad = -gt * mask[:, None] / count
    return loss, grad.astype(pred.dtype)


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if lr == 0:
                continue
            step = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype)


def cosine_lr(base, step, total):
    return 0.5 * base * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))


def network_input(stack, cam, viewing="v", variant="ours", bands=6):
    """(C, H, W) input: normalized raw stack, representation channels, viewing encoding."""
    stokes = decompose(stack)
    scale = stokes.i_un[stokes.valid].mean() if stokes.valid.any() else 1.0
    scale = scale if scale > 0 else 1.0
    raw = stack.images / scale
    rep = build_representation(stokes, stack, variant).channels
    if variant in ("ours", "kondo"):
        rep = rep.copy()
        rep[0] = rep[0] / scale
    parts = [raw, rep]
    if viewing != "none":
        parts.append(encode_view(viewing, cam, bands=bands).channels)
    return np.concatenate(parts).astype(np.float32)


def _batch(samples, idx, crop, rng):
    xs, gs, ms = [], [], []
    for i in idx:
        x, nm = samples[i]
        h, w = x.shape[1:]
        r = int(rng.integers(0, h - crop + 1))
        c = int(rng.integers(0, w - crop + 1))
        xs.append(x[:, r:r + crop, c:c + crop])
        gs.append(nm.to_array()[:, r:r + crop, c:c + crop])
        ms.append(nm.valid[r:r + crop, c:c + crop])
    return np.stack(xs), np.stack(gs).astype(np.float32), np.stack(ms)


def train(model, samples, cfg, log=None):
    """Fit ``model`` to [(input (C, H, W), NormalMap)] pairs.

    Returns (model, per-epoch mean losses). Shuffle and crop order come from
    ``cfg.seed`` only, so equal seeds give identical curves.
    """
    if not samples:
        raise ConfigurationError("training set is empty")
    for x, _ in samples:
        if min(x.shape[1:]) < cfg.crop:
            raise ConfigurationError(f"crop {cfg.crop} exceeds sample size {x.shape[1:]}")
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    opt = Adam(model.parameters(), cfg.lr)
    curve, running = [], []
    step = 0
    while step < total:
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if step >= total:
                break
            x, gt, mask = _batch(samples, order[start:start + cfg.batch_size], cfg.crop, rng)
            model.zero_grad()
            pred = model.forward(x, train=True)
            loss, grad = cosine_loss_grad(pred, gt, mask)
            if not np.isfinite(loss):
                raise NumericalError(f"loss became {loss} at step {step}")
            model.backward(grad)
            lr = cosine_lr(cfg.lr, step, total) if cfg.scheduler == "cosine" else cfg.lr
            opt.step(lr)
            running.append(loss)
            step += 1
        curve.append(float(np.mean(running)))
        if log is not None:
            log(len(curve), step, curve[-1])
        running = []
    return model, curve


def predict(model, x):
    """Inference-mode forward of a single (C, H, W) input; returns (3, H, W)."""
    return model.forward(x[None], train=False)[0]
