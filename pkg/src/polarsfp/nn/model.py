"""Encoder-decoder with a self-attention bottleneck for normal regression."""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from polarsfp.errors import ConfigurationError, DimensionError
from polarsfp.io import read_psfp, write_psfp
from polarsfp.nn.layers import (
    NORMS, BatchNorm, Conv2d, L2Normalize, MaxPool2, ReLU, Sequential, TransformerBlock, Upsample2,
)

BLOCK_CHOICES = (0, 1, 2, 4, 8, 12)
BASE_CHANNELS = (64, 128, 256, 512, 512)
MLP_RATIO = 4  # hidden 2048 at dim 512


@dataclass
class ModelConfig:
    width: float = 0.125
    attention_blocks: int = 8
    heads: int | None = None  # 8, or the embed dim when it is smaller
    in_channels: int = 11
    norms: dict = field(default_factory=lambda: {"input": "batch", "down": "instance", "up": "batch"})
    input_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.width <= 1:
            raise ConfigurationError(f"width factor must lie in (0, 1], got {self.width}")
        if self.attention_blocks not in BLOCK_CHOICES:
            raise ConfigurationError(f"attention_blocks must be one of {BLOCK_CHOICES}")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be positive")
        if self.input_size % 16:
            raise ConfigurationError("input size must be a multiple of 16")
        unknown = set(self.norms) - {"input", "down", "up"}
        if unknown or any(v not in NORMS for v in self.norms.values()):
            raise ConfigurationError(f"bad norm kinds {self.norms}")
        if self.heads is None:
            self.heads = min(8, self.channels[-1])
        if self.channels[-1] % self.heads:
            raise ConfigurationError(f"embedding dim {self.channels[-1]} is not divisible by {self.heads} heads")

    @property
    def channels(self):
        return tuple(max(1, int(round(c * self.width))) for c in BASE_CHANNELS)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _double_conv(c_in, c_mid, c_out, norm, rng, dtype):
    make = NORMS[norm]
    return Sequential(
        Conv2d(c_in, c_mid, 3, rng, dtype), make(c_mid, dtype=dtype), ReLU(),
        Conv2d(c_mid, c_out, 3, rng, dtype), make(c_out, dtype=dtype), ReLU(),
    )


class Model:
    def __init__(self, cfg, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        norms = {"input": "batch", "down": "instance", "up": "batch", **cfg.norms}
        self.inc = _double_conv(cfg.in_channels, c[0], c[0], norms["input"], rng, dtype)
        self.downs = [Sequential(MaxPool2(), _double_conv(c[i], c[i + 1], c[i + 1], norms["down"], rng, dtype))
                      for i in range(4)]
        dim = c[4]
        self.blocks = [TransformerBlock(dim, cfg.heads, MLP_RATIO * dim, rng, dtype)
                       for _ in range(cfg.attention_blocks)]
        # decoder: (incoming, skip) -> out; skips are c3, c2, c1, c0
        outs = (c[2], c[1], c[0], c[0])
        incoming = (c[4],) + outs[:3]
        skips = (c[3], c[2], c[1], c[0])
        self.ups = []
        for cin, cs, cout in zip(incoming, skips, outs):
            cat = cin + cs
            self.ups.append(_double_conv(cat, max(1, cat // 2), cout, norms["up"], rng, dtype))
        self.upsample = [Upsample2() for _ in range(4)]
        self.outc = Conv2d(c[0], 3, 1, rng, dtype)
        self.normalize = L2Normalize(1e-8)

    def modules(self):
        mods = [("inc", self.inc)]
        mods += [(f"down{i}", m) for i, m in enumerate(self.downs)]
        mods += [(f"block{i}", m) for i, m in enumerate(self.blocks)]
        mods += [(f"up{i}", m) for i, m in enumerate(self.ups)]
        mods.append(("outc", self.outc))
        return mods

    def parameters(self):
        """Ordered {name: Tensor} for every trainable parameter."""
        return {f"{prefix}.{name}": p for prefix, mod in self.modules() for name, p in mod.params.items()}

    def batchnorms(self):
        out = {}
        for prefix, mod in self.modules():
            for i, layer in enumerate(getattr(mod, "layers", [])):
                inner = layer.layers if isinstance(layer, Sequential) else [layer]
                for j, sub in enumerate(inner):
                    if isinstance(sub, BatchNorm):
                        out[f"{prefix}.{i}.{j}"] = sub
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def astype(self, dtype):
        for _, mod in self.modules():
            mod.astype(dtype)
        self.dtype = dtype
        return self

    def forward(self, x, train=False):
        """(B, C_in, H, W) -> unit normals (B, 3, H, W)."""
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise DimensionError("input height and width must be divisible by 16")
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        skips = [self.inc.forward(h, train)]
        for down in self.downs:
            skips.append(down.forward(skips[-1], train))
        h = skips.pop()
        b, hh, ww, d = h.shape
        seq = h.reshape(b, hh * ww, d)
        for block in self.blocks:
            seq = block.forward(seq, train)
        h = seq.reshape(b, hh, ww, d)
        self._split = []
        for up, conv in zip(self.upsample, self.ups):
            skip = skips.pop()
            h = np.concatenate([skip, up.forward(h, train)], axis=-1)
            self._split.append(skip.shape[-1])
            h = conv.forward(h, train)
        h = self.normalize.forward(self.outc.forward(h, train), train)
        return h.transpose(0, 3, 1, 2)

    def backward(self, dout):
        """Accumulate parameter gradients for d(loss)/d(output); returns d(loss)/d(input)."""
        g = np.ascontiguousarray(np.asarray(dout).transpose(0, 2, 3, 1), dtype=self.dtype)
        g = self.outc.backward(self.normalize.backward(g))
        dskips = []
        for up, conv, ns in zip(reversed(self.upsample), reversed(self.ups), reversed(self._split)):
            g = conv.backward(g)
            dskips.append(g[..., :ns])
            g = up.backward(g[..., ns:])
        b, hh, ww, d = g.shape
        seq = g.reshape(b, hh * ww, d)
        for block in reversed(self.blocks):
            seq = block.backward(seq)
        g = seq.reshape(b, hh, ww, d)
        # dskips holds skip grads for c0, c1, c2, c3 in that order
        for down, dskip in zip(reversed(self.downs), reversed(dskips)):
            g = down.backward(g) + dskip
        g = self.inc.backward(g)
        return g.transpose(0, 3, 1, 2)


def build_model(cfg, dtype=np.float32):
    return Model(cfg, dtype)


def save_checkpoint(model, path, step=0, extra=None):
    """One PSFP file per tensor plus manifest.json."""
    os.makedirs(path, exist_ok=True)
    tensors = {name: p.data for name, p in model.parameters().items()}
    for name, bn in model.batchnorms().items():
        tensors[f"{name}.running_mean"] = bn.running_mean
        tensors[f"{name}.running_var"] = bn.running_var
    entries = []
    for i, (name, data) in enumerate(tensors.items()):
        fname = f"t{i:04d}.psfp"
        write_psfp(os.path.join(path, fname), data)
        entries.append({"name": name, "file": fname, "shape": list(data.shape)})
    manifest = {"config": model.cfg.to_dict(), "step": int(step), "tensors": entries}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (model, manifest)."""
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(mpath)
    with open(mpath) as fh:
        manifest = json.load(fh)
    model = build_model(ModelConfig.from_dict(manifest["config"]))
    params = model.parameters()
    bns = model.batchnorms()
    for entry in manifest["tensors"]:
        data = read_psfp(os.path.join(path, entry["file"])).astype(np.float32)
        name = entry["name"]
        if name in params:
            target = params[name]
            if list(target.data.shape) != list(data.shape):
                raise DimensionError(f"{name}: checkpoint shape {data.shape} != model {target.data.shape}")
            target.data = data
        else:
            bn_name, _, stat = name.rpartition(".")
            if bn_name not in bns or stat not in ("running_mean", "running_var"):
                raise ConfigurationError(f"unexpected checkpoint tensor {name}")
            setattr(bns[bn_name], stat, data)
    return model, manifest
