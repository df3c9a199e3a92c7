"""Layers with hand-written forward and backward passes.

Image tensors are NHWC inside the network; the model converts from and to NCHW at
its boundary. Every layer caches what its backward pass needs during ``forward``
and accumulates parameter gradients into ``Tensor.grad`` during ``backward``.
"""

import math

import numpy as np
from scipy.special import erf

from polarsfp.errors import ConfigurationError, DimensionError


class Tensor:
    """A parameter: values plus an optional gradient buffer of the same shape."""

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        self.grad = None
        if grad is not None:
            self.set_grad(grad)

    @property
    def shape(self):
        return list(self.data.shape)

    def set_grad(self, grad):
        grad = np.asarray(grad)
        if grad.shape != self.data.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match {self.data.shape}")
        self.grad = grad

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Layer:
    def __init__(self):
        self.params = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _acc(self, name, g):
        p = self.params[name]
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad += g

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """Stride-1 convolution with 'same' zero padding; weight layout (kh, kw, c_in, c_out)."""

    def __init__(self, c_in, c_out, k=3, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if k % 2 != 1:
            raise ConfigurationError("kernel size must be odd")
        self.k, self.c_in, self.c_out = k, c_in, c_out
        self.params["weight"] = Tensor(_he(rng, (k, k, c_in, c_out), k * k * c_in, dtype))
        self.params["bias"] = Tensor(np.zeros(c_out, dtype=dtype))

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if c != self.c_in:
            raise DimensionError(f"conv expects {self.c_in} channels, got {c}")
        k, p = self.k, self.k // 2
        if k == 1:
            cols = x.reshape(-1, c)
        else:
            # im2col straight from x; out-of-image taps stay zero
            cols = np.zeros((b, h, w, k * k, c), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    di, dj = i - p, j - p
                    cols[:, max(0, -di):h - max(0, di), max(0, -dj):w - max(0, dj), i * k + j, :] = \
                        x[:, max(0, di):h - max(0, -di), max(0, dj):w - max(0, -dj), :]
            cols = cols.reshape(-1, k * k * c)
        self._cache = (x.shape, cols)
        wmat = self.params["weight"].data.reshape(-1, self.c_out)
        y = cols @ wmat + self.params["bias"].data
        return y.reshape(b, h, w, self.c_out)

    def backward(self, dy):
        (b, h, w, c), cols = self._cache
        k, p = self.k, self.k // 2
        d2 = dy.reshape(-1, self.c_out)
        self._acc("weight", (cols.T @ d2).reshape(self.params["weight"].data.shape))
        self._acc("bias", d2.sum(axis=0))
        weight = self.params["weight"].data
        if k == 1:
            return (d2 @ weight.reshape(c, self.c_out).T).reshape(b, h, w, c)
        # one contiguous gradient slab per kernel tap, then shift-and-add
        taps = np.matmul(d2[None], weight.reshape(k * k, c, self.c_out).transpose(0, 2, 1))
        taps = taps.reshape(k * k, b, h, w, c)
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += taps[i * k + j]
        return dxp[:, p:p + h, p:p + w, :]


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; the gradient goes to the first maximal entry."""

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError("max pooling needs even spatial dimensions")
        win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
        self._idx = np.argmax(win, axis=-1)[..., None]
        self._shape = x.shape
        return np.take_along_axis(win, self._idx, axis=-1)[..., 0]

    def backward(self, dy):
        b, h, w, c = self._shape
        dwin = np.zeros((b, h // 2, w // 2, c, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, self._idx, dy[..., None], axis=-1)
        return dwin.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)


def bilinear_matrix(n, scale=2):
    """(scale*n, n) interpolation matrix, half-pixel centres, edge clamped."""
    out = np.zeros((scale * n, n))
    src = (np.arange(scale * n) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(scale * n)
    np.add.at(out, (rows, lo), 1.0 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


class Upsample2(Layer):
    """2x bilinear upsampling as two separable matrix products."""

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        self._uh = bilinear_matrix(h).astype(x.dtype)
        self._uw = bilinear_matrix(w).astype(x.dtype)
        self._shape = x.shape
        t = np.matmul(self._uh, x.reshape(b, h, w * c)).reshape(b * 2 * h, w, c)
        return np.matmul(self._uw, t).reshape(b, 2 * h, 2 * w, c)

    def backward(self, dy):
        b, h, w, c = self._shape
        t = np.matmul(self._uw.T, dy.reshape(b * 2 * h, 2 * w, c))
        return np.matmul(self._uh.T, t.reshape(b, 2 * h, w * c)).reshape(b, h, w, c)


class _Affine(Layer):
    def __init__(self, c, dtype):
        super().__init__()
        self.params["gamma"] = Tensor(np.ones(c, dtype=dtype))
        self.params["beta"] = Tensor(np.zeros(c, dtype=dtype))

    def _normalize(self, x, axes, eps):
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        self._stats = (mu, var)
        return xc * inv, inv

    def _norm_backward(self, dy, axes):
        xhat, inv = self._cache
        gamma = self.params["gamma"].data
        red = tuple(range(dy.ndim - 1))
        self._acc("gamma", (dy * xhat).sum(axis=red))
        self._acc("beta", dy.sum(axis=red))
        dxhat = dy * gamma
        m = math.prod(dy.shape[a] for a in axes)
        return inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))


class BatchNorm(_Affine):
    """Normalizes over batch and space with batch statistics when training, running ones otherwise."""

    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__(c, dtype)
        self.momentum, self.eps = momentum, eps
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        if train:
            xhat, inv = self._normalize(x, axes, self.eps)
            mu, var = (s.reshape(-1) for s in self._stats)
            n = x.size // x.shape[-1]
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mu).astype(x.dtype)
            unbiased = var * n / max(n - 1, 1)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(x.dtype)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv
        self._train = train
        self._cache = (xhat, inv)
        return xhat * self.params["gamma"].data + self.params["beta"].data

    def backward(self, dy):
        if self._train:
            return self._norm_backward(dy, tuple(range(dy.ndim - 1)))
        xhat, inv = self._cache
        red = tuple(range(dy.ndim - 1))
        self._acc("gamma", (dy * xhat).sum(axis=red))
        self._acc("beta", dy.sum(axis=red))
        return dy * self.params["gamma"].data * inv

    def astype(self, dtype):
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return super().astype(dtype)


class InstanceNorm(_Affine):
    """Per-sample, per-channel normalization over space (NHWC)."""

    def __init__(self, c, eps=1e-5, dtype=np.float32):
        super().__init__(c, dtype)
        self.eps = eps

    def forward(self, x, train=False):
        self._cache = self._normalize(x, (1, 2), self.eps)
        return self._cache[0] * self.params["gamma"].data + self.params["beta"].data

    def backward(self, dy):
        return self._norm_backward(dy, (1, 2))


class LayerNorm(_Affine):
    """Normalization over the last (feature) axis."""

    def __init__(self, c, eps=1e-5, dtype=np.float32):
        super().__init__(c, dtype)
        self.eps = eps

    def forward(self, x, train=False):
        self._cache = self._normalize(x, (-1,), self.eps)
        return self._cache[0] * self.params["gamma"].data + self.params["beta"].data

    def backward(self, dy):
        return self._norm_backward(dy, (dy.ndim - 1,))


NORMS = {"batch": BatchNorm, "instance": InstanceNorm, "layer": LayerNorm}


class Linear(Layer):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = Tensor((rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(dtype))
        self.params["bias"] = Tensor(np.zeros(d_out, dtype=dtype))

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["weight"].data + self.params["bias"].data

    def backward(self, dy):
        d_in = self._x.shape[-1]
        x2 = self._x.reshape(-1, d_in)
        d2 = dy.reshape(-1, dy.shape[-1])
        self._acc("weight", x2.T @ d2)
        self._acc("bias", d2.sum(axis=0))
        return dy @ self.params["weight"].data.T


class GELU(Layer):
    """Exact (erf) GELU."""

    def forward(self, x, train=False):
        self._x = x
        self._cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        return x * self._cdf

    def backward(self, dy):
        pdf = np.exp(-0.5 * self._x**2) / math.sqrt(2 * math.pi)
        return dy * (self._cdf + self._x * pdf)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MultiHeadAttention(Layer):
    """Self-attention over a (B, N, D) sequence with no positional term."""

    def __init__(self, dim, heads, rng=None, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"embedding dim {dim} is not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.dim, self.heads = dim, heads
        self.proj = {name: Linear(dim, dim, rng, dtype) for name in ("q", "k", "v", "o")}
        for name, lin in self.proj.items():
            self.params[f"w{name}"] = lin.params["weight"]
            self.params[f"b{name}"] = lin.params["bias"]

    def _split(self, t):
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, -1).transpose(0, 2, 1, 3)

    def _merge(self, t):
        b, h, n, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def forward(self, x, train=False):
        q, k, v = (self._split(self.proj[c].forward(x)) for c in "qkv")
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        self._cache = (q, k, v, attn, scale)
        return self.proj["o"].forward(self._merge(attn @ v))

    def backward(self, dy):
        q, k, v, attn, scale = self._cache
        dout = self._split(self.proj["o"].backward(dy))
        dattn = dout @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dout
        dz = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = dz @ k
        dk = dz.transpose(0, 1, 3, 2) @ q
        return sum(self.proj[c].backward(self._merge(d)) for c, d in zip("qkv", (dq, dk, dv)))

    def astype(self, dtype):
        for lin in self.proj.values():
            lin.astype(dtype)
        return self


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            for name, p in named_params(layer):
                self.params[f"{i}.{name}"] = p

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


class TransformerBlock(Layer):
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim, heads, hidden, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Sequential(Linear(dim, hidden, rng, dtype), GELU(), Linear(hidden, dim, rng, dtype))
        for prefix, layer in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2), ("mlp", self.mlp)):
            for name, p in named_params(layer):
                self.params[f"{prefix}.{name}"] = p

    def forward(self, x, train=False):
        y = x + self.attn.forward(self.ln1.forward(x, train), train)
        return y + self.mlp.forward(self.ln2.forward(y, train), train)

    def backward(self, dz):
        dy = dz + self.ln2.backward(self.mlp.backward(dz))
        return dy + self.ln1.backward(self.attn.backward(dy))

    def astype(self, dtype):
        for layer in (self.ln1, self.attn, self.ln2, self.mlp):
            layer.astype(dtype)
        return self


class L2Normalize(Layer):
    """(y + eps * e_z) / |y + eps * e_z| over the last axis.

    The offset along the viewing axis keeps the output unit-norm and finite when
    y vanishes (dead features, zero weights); a zero input maps to (0, 0, 1).
    """

    def __init__(self, eps=1e-8):
        super().__init__()
        self.eps = eps

    def forward(self, x, train=False):
        z = np.array(x, copy=True)
        z[..., -1] += self.eps
        norm = np.sqrt((z * z).sum(axis=-1, keepdims=True))
        self._inv = 1.0 / np.maximum(norm, np.finfo(z.dtype).tiny)
        self._out = z * self._inv
        return self._out

    def backward(self, dy):
        n = self._out
        return self._inv * (dy - n * (dy * n).sum(axis=-1, keepdims=True))


def named_params(layer):
    return list(layer.params.items())
