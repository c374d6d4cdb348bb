"""Layer kinds with explicit forward caches and analytic backward passes.

Layers hold parameters only; all per-call state travels in the cache object
returned by ``forward``, so one layer instance can serve concurrent
read-only forward passes.
"""
import numpy as np

from ..errors import ShapeError, UsageError
from . import kernels


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _require_cache(cache):
    if cache is None:
        raise UsageError("backward called without a forward cache")


class Layer:
    kind = "Layer"
    param_names = ()

    def __init__(self):
        self.params = {}

    def hyper(self):
        return {}

    def init_params(self, rng, dtype=np.float32):
        pass

    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype):
        for k, v in self.params.items():
            self.params[k] = v.astype(dtype)
        return self

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{self.kind}({hp})"


class Conv2D(Layer):
    """Valid, stride-1 convolution over (N, C, H, W) inputs."""

    kind = "Conv2D"
    param_names = ("W", "b")

    def __init__(self, in_channels, out_channels, kh, kw):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh = kh
        self.kw = kw

    def hyper(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kh": self.kh, "kw": self.kw}

    def param_shapes(self):
        return {"W": (self.out_channels, self.in_channels, self.kh, self.kw),
                "b": (self.out_channels,)}

    def init_params(self, rng, dtype=np.float32):
        fan_in = self.in_channels * self.kh * self.kw
        fan_out = self.out_channels * self.kh * self.kw
        shapes = self.param_shapes()
        self.params["W"] = glorot_uniform(rng, shapes["W"], fan_in, fan_out).astype(dtype)
        self.params["b"] = np.zeros(shapes["b"], dtype=dtype)

    def out_shape(self, c, h, w):
        if c != self.in_channels:
            raise ShapeError(f"Conv2D expects {self.in_channels} channels, got {c}")
        if self.kh > h or self.kw > w:
            raise ShapeError(f"kernel {self.kh}x{self.kw} larger than input {h}x{w}")
        return self.out_channels, h - self.kh + 1, w - self.kw + 1

    def forward(self, x):
        n, c, h, w = x.shape
        o, ho, wo = self.out_shape(c, h, w)
        cols = kernels.im2col(x, self.kh, self.kw)
        wmat = self.params["W"].reshape(o, -1)
        y = cols.reshape(-1, wmat.shape[1]) @ wmat.T + self.params["b"]
        y = np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
        return y, (cols, x.shape)

    def backward(self, cache, dy):
        _require_cache(cache)
        cols, (n, c, h, w) = cache
        o = self.out_channels
        dyt = dy.transpose(0, 2, 3, 1).reshape(-1, o)
        cmat = cols.reshape(-1, cols.shape[-1])
        wmat = self.params["W"].reshape(o, -1)
        grads = {"W": (dyt.T @ cmat).reshape(self.params["W"].shape),
                 "b": dyt.sum(axis=0)}
        dcols = (dyt @ wmat).reshape(cols.shape)
        dx = kernels.col2im(dcols, c, h, w, self.kh, self.kw)
        return dx, grads


class MaxPool2D(Layer):
    """Max pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "MaxPool2D"

    def __init__(self, ph, pw, sh=None, sw=None):
        super().__init__()
        self.ph, self.pw = ph, pw
        self.sh = ph if sh is None else sh
        self.sw = pw if sw is None else sw

    def hyper(self):
        return {"ph": self.ph, "pw": self.pw, "sh": self.sh, "sw": self.sw}

    def out_shape(self, c, h, w):
        if self.ph > h or self.pw > w:
            raise ShapeError(f"pool {self.ph}x{self.pw} larger than input {h}x{w}")
        return c, (h - self.ph) // self.sh + 1, (w - self.pw) // self.sw + 1

    def forward(self, x, pattern=None):
        """``pattern``: a previous cache whose argmax routing is reused as is."""
        n, c, h, w = x.shape
        self.out_shape(c, h, w)
        if pattern is not None:
            arg = pattern[0]
            return _gather_windows(x, arg, self.ph, self.pw, self.sh, self.sw), (arg, h, w)
        y, arg = kernels.maxpool_forward(x, self.ph, self.pw, self.sh, self.sw)
        return y, (arg, h, w)

    def backward(self, cache, dy):
        _require_cache(cache)
        arg, h, w = cache
        dx = kernels.maxpool_backward(dy, arg, h, w, self.ph, self.pw, self.sh, self.sw)
        return dx, {}


class Affine(Layer):
    """y = W x + b applied along the last axis."""

    kind = "Affine"
    param_names = ("W", "b")

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim

    def hyper(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}

    def param_shapes(self):
        return {"W": (self.out_dim, self.in_dim), "b": (self.out_dim,)}

    def init_params(self, rng, dtype=np.float32):
        self.params["W"] = glorot_uniform(rng, (self.out_dim, self.in_dim),
                                          self.in_dim, self.out_dim).astype(dtype)
        self.params["b"] = np.zeros(self.out_dim, dtype=dtype)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Affine expects width {self.in_dim}, got {x.shape[-1]}")
        return _rowmat(x, self.params["W"].T) + self.params["b"], x

    def backward(self, cache, dy):
        _require_cache(cache)
        x = cache
        x2 = x.reshape(-1, self.in_dim)
        dy2 = dy.reshape(-1, self.out_dim)
        grads = {"W": dy2.T @ x2, "b": dy2.sum(axis=0)}
        return _rowmat(dy, self.params["W"]), grads


def _rowmat(x, w):
    """``x @ w`` over the last axis of ``x``, done as one 2-D product (much faster than batched)."""
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


class TimeDelayAffine(Layer):
    """Affine map over frames spliced at fixed offsets, no padding.

    Input (N, T, D); output (N, T - (max(offsets) - min(offsets)), out_dim).
    Output index t corresponds to input frame t - min(offsets).
    """

    kind = "TimeDelayAffine"
    param_names = ("W", "b")

    def __init__(self, in_dim, out_dim, offsets):
        super().__init__()
        if not offsets:
            raise ShapeError("TimeDelayAffine needs at least one offset")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.offsets = tuple(int(o) for o in offsets)

    @property
    def span(self):
        return max(self.offsets) - min(self.offsets)

    def hyper(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "offsets": list(self.offsets)}

    def param_shapes(self):
        return {"W": (self.out_dim, self.in_dim * len(self.offsets)), "b": (self.out_dim,)}

    def init_params(self, rng, dtype=np.float32):
        fan_in = self.in_dim * len(self.offsets)
        self.params["W"] = glorot_uniform(rng, (self.out_dim, fan_in), fan_in,
                                          self.out_dim).astype(dtype)
        self.params["b"] = np.zeros(self.out_dim, dtype=dtype)

    def _splice(self, x, t_out):
        lo = min(self.offsets)
        return np.concatenate([x[:, o - lo:o - lo + t_out] for o in self.offsets], axis=-1)

    def forward(self, x):
        n, t, d = x.shape
        if d != self.in_dim:
            raise ShapeError(f"TimeDelayAffine expects width {self.in_dim}, got {d}")
        t_out = t - self.span
        if t_out <= 0:
            return np.zeros((n, 0, self.out_dim), dtype=x.dtype), None
        z = self._splice(x, t_out)
        return _rowmat(z, self.params["W"].T) + self.params["b"], (z, t)

    def backward(self, cache, dy):
        _require_cache(cache)
        z, t = cache
        n, t_out, _ = dy.shape
        dy2 = dy.reshape(-1, self.out_dim)
        grads = {"W": dy2.T @ z.reshape(-1, z.shape[-1]), "b": dy2.sum(axis=0)}
        dz = _rowmat(dy, self.params["W"])
        dx = np.zeros((n, t, self.in_dim), dtype=dy.dtype)
        lo = min(self.offsets)
        for k, o in enumerate(self.offsets):
            dx[:, o - lo:o - lo + t_out] += dz[..., k * self.in_dim:(k + 1) * self.in_dim]
        return dx, grads


class PNorm(Layer):
    """Group p-norm over consecutive blocks of the last axis."""

    kind = "PNorm"

    def __init__(self, group, p=2.0):
        super().__init__()
        if p < 1:
            raise ShapeError("p-norm exponent must be >= 1")
        self.group = int(group)
        self.p = float(p)

    def hyper(self):
        return {"group": self.group, "p": self.p}

    def forward(self, x):
        d = x.shape[-1]
        if d % self.group:
            raise ShapeError(f"width {d} not divisible by group size {self.group}")
        xg = x.reshape(*x.shape[:-1], d // self.group, self.group)
        if self.p == 2.0:
            y = np.sqrt(np.sum(xg * xg, axis=-1))
        else:
            y = np.sum(np.abs(xg) ** self.p, axis=-1) ** (1.0 / self.p)
        return y, (xg, y)

    def backward(self, cache, dy):
        _require_cache(cache)
        xg, y = cache
        yy = y[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.p == 2.0:
                g = xg / yy
            else:
                g = np.sign(xg) * np.abs(xg) ** (self.p - 1) / yy ** (self.p - 1)
        g = np.where(yy > 0, g, 0).astype(dy.dtype)
        dx = g * dy[..., None]
        return dx.reshape(*xg.shape[:-2], -1), {}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, pattern=None):
        if pattern is not None:
            return x * pattern, pattern
        return np.maximum(x, 0), x > 0

    def backward(self, cache, dy):
        _require_cache(cache)
        return dy * cache, {}


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x):
        p = softmax(x)
        return p, p

    def backward(self, cache, dy):
        _require_cache(cache)
        p = cache
        return p * (dy - np.sum(dy * p, axis=-1, keepdims=True)), {}


def _gather_windows(x, arg, ph, pw, sh, sw):
    n, c, ho, wo = arg.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (ph, pw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :ho, :wo].reshape(n, c, ho, wo, ph * pw)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]


def softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax_xent(logits, label):
    """Cross-entropy of one logit vector against an integer label.

    Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits)
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1
    return float(-logp[label]), grad


def softmax_xent_batch(logits, labels, weights=None):
    """Summed (optionally weighted) cross-entropy over rows of ``logits``.

    Returns ``(loss_sum, grad_logits)``; rows with weight 0 contribute nothing.
    """
    m, k = logits.shape
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes")
    logp = log_softmax(logits)
    rows = np.arange(m)
    nll = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    if weights is not None:
        nll = nll * weights
        grad *= weights[:, None]
    return float(np.sum(nll, dtype=np.float64)), grad


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, MaxPool2D, Affine, TimeDelayAffine,
                                         PNorm, ReLU, Softmax)}
