"""The convolutional + time-delay speaker network.

Data flow for a batch of feature sequences ``(N, T, 40)``:

    valid splice     -> (N, 9, T-8, 40)    spliced offsets become conv channels
    conv1 2x5, pool  -> (N, 32, T-9, 18)
    conv2 2x3, pool  -> (N, 64, T-10, 8)   flattened per frame to 512
    bottleneck       -> (N, T-10, 512)
    td1 {-3,0,3}     -> (N, T-16, 1024) -> p-norm -> 512
    td2 {-1,0,2}     -> (N, T-19, 1024) -> p-norm -> 512
    feature          -> (N, T-19, 400)     the speaker feature layer
    output           -> (N, T-19, K)

Every stage is unpadded, so one output row sees exactly 20 input frames.
"""
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import binio
from .errors import ConfigError, FormatError, TooShortError
from .ndnn import (Affine, Conv2D, MaxPool2D, PNorm, ReLU, TimeDelayAffine,
                   softmax_xent_batch)

MODEL_MAGIC = b"CTDN"
MODEL_VERSION = 1


@dataclass
class ConvSpec:
    maps: int
    kernel_time: int
    kernel_freq: int
    pool_freq: int = 2


@dataclass
class TdSpec:
    offsets: list
    affine_out: int
    pnorm_group: int = 2


@dataclass
class CtdnnConfig:
    num_speakers: int = 5000
    input_bins: int = 40
    splice_left: int = 4
    splice_right: int = 4
    conv1: ConvSpec = field(default_factory=lambda: ConvSpec(32, 2, 5, 2))
    conv2: ConvSpec = field(default_factory=lambda: ConvSpec(64, 2, 3, 2))
    bottleneck_dim: int = 512
    td1: TdSpec = field(default_factory=lambda: TdSpec([-3, 0, 3], 1024, 2))
    td2: TdSpec = field(default_factory=lambda: TdSpec([-1, 0, 2], 1024, 2))
    feature_dim: int = 400
    pnorm_p: float = 2.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown CtdnnConfig keys: {sorted(unknown)}")
        for key, sub in (("conv1", ConvSpec), ("conv2", ConvSpec), ("td1", TdSpec),
                         ("td2", TdSpec)):
            if key in d and isinstance(d[key], dict):
                try:
                    d[key] = sub(**d[key])
                except TypeError as e:
                    raise ConfigError(f"{key}: {e}") from e
        return cls(**d)

    @property
    def splice_width(self):
        return self.splice_left + self.splice_right + 1

    def conv_freq_dims(self):
        """Frequency extents after conv1, pool1, conv2, pool2."""
        f1 = self.input_bins - self.conv1.kernel_freq + 1
        p1 = (f1 - self.conv1.pool_freq) // self.conv1.pool_freq + 1 if f1 >= self.conv1.pool_freq else 0
        f2 = p1 - self.conv2.kernel_freq + 1
        p2 = (f2 - self.conv2.pool_freq) // self.conv2.pool_freq + 1 if f2 >= self.conv2.pool_freq else 0
        return f1, p1, f2, p2

    def validate(self):
        def need(ok, layer, msg):
            if not ok:
                raise ConfigError(f"{layer}: {msg}")

        need(self.num_speakers >= 2, "output", f"num_speakers={self.num_speakers} < 2")
        need(self.splice_left >= 0 and self.splice_right >= 0, "splice", "negative context")
        for name, c in (("conv1", self.conv1), ("conv2", self.conv2)):
            need(c.maps >= 1 and c.kernel_time >= 1 and c.kernel_freq >= 1 and c.pool_freq >= 1,
                 name, "maps, kernels and pool must be positive")
        f1, p1, f2, p2 = self.conv_freq_dims()
        need(f1 >= self.conv1.pool_freq and f1 >= 1, "conv1",
             f"kernel_freq {self.conv1.kernel_freq} leaves {f1} bins for pooling")
        need(f2 >= self.conv2.pool_freq and f2 >= 1, "conv2",
             f"kernel_freq {self.conv2.kernel_freq} leaves {f2} bins for pooling")
        flat = self.conv2.maps * p2
        need(flat == self.bottleneck_dim, "bottleneck",
             f"conv output flattens to {self.conv2.maps}x{p2}={flat}, "
             f"bottleneck_dim is {self.bottleneck_dim}")
        for name, td in (("td1", self.td1), ("td2", self.td2)):
            need(len(td.offsets) >= 1, name, "no offsets")
            need(min(td.offsets) <= 0 <= max(td.offsets), name,
                 f"offsets {td.offsets} must straddle 0")
            need(len(set(td.offsets)) == len(td.offsets), name, "duplicate offsets")
            need(td.pnorm_group >= 1 and td.affine_out % td.pnorm_group == 0, name,
                 f"affine_out {td.affine_out} not divisible by p-norm group {td.pnorm_group}")
        need(self.feature_dim >= 1, "feature", "feature_dim must be positive")
        need(self.pnorm_p >= 1, "pnorm", "p must be >= 1")
        return self


def canonical_config(num_speakers=5000):
    return CtdnnConfig(num_speakers=num_speakers)


def receptive_field(cfg):
    """(left, right, total) context of one output frame, in input frames.

    Conv time kernels extend context to the left.
    """
    left = cfg.splice_left + (cfg.conv1.kernel_time - 1) + (cfg.conv2.kernel_time - 1)
    right = cfg.splice_right
    for td in (cfg.td1, cfg.td2):
        left -= min(td.offsets)
        right += max(td.offsets)
    return left, right, left + right + 1


class CtdnnModel:
    def __init__(self, config, layers, version=MODEL_VERSION):
        self.config = config
        self.layers = layers  # dict name -> Layer, in declaration order
        self.version = version

    # -- construction ------------------------------------------------------

    @staticmethod
    def make_layers(cfg):
        cfg.validate()
        _, p1, _, p2 = cfg.conv_freq_dims()
        c1, c2 = cfg.conv1, cfg.conv2
        td1_in = cfg.bottleneck_dim
        td2_in = cfg.td1.affine_out // cfg.td1.pnorm_group
        feat_in = cfg.td2.affine_out // cfg.td2.pnorm_group
        return {
            "conv1": Conv2D(cfg.splice_width, c1.maps, c1.kernel_time, c1.kernel_freq),
            "pool1": MaxPool2D(1, c1.pool_freq),
            "relu1": ReLU(),
            "conv2": Conv2D(c1.maps, c2.maps, c2.kernel_time, c2.kernel_freq),
            "pool2": MaxPool2D(1, c2.pool_freq),
            "relu2": ReLU(),
            "bottleneck": Affine(c2.maps * p2, cfg.bottleneck_dim),
            "relu3": ReLU(),
            "td1": TimeDelayAffine(td1_in, cfg.td1.affine_out, cfg.td1.offsets),
            "pnorm1": PNorm(cfg.td1.pnorm_group, cfg.pnorm_p),
            "td2": TimeDelayAffine(td2_in, cfg.td2.affine_out, cfg.td2.offsets),
            "pnorm2": PNorm(cfg.td2.pnorm_group, cfg.pnorm_p),
            "feature": Affine(feat_in, cfg.feature_dim),
            "output": Affine(cfg.feature_dim, cfg.num_speakers),
        }

    @property
    def receptive_field(self):
        return receptive_field(self.config)

    @property
    def dtype(self):
        return self.layers["output"].params["W"].dtype

    def num_params(self):
        return sum(layer.num_params() for layer in self.layers.values())

    def param_blocks(self):
        return {f"{name}.{k}": v for name, layer in self.layers.items()
                for k, v in layer.params.items()}

    def astype(self, dtype):
        for layer in self.layers.values():
            layer.astype(dtype)
        return self

    def copy(self):
        layers = self.make_layers(self.config)
        for name, layer in layers.items():
            layer.params = {k: v.copy() for k, v in self.layers[name].params.items()}
        return CtdnnModel(self.config, layers, self.version)

    # -- forward / backward ------------------------------------------------

    def _check_length(self, t):
        total = self.receptive_field[2]
        if t < total:
            raise TooShortError(f"{t} frames is shorter than the {total}-frame receptive field")

    def _splice(self, x):
        cfg = self.config
        w = cfg.splice_width
        # (N, T-w+1, F, w) -> (N, w, T-w+1, F)
        win = sliding_window_view(x, w, axis=1)
        return np.ascontiguousarray(win.transpose(0, 3, 1, 2))

    def _unsplice(self, ds, t):
        n, w, t1, f = ds.shape
        dx = np.zeros((n, t, f), dtype=ds.dtype)
        for j in range(w):
            dx[:, j:j + t1] += ds[:, j]
        return dx

    def run(self, x, upto="output", keep=False, frozen=None):
        """Forward a batch ``(N, T, input_bins)``; returns (activation, caches).

        ``frozen``: caches of an earlier pass whose ReLU masks and pooling
        argmaxes are reused, which pins the network to one linear piece.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.config.input_bins:
            raise ConfigError(f"expected (N, T, {self.config.input_bins}) input, got {x.shape}")
        self._check_length(x.shape[1])
        L = self.layers
        caches = {} if keep else None

        def step(name, h):
            if frozen is not None and isinstance(L[name], (ReLU, MaxPool2D)):
                h, c = L[name].forward(h, pattern=frozen[name])
            else:
                h, c = L[name].forward(h)
            if keep:
                caches[name] = c
            return h

        h = self._splice(x)
        for name in ("conv1", "pool1", "relu1", "conv2", "pool2", "relu2"):
            h = step(name, h)
        n, m, t3, f3 = h.shape
        conv_shape = h.shape
        h = np.ascontiguousarray(h.transpose(0, 2, 1, 3)).reshape(n, t3, m * f3)
        for name in ("bottleneck", "relu3", "td1", "pnorm1", "td2", "pnorm2", "feature"):
            h = step(name, h)
        if upto == "output":
            h = step("output", h)
        if keep:
            caches["_shapes"] = (x.shape, conv_shape)
        return h, caches

    def backward(self, caches, dout, need_input_grad=True):
        L = self.layers
        grads = {}

        def back(name, g):
            g, pg = L[name].backward(caches.get(name), g)
            for k, v in pg.items():
                grads[f"{name}.{k}"] = v
            return g

        g = dout
        for name in ("output", "feature", "pnorm2", "td2", "pnorm1", "td1", "relu3",
                     "bottleneck"):
            g = back(name, g)
        x_shape, conv_shape = caches["_shapes"]
        n, m, t3, f3 = conv_shape
        g = np.ascontiguousarray(g.reshape(n, t3, m, f3).transpose(0, 2, 1, 3))
        for name in ("relu2", "pool2", "conv2", "relu1", "pool1"):
            g = back(name, g)
        if not need_input_grad:
            # conv1 input gradient is only needed for gradient checks
            cols, _ = caches["conv1"]
            o = L["conv1"].out_channels
            dyt = g.transpose(0, 2, 3, 1).reshape(-1, o)
            grads["conv1.W"] = (dyt.T @ cols.reshape(-1, cols.shape[-1])).reshape(
                L["conv1"].params["W"].shape)
            grads["conv1.b"] = dyt.sum(axis=0)
            return grads, None
        g = back("conv1", g)
        return grads, self._unsplice(g, x_shape[1])

    def loss_and_grads(self, x, labels, weights=None, need_grads=True, need_input_grad=True,
                       frozen=None):
        """Mean cross-entropy over output frames.

        ``labels``: (N,) per sequence or (N, T_out) per frame. ``weights``:
        optional (N, T_out) 0/1 mask. Returns (loss, param_grads, input_grad).
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        logits, caches = self.run(x, keep=need_grads, frozen=frozen)
        n, t_out, k = logits.shape
        labels = np.asarray(labels)
        lab = np.broadcast_to(labels.reshape(n, -1) if labels.ndim else labels, (n, t_out))
        w = None if weights is None else np.asarray(weights, dtype=logits.dtype).reshape(-1)
        count = n * t_out if w is None else float(np.sum(w))
        loss, g = softmax_xent_batch(logits.reshape(-1, k), lab.reshape(-1), w)
        loss /= count
        if not need_grads:
            return loss, None, None
        g = (g / count).astype(logits.dtype).reshape(n, t_out, k)
        grads, dx = self.backward(caches, g, need_input_grad=need_input_grad)
        return loss, grads, dx


def build_ctdnn(cfg, seed=0, dtype=np.float32):
    """Construct and initialize a model; the same seed gives identical parameters."""
    layers = CtdnnModel.make_layers(cfg)
    rng = np.random.default_rng(seed)
    for layer in layers.values():
        layer.init_params(rng, dtype=dtype)
    return CtdnnModel(cfg, layers)


def forward_features(m, fbank):
    """Speaker features for one utterance: (T - total_rf + 1, feature_dim)."""
    fbank = np.asarray(fbank)
    m._check_length(fbank.shape[0])
    h, _ = m.run(fbank[None], upto="feature")
    return h[0]


def forward_logits(m, fbank):
    fbank = np.asarray(fbank)
    m._check_length(fbank.shape[0])
    h, _ = m.run(fbank[None], upto="output")
    return h[0]


# -- serialization ---------------------------------------------------------

def _config_json(cfg):
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def dump_model(m):
    w = binio.Writer()
    w.magic(MODEL_MAGIC)
    w.u32(MODEL_VERSION)
    w.text(_config_json(m.config))
    for layer in m.layers.values():
        for name in layer.param_names:
            w.blob(layer.params[name])
    return w.getvalue()


def load_model_bytes(data, what="model file"):
    r = binio.Reader(data, what)
    r.magic(MODEL_MAGIC)
    version = r.version()
    try:
        cfg = CtdnnConfig.from_dict(json.loads(r.text()))
    except (json.JSONDecodeError, TypeError, ConfigError) as e:
        raise FormatError(f"{what}: bad config block: {e}") from e
    layers = CtdnnModel.make_layers(cfg)
    for lname, layer in layers.items():
        for pname, shape in getattr(layer, "param_shapes", dict)().items():
            arr = r.blob()
            if arr.size != int(np.prod(shape)):
                raise FormatError(f"{what}: {lname}.{pname} has {arr.size} values, "
                                  f"expected {int(np.prod(shape))}")
            layer.params[pname] = arr.reshape(shape)
    r.expect_end()
    return CtdnnModel(cfg, layers, version)


def save_model(m, path):
    binio.write_bytes(path, dump_model(m))


def load_model(path):
    return load_model_bytes(binio.read_bytes(path), what=os.fspath(path))
