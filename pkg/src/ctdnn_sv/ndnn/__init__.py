"""Minimal dense neural-network core: layers, backprop, gradient checks."""
import numpy as np

from ..errors import ShapeError
from . import kernels
from .gradcheck import GradCheckReport, grad_check, rel_error
from .layers import (LAYER_KINDS, Affine, Conv2D, Layer, MaxPool2D, PNorm, ReLU,
                     Softmax, TimeDelayAffine, glorot_uniform, log_softmax, softmax,
                     softmax_xent, softmax_xent_batch)


def _batched(x, ndim):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == ndim - 1 else (x, False)


def conv2d_forward(x, layer):
    """Convolve a (C, H, W) or (N, C, H, W) input."""
    xb, single = _batched(x, 4)
    y, _ = layer.forward(xb)
    return y[0] if single else y


def maxpool2d_forward(x, pool, stride=None):
    """Pool the last two axes of an input with any number of leading axes."""
    x = np.asarray(x)
    stride = pool if stride is None else stride
    x4 = np.ascontiguousarray(x.reshape((-1, 1) + x.shape[-2:]))
    y, _ = MaxPool2D(pool[0], pool[1], stride[0], stride[1]).forward(x4)
    return y.reshape(x.shape[:-2] + y.shape[-2:])


def affine_forward(x, layer):
    return layer.forward(np.asarray(x))[0]


def pnorm_forward(x, group, p=2.0):
    return PNorm(group, p).forward(np.asarray(x))[0]


def timedelay_forward(x_seq, offsets, layer):
    """Apply a time-delay layer to a (T, D) sequence; returns (T', D_out)."""
    if tuple(offsets) != layer.offsets:
        raise ShapeError("offsets do not match the layer's offsets")
    y, _ = layer.forward(np.asarray(x_seq)[None])
    return y[0]


def layer_backward(layer, cache, grad_out):
    return layer.backward(cache, grad_out)


__all__ = [
    "Affine", "Conv2D", "GradCheckReport", "LAYER_KINDS", "Layer", "MaxPool2D", "PNorm",
    "ReLU", "Softmax", "TimeDelayAffine", "affine_forward", "conv2d_forward", "glorot_uniform",
    "grad_check", "kernels", "layer_backward", "log_softmax", "maxpool2d_forward",
    "pnorm_forward", "rel_error", "softmax", "softmax_xent", "softmax_xent_batch",
    "timedelay_forward",
]
