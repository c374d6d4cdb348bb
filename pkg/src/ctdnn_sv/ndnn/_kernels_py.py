"""Pure-numpy versions of the hot kernels.

These are the reference implementations; the compiled module ``_ckernels``
must reproduce them bit for bit (same accumulation order).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def im2col(x, kh, kw):
    """(N, C, H, W) -> (N, H-kh+1, W-kw+1, C*kh*kw), column order (c, u, v)."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N C Ho Wo kh kw
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(win).reshape(n, h - kh + 1, w - kw + 1, c * kh * kw)


def col2im(dcols, c, h, w, kh, kw):
    n, ho, wo, _ = dcols.shape
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((n, c, h, w), dtype=dcols.dtype)
    for u in range(kh):
        for v in range(kw):
            dx[:, :, u:u + ho, v:v + wo] += d[:, :, u, v]
    return dx


def maxpool_forward(x, ph, pw, sh, sw):
    """Returns (y, arg) where arg is the flat in-window index u*pw+v of the max."""
    n, c, h, w = x.shape
    ho = (h - ph) // sh + 1
    wo = (w - pw) // sw + 1
    win = sliding_window_view(x, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, ph * pw)
    arg = np.argmax(win, axis=-1).astype(np.intp)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def maxpool_backward(dy, arg, h, w, ph, pw, sh, sw):
    n, c, ho, wo = dy.shape
    dx = np.zeros((n, c, h, w), dtype=dy.dtype)
    for u in range(ph):
        for v in range(pw):
            hit = arg == u * pw + v
            dx[:, :, u:u + sh * (ho - 1) + 1:sh, v:v + sw * (wo - 1) + 1:sw] += np.where(hit, dy, 0)
    return dx
