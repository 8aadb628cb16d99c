"""Numpy implementations of the convolution gather/scatter kernels.

These are the reference versions; the compiled module mirrors them and must
produce bit-identical output (same accumulation order in ``col2im``).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x_pad, k, stride, out_h, out_w):
    """Gather ``k x k`` patches of a padded ``[B, C, Hp, Wp]`` array.

    Returns a ``[B*out_h*out_w, C*k*k]`` array, rows ordered (b, oh, ow) and
    columns ordered (c, i, j).
    """
    B, C = x_pad.shape[:2]
    win = sliding_window_view(x_pad, (k, k), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * out_h * out_w, C * k * k
    )


def col2im(cols, shape, k, stride, out_h, out_w):
    """Scatter-add patch columns back onto a zero ``[B, C, Hp, Wp]`` array."""
    B, C, Hp, Wp = shape
    out = np.zeros(shape, dtype=np.float64)
    c6 = cols.reshape(B, out_h, out_w, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    hs = (out_h - 1) * stride + 1
    ws = (out_w - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += c6[..., i, j]
    return out
