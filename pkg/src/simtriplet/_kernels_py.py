"""Pure numpy im2col / col2im used when the compiled extension is unavailable."""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (B, C, H, W) into a (B*OH*OW, C*kh*kw) matrix.

    Rows are ordered (b, oh, ow); columns (c, ki, kj).
    """
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, oh, ow, c, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b * oh * ow, c * kh * kw)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into (B, C, H, W)."""
    b, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols6 = cols.reshape(b, oh, ow, c, kh, kw)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += patch
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
