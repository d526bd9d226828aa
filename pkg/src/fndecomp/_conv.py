"""Raw numpy kernels for 3x3x3 convolutions in channels-last layout.

Arrays are ``(N, W, H, D, C)``. Stride-1 convolutions pad one voxel on each
side; stride-2 convolutions pad one voxel after (so an even extent ``2n``
maps to ``n``). The transposed convolution is the exact adjoint of the
stride-2 convolution and maps ``n`` back to ``2n``.
"""

from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KSIZE = 3
_OFFSETS = tuple(product(range(KSIZE), repeat=3))


def _pads(stride):
    return (1, 1) if stride == 1 else (0, 1)


def im2col(x, stride):
    lo, hi = _pads(stride)
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (lo, hi), (0, 0)))
    win = sliding_window_view(xp, (KSIZE,) * 3, axis=(1, 2, 3))
    if stride != 1:
        win = win[:, ::stride, ::stride, ::stride]
    n, wo, ho, do = win.shape[:4]
    # column order is (kx, ky, kz, c) to match a (3, 3, 3, Cin, Cout) kernel
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * wo * ho * do, -1)
    return cols, (n, wo, ho, do)


def col2im(dcols, out_shape, in_spatial, channels, stride):
    lo, hi = _pads(stride)
    n, wo, ho, do = out_shape
    w, h, d = in_spatial
    dxp = np.zeros((n, w + lo + hi, h + lo + hi, d + lo + hi, channels), dtype=dcols.dtype)
    blocks = dcols.reshape(n, wo, ho, do, KSIZE, KSIZE, KSIZE, channels)
    for i, j, k in _OFFSETS:
        dxp[:, i:i + stride * wo:stride, j:j + stride * ho:stride, k:k + stride * do:stride] += (
            blocks[:, :, :, :, i, j, k]
        )
    return dxp[:, lo:lo + w, lo:lo + h, lo:lo + d]


def conv3d(x, w, b, stride):
    """Forward pass; returns the output and the im2col buffer for reuse."""
    cols, osh = im2col(x, stride)
    cout = w.shape[-1]
    y = cols @ w.reshape(-1, cout)
    y += b
    return y.reshape(*osh, cout), cols


def conv3d_grads(g, x_shape, w, cols, stride, need_x=True):
    cout = w.shape[-1]
    gm = g.reshape(-1, cout)
    dw = (cols.T @ gm).reshape(w.shape)
    db = gm.sum(axis=0)
    dx = None
    if need_x:
        dcols = gm @ w.reshape(-1, cout).T
        dx = col2im(dcols, g.shape[:4], x_shape[1:4], x_shape[4], stride)
    return dx, dw, db


def conv_transpose3d(x, w, b):
    """Stride-2 transposed convolution; ``w`` is ``(3, 3, 3, Cout, Cin)``."""
    cin = x.shape[-1]
    cout = w.shape[3]
    dcols = x.reshape(-1, cin) @ w.reshape(-1, cin).T
    spatial = tuple(2 * s for s in x.shape[1:4])
    y = col2im(dcols, x.shape[:4], spatial, cout, 2)
    y += b
    return y


def conv_transpose3d_grads(g, x, w, need_x=True):
    cin = x.shape[-1]
    gcols, _ = im2col(g, 2)
    wmat = w.reshape(-1, cin)
    dw = (gcols.T @ x.reshape(-1, cin)).reshape(w.shape)
    db = g.reshape(-1, g.shape[-1]).sum(axis=0)
    dx = (gcols @ wmat).reshape(x.shape) if need_x else None
    return dx, dw, db
