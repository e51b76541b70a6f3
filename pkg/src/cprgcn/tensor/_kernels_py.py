"""Pure-numpy 3D convolution and max-pooling kernels.

All arrays are float64 with layout (N, C, D, H, W).  Convolution uses a
3x3x3 stencil with one voxel of zero padding on every spatial side.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _columns(x):
    n, c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    # (N, C, D, H, W, 3, 3, 3) -> (N, D, H, W, C, 3, 3, 3)
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * d * h * w, c * 27)


def conv3d_forward(x, w, b):
    n, _, d, h, wd = x.shape
    cout = w.shape[0]
    cols = _columns(x)
    out = cols @ w.reshape(cout, -1).T
    out += b
    return np.ascontiguousarray(out.reshape(n, d, h, wd, cout).transpose(0, 4, 1, 2, 3))


def conv3d_backward(x, w, gout, need_dx=True):
    n, cin, d, h, wd = x.shape
    cout = w.shape[0]
    g2 = gout.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
    gb = g2.sum(axis=0)
    gw = (g2.T @ _columns(x)).reshape(w.shape)
    if not need_dx:
        return None, gw, gb
    gcols = (g2 @ w.reshape(cout, -1)).reshape(n, d, h, wd, cin, 3, 3, 3)
    gxp = np.zeros((n, cin, d + 2, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                gxp[:, :, i:i + d, j:j + h, k:k + wd] += gcols[..., i, j, k].transpose(0, 4, 1, 2, 3)
    return gxp[:, :, 1:-1, 1:-1, 1:-1].copy(), gw, gb


def maxpool3d_forward(x):
    n, c, d, h, w = x.shape
    blocks = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)
    arg = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool3d_backward(gout, arg, shape):
    n, c, d, h, w = shape
    onehot = (arg[..., None] == np.arange(8, dtype=np.int8)) * gout[..., None]
    g = onehot.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(g.reshape(shape))
