"""Pure-numpy implementations of the hot inner kernels.

All arrays are NHWC. Convolutions are 3x3 with same-padding; pooling is 2x2
stride 2. These are the fallback lane when the JIT backend is disabled and the
ground truth the JIT lane is tested against.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution via im2col + one GEMM.

    x: (B, H, W, Ci), w: (3, 3, Ci, Co), b: (Co,) -> (B, H, W, Co)
    """
    bsz, h, wd, ci = x.shape
    co = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # windows: (B, H, W, Ci, 3, 3) -> columns ordered (ky, kx, ci)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * wd, 9 * ci)
    y = cols @ w.reshape(9 * ci, co) + b
    return y.reshape(bsz, h, wd, co)


def conv3x3_input_grad(dy, w):
    """Gradient of conv3x3_forward w.r.t. its input.

    Accumulates nine shifted GEMMs against the padded output gradient, which
    avoids a col2im scatter entirely.
    """
    bsz, h, wd, co = dy.shape
    ci = w.shape[2]
    dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dx = np.zeros((bsz, h, wd, ci), dtype=dy.dtype)
    for u in range(3):
        for v in range(3):
            sl = dyp[:, 2 - u:2 - u + h, 2 - v:2 - v + wd, :].reshape(-1, co)
            dx += (sl @ w[u, v].T).reshape(bsz, h, wd, ci)
    return dx


def conv3x3_weight_grad(x, dy):
    """Gradient of conv3x3_forward w.r.t. the kernel weights."""
    bsz, h, wd, ci = x.shape
    co = dy.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dy2 = dy.reshape(-1, co)
    dw = np.empty((3, 3, ci, co), dtype=dy.dtype)
    for u in range(3):
        for v in range(3):
            sl = xp[:, u:u + h, v:v + wd, :].reshape(-1, ci)
            dw[u, v] = sl.T @ dy2
    return dw


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; also returns the argmax index map.

    Index values are 0..3 in window order (0,0),(0,1),(1,0),(1,1); ties pick
    the first occurrence, matching np.argmax.
    """
    bsz, h, wd, c = x.shape
    ho, wo = h // 2, wd // 2
    win = (x.reshape(bsz, ho, 2, wo, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(bsz, ho, wo, c, 4))
    idx = win.argmax(axis=4).astype(np.int8)
    y = np.take_along_axis(win, idx[..., None].astype(np.int64), axis=4)[..., 0]
    return y, idx


def maxpool2_backward(dy, idx):
    """Routes each pooled gradient to its argmax position."""
    bsz, ho, wo, c = dy.shape
    scat = np.zeros((bsz, ho, wo, c, 4), dtype=dy.dtype)
    np.put_along_axis(scat, idx[..., None].astype(np.int64), dy[..., None], axis=4)
    return (scat.reshape(bsz, ho, wo, c, 2, 2)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(bsz, ho * 2, wo * 2, c))
