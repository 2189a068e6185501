"""Pure numpy implementations of the hot convolution kernels.

Used when the compiled ``_ckernels`` extension is unavailable. Both backends
must agree to floating point round-off; ``tests/test_kernels.py`` checks it.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["im2col", "col2im", "blur_separable"]


def im2col(xp, k):
    """Unfold a zero-padded batch ``(N, C, Hp, Wp)`` into ``(N, H, W, C*k*k)``."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    n, c, h, w = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h, w, c * k * k)


def col2im(cols, c, k, hp, wp):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``(N, C, Hp, Wp)``."""
    n, h, w, _ = cols.shape
    cols = cols.reshape(n, h, w, c, k, k)
    out = np.zeros((n, c, hp, wp))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def blur_separable(xp, kern):
    """Apply a 1-D kernel along rows then columns of a padded ``(C, Hp, Wp)`` image."""
    k = kern.shape[0]
    c, hp, wp = xp.shape
    h, w = hp - k + 1, wp - k + 1
    tmp = np.zeros((c, hp, w))
    for j in range(k):
        tmp += kern[j] * xp[:, :, j:j + w]
    out = np.zeros((c, h, w))
    for i in range(k):
        out += kern[i] * tmp[:, i:i + h, :]
    return out
