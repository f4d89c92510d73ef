"""Pure-numpy versions of the compiled kernels.

Every function here produces results bitwise identical to its counterpart
in ``_kernels.pyx`` (same accumulation order), so the backend choice never
changes a simulation trajectory.
"""
import numpy as np


def spmm_coo(rows, cols, vals, dense, m):
    out = np.zeros((m, dense.shape[1]), dtype=np.float64)
    if len(vals):
        # np.add.at is unbuffered and applies updates in index order.
        np.add.at(out, rows, vals[:, None] * dense[cols])
    return out


def greedy_prefix(ratio, gain, cost, delta0, time0):
    n = len(ratio)
    if n == 0:
        return 0
    # cumsum accumulates left to right, matching the scalar loop.
    delta = np.cumsum(np.concatenate(([delta0], gain)))[:-1]
    time = np.cumsum(np.concatenate(([time0], cost)))[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(time > 0.0, delta / np.where(time > 0.0, time, 1.0), 0.0)
    ok = (ratio > 0.0) & (ratio >= gamma)
    bad = np.flatnonzero(~ok)
    return int(bad[0]) if len(bad) else n


def im2col(x, k, stride, pad):
    N, C, H, W = x.shape
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (C, k, k, N, oh, ow), (sc, sh, sw, sn, sh * stride, sw * stride)
    )
    return np.ascontiguousarray(win.reshape(C * k * k, N * oh * ow))


def col2im(cols, N, C, H, W, k, stride, pad):
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    c6 = cols.reshape(C, k, k, N, oh, ow)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += (
                c6[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
