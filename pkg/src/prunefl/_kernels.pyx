# cython: language_level=3
"""Compiled inner loops. Semantics mirror ``_kernels_py`` bit for bit."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def spmm_coo(const long long[::1] rows, const long long[::1] cols,
             const double[::1] vals, const double[:, ::1] dense, Py_ssize_t m):
    """Row-major coordinate list times dense matrix, accumulated in storage order."""
    cdef Py_ssize_t n = dense.shape[1]
    cdef Py_ssize_t nnz = vals.shape[0]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, j, r, c
    cdef double v
    for p in range(nnz):
        r = rows[p]
        c = cols[p]
        v = vals[p]
        for j in range(n):
            out[r, j] += v * dense[c, j]
    return out_arr


def greedy_prefix(const double[::1] ratio, const double[::1] gain,
                  const double[::1] cost, double delta0, double time0):
    """Length of the accepted prefix of a ratio-sorted candidate list."""
    cdef Py_ssize_t k, n = ratio.shape[0]
    cdef double delta = delta0, time = time0, gamma
    for k in range(n):
        gamma = delta / time if time > 0.0 else 0.0
        if ratio[k] > 0.0 and ratio[k] >= gamma:
            delta += gain[k]
            time += cost[k]
        else:
            return k
    return n


def im2col(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t oh = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - k) // stride + 1
    out_arr = np.zeros((C * k * k, N * oh * ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, row, hh, base, j_lo, j_hi, off
    cdef const double* src
    cdef double* dst
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                # output columns j whose input column j*stride+kj-pad is inside the image
                j_lo = _ceil_div(pad - kj, stride) if pad > kj else 0
                j_hi = (W - 1 + pad - kj) // stride + 1 if W - 1 + pad - kj >= 0 else 0
                if j_hi > ow:
                    j_hi = ow
                for n in range(N):
                    base = n * oh * ow
                    for i in range(oh):
                        hh = i * stride + ki - pad
                        if hh < 0 or hh >= H:
                            continue
                        src = &x[n, c, hh, 0]
                        dst = &out[row, base + i * ow]
                        off = kj - pad
                        for j in range(j_lo, j_hi):
                            dst[j] = src[j * stride + off]
    return out_arr


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b):
    return (a + b - 1) // b


def col2im(const double[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t oh = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t HP = H + 2 * pad, WP = W + 2 * pad
    padded_arr = np.zeros((N, C, HP, WP), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = padded_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, row, base
    for ki in range(k):
        for kj in range(k):
            for c in range(C):
                row = (c * k + ki) * k + kj
                for n in range(N):
                    base = n * oh * ow
                    for i in range(oh):
                        for j in range(ow):
                            xp[n, c, i * stride + ki, j * stride + kj] += cols[row, base + i * ow + j]
    if pad == 0:
        return padded_arr
    return np.ascontiguousarray(padded_arr[:, :, pad:pad + H, pad:pad + W])
