# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: conv patch gather/scatter and the fused Adam update.

Semantics mirror moepolicy.kernels._ref; both backends must agree to float
rounding order.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
           int ph0, int ph1, int pw0, int pw1):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + ph0 + ph1 - kh) // sh + 1
    cdef Py_ssize_t ow = (w + pw0 + pw1 - kw) // sw + 1
    out_np = np.zeros((b * oh * ow, kh * kw * c),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t n, i, j, p, q, k, row, ih, iw
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                row = (n * oh + i) * ow + j
                for p in range(kh):
                    ih = i * sh + p - ph0
                    if ih < 0 or ih >= h:
                        continue
                    for q in range(kw):
                        iw = j * sw + q - pw0
                        if iw < 0 or iw >= w:
                            continue
                        for k in range(c):
                            out[row, (p * kw + q) * c + k] = x[n, ih, iw, k]
    return out_np


def col2im(real[:, ::1] cols, int b, int h, int w, int c, int kh, int kw,
           int sh, int sw, int ph0, int ph1, int pw0, int pw1):
    cdef Py_ssize_t oh = (h + ph0 + ph1 - kh) // sh + 1
    cdef Py_ssize_t ow = (w + pw0 + pw1 - kw) // sw + 1
    out_np = np.zeros((b, h, w, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t n, i, j, p, q, k, row, ih, iw
    for p in range(kh):
        for q in range(kw):
            for n in range(b):
                for i in range(oh):
                    ih = i * sh + p - ph0
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(ow):
                        iw = j * sw + q - pw0
                        if iw < 0 or iw >= w:
                            continue
                        row = (n * oh + i) * ow + j
                        for k in range(c):
                            out[n, ih, iw, k] += cols[row, (p * kw + q) * c + k]
    return out_np


def adam_step(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
              double lr, double beta1, double beta2, double eps,
              double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0], i
    out_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_np
    cdef real b1 = <real> beta1, b2 = <real> beta2
    cdef real a1 = <real> (1.0 - beta1), a2 = <real> (1.0 - beta2)
    cdef real rlr = <real> lr, reps = <real> eps
    cdef real rbc1 = <real> bc1, rbc2 = <real> bc2
    cdef real mi, vi
    for i in range(n):
        mi = b1 * m[i] + a1 * g[i]
        vi = b2 * v[i] + a2 * (g[i] * g[i])
        m[i] = mi
        v[i] = vi
        out[i] = p[i] - rlr * (mi / rbc1) / (<real> sqrt(vi / rbc2) + reps)
    return out_np
