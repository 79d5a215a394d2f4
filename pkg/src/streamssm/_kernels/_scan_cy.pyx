# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled diagonal scan kernels.

Same contract as ``_scan_np``; the time loop runs in C with the GIL
released. Compiled with -ffp-contract=off so the forward recurrence is
bit-identical to the numpy fallback.
"""

import numpy as np

ctypedef fused real:
    float
    double


def scan_forward(real[:, :, ::1] u, real[::1] a, real[::1] b, real[::1] c, real[::1] d):
    cdef Py_ssize_t B = u.shape[0]
    cdef Py_ssize_t T = u.shape[1]
    cdef Py_ssize_t D = u.shape[2]
    dtype = np.asarray(u).dtype
    z_np = np.empty((B, T, D), dtype=dtype)
    states_np = np.empty((B, T, D), dtype=dtype)
    cdef real[:, :, ::1] z = z_np
    cdef real[:, :, ::1] states = states_np
    cdef Py_ssize_t bi, t, k
    cdef real sv
    with nogil:
        for bi in range(B):
            for k in range(D):
                sv = a[k] * <real>0 + b[k] * u[bi, 0, k]
                states[bi, 0, k] = sv
                z[bi, 0, k] = c[k] * sv + d[k] * u[bi, 0, k]
            for t in range(1, T):
                for k in range(D):
                    sv = a[k] * states[bi, t - 1, k] + b[k] * u[bi, t, k]
                    states[bi, t, k] = sv
                    z[bi, t, k] = c[k] * sv + d[k] * u[bi, t, k]
    return z_np, states_np


def scan_backward(real[:, :, ::1] gz, real[:, :, ::1] u, real[::1] a, real[::1] b,
                  real[::1] c, real[::1] d, real[:, :, ::1] states):
    cdef Py_ssize_t B = u.shape[0]
    cdef Py_ssize_t T = u.shape[1]
    cdef Py_ssize_t D = u.shape[2]
    dtype = np.asarray(u).dtype
    gu_np = np.empty((B, T, D), dtype=dtype)
    ga_np = np.zeros(D, dtype=dtype)
    gb_np = np.zeros(D, dtype=dtype)
    gc_np = np.zeros(D, dtype=dtype)
    gd_np = np.zeros(D, dtype=dtype)
    gs_np = np.zeros(D, dtype=dtype)
    cdef real[:, :, ::1] gu = gu_np
    cdef real[::1] ga = ga_np
    cdef real[::1] gb = gb_np
    cdef real[::1] gc = gc_np
    cdef real[::1] gd = gd_np
    cdef real[::1] gs = gs_np
    cdef Py_ssize_t bi, t, k
    cdef real gzt, gsv
    with nogil:
        for bi in range(B):
            for k in range(D):
                gs[k] = 0
            for t in range(T - 1, -1, -1):
                for k in range(D):
                    gzt = gz[bi, t, k]
                    gc[k] += gzt * states[bi, t, k]
                    gd[k] += gzt * u[bi, t, k]
                    gsv = gs[k] * a[k] + gzt * c[k]
                    gs[k] = gsv
                    if t > 0:
                        ga[k] += gsv * states[bi, t - 1, k]
                    gb[k] += gsv * u[bi, t, k]
                    gu[bi, t, k] = gzt * d[k] + gsv * b[k]
    return gu_np, ga_np, gb_np, gc_np, gd_np
