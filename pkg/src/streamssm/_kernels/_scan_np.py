"""Pure-numpy diagonal scan kernels (fallback backend).

The recurrence is sequential over the time axis, so this backend pays one
Python-level iteration per step; the compiled backend in ``_scan_cy`` runs
the same arithmetic in C. Forward results are bit-identical between the two
(the extension is compiled with FP contraction disabled); backward reductions
differ only in summation order.
"""

import numpy as np


def scan_forward(u, a, b, c, d):
    """Run s_t = a*s_{t-1} + b*u_t, z_t = c*s_t + d*u_t over axis 1.

    Returns (z, states) where states[:, t] = s_t is kept for the backward
    pass. All arrays share u's dtype (float32 or float64).
    """
    B, T, D = u.shape
    z = np.empty_like(u)
    states = np.empty_like(u)
    s = np.zeros((B, D), dtype=u.dtype)
    for t in range(T):
        ut = u[:, t]
        s = a * s + b * ut
        states[:, t] = s
        z[:, t] = c * s + d * ut
    return z, states


def scan_backward(gz, u, a, b, c, d, states):
    """Reverse-mode sweep of the diagonal recurrence.

    gs_t = c*gz_t + a*gs_{t+1} is carried backward; parameter gradients
    reduce over batch and time.
    """
    B, T, D = u.shape
    gu = np.empty_like(u)
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    gc = np.zeros_like(c)
    gd = np.zeros_like(d)
    gs = np.zeros((B, D), dtype=u.dtype)
    for t in range(T - 1, -1, -1):
        gzt = gz[:, t]
        ut = u[:, t]
        gc += (gzt * states[:, t]).sum(axis=0)
        gd += (gzt * ut).sum(axis=0)
        gs = gs * a + gzt * c
        if t > 0:
            ga += (gs * states[:, t - 1]).sum(axis=0)
        gb += (gs * ut).sum(axis=0)
        gu[:, t] = gzt * d + gs * b
    return gu, ga, gb, gc, gd
