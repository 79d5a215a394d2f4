"""Shared mathematical kernels.

Sinkhorn projection onto the doubly stochastic matrices, softmax simplex
weights, RMSNorm, SiLU, a power-iteration spectral norm estimate, and the
central finite-difference gradient checker that every module's tests lean on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tt
from .errors import NumericError, ShapeError
from .tensor import Tensor


@dataclass
class DoublyStochasticMatrix:
    """A projected mixing matrix plus its measured normalization residuals.

    ``row_residual`` / ``col_residual`` are the actual max deviations of the
    row/column sums from 1 recorded at construction, never assumed zero.
    """

    h: Tensor
    row_residual: float
    col_residual: float

    @property
    def n(self) -> int:
        return self.h.shape[0]


@dataclass
class SimplexWeights:
    """Softmax-parameterized convex weights over streams."""

    logits: Tensor
    w: Tensor

    @property
    def n(self) -> int:
        return self.w.shape[0]


@dataclass
class RmsNormParams:
    gain: Tensor
    epsilon: float = 1e-6


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def sinkhorn_project(z, iterations: int) -> DoublyStochasticMatrix:
    """Project logits onto the doubly stochastic matrices.

    Entries are exponentiated (after subtracting the per-row max, which the
    subsequent normalizations make an exact, not approximate, shift) and then
    alternately row- and column-normalized ``iterations`` times, rows first.
    The final applied operation is a column normalization, so the reported
    row residual is an honest measure of convergence. Gradients flow through
    every iteration back to the logits.
    """
    z = _as_tensor(z)
    if z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise ShapeError(f"mixing logits must be square, got {z.shape}")
    if iterations < 1:
        raise NumericError(f"iterations must be >= 1, got {iterations}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("non-finite mixing logits")
    shift = z.data.max(axis=1, keepdims=True)  # detached; row-scale invariant
    h = tt.exp(z - shift)
    for _ in range(iterations):
        h = h / h.sum(axis=1, keepdims=True)
        h = h / h.sum(axis=0, keepdims=True)
    row_residual = float(np.abs(h.data.sum(axis=1) - 1.0).max())
    col_residual = float(np.abs(h.data.sum(axis=0) - 1.0).max())
    return DoublyStochasticMatrix(h=h, row_residual=row_residual, col_residual=col_residual)


def simplex_weights(logits) -> SimplexWeights:
    """Softmax over a logit vector: non-negative weights summing to one."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"simplex logits must be a vector, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite simplex logits")
    e = tt.exp(logits - logits.data.max())
    w = e / e.sum()
    return SimplexWeights(logits=logits, w=w)


def rms_norm(x: Tensor, p: RmsNormParams) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the trailing axis.

    Half-precision inputs are normalized in float32 and cast back, so the
    statistic never accumulates in reduced precision.
    """
    d = p.gain.shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"trailing axis {x.shape[-1]} does not match gain size {d}")
    half = x.dtype == np.float16
    if half:
        x = tt.cast(x, np.float32)
    ms = (x * x).mean(axis=-1, keepdims=True)
    normed = x / tt.sqrt(ms + p.epsilon)
    out = normed * p.gain.reshape((1,) * (x.ndim - 1) + (d,))
    return tt.cast(out, np.float16) if half else out


def silu(x: Tensor) -> Tensor:
    return x * tt.sigmoid(x)


def spectral_norm_estimate(h: np.ndarray, iters: int) -> float:
    """Power-iteration lower bound on the largest singular value.

    Iterates v <- normalize(H^T H v) from a deterministic start; the Rayleigh
    estimate is monotone nondecreasing in the iteration count. Diagnostics
    only, not differentiable.
    """
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite matrix")
    n = h.shape[1]
    v = np.full(n, 1.0 / np.sqrt(n))
    est = 0.0
    for _ in range(iters):
        hv = h @ v
        nv = h.T @ hv
        norm = np.linalg.norm(nv)
        if norm == 0.0:
            return float(np.linalg.norm(hv))
        v = nv / norm
        est = float(np.linalg.norm(h @ v))
    return est


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-5,
    coords: np.ndarray | None = None,
    rtol_floor: float = 1.0,
) -> float:
    """Central-difference gradient check against the analytic backward pass.

    Evaluates ``f`` (a scalar-valued function of one tensor) in float64 and
    returns max_i |analytic_i - numeric_i| / max(rtol_floor, |numeric_i|)
    over the checked coordinates (all of them unless ``coords`` is given).
    """
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ShapeError("finite_difference_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite function value at the expansion point")
    out.backward()
    analytic = np.zeros_like(point) if x.grad is None else x.grad.reshape(-1)

    flat = point.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    worst = 0.0
    with tt.no_grad():
        for idx in np.asarray(coords).reshape(-1):
            bumped = flat.copy()
            bumped[idx] += step
            f_plus = float(f(Tensor(bumped.reshape(point.shape))).data)
            bumped[idx] -= 2 * step
            f_minus = float(f(Tensor(bumped.reshape(point.shape))).data)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("non-finite function value during perturbation")
            numeric = (f_plus - f_minus) / (2 * step)
            err = abs(analytic[idx] - numeric) / max(rtol_floor, abs(numeric))
            worst = max(worst, err)
    return worst
