"""Single-stream SSM block: norm, gated projection, causal depthwise conv,
diagonal state-space scan, gating, and output projection.

The scan recurrence always runs in float32 or wider regardless of activation
precision, through the compiled kernel when available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as tt
from .errors import NumericError, ShapeError
from .numerics import RmsNormParams, rms_norm, silu
from .tensor import Tensor, _accumulate, _node

# Margin keeping the decay a = sigmoid(a_logits) strictly inside (0, 1).
DECAY_CLAMP = 1e-4


@dataclass
class SsmBlockParams:
    norm: RmsNormParams
    in_proj_w: Tensor      # [D, 2D]
    in_proj_b: Tensor      # [2D]
    conv_w: Tensor         # [D, k], depthwise, column k-1 is the newest tap
    a_logits: Tensor       # [D]
    b: Tensor              # [D]
    c: Tensor              # [D]
    d: Tensor              # [D]
    out_proj_w: Tensor     # [D, D]
    out_proj_b: Tensor     # [D]
    dropout_rate: float = 0.0


def affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Dense map over the trailing axis of an arbitrarily-batched input."""
    lead = x.shape[:-1]
    flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
    out = flat @ w
    if b is not None:
        out = out + b
    return out.reshape(lead + (w.shape[1],))


def gated_projection(h_norm: Tensor, params: SsmBlockParams) -> tuple[Tensor, Tensor]:
    """One affine map to 2D channels, split into (input path, gate)."""
    d = h_norm.shape[-1]
    if params.in_proj_w.shape != (d, 2 * d):
        raise ShapeError(f"in_proj weight {params.in_proj_w.shape} does not match D={d}")
    proj = affine(h_norm, params.in_proj_w, params.in_proj_b)
    u = tt.narrow(proj, proj.ndim - 1, 0, d)
    g = tt.narrow(proj, proj.ndim - 1, d, d)
    return u, g


def causal_depthwise_conv(u: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel causal convolution with left zero padding of k-1.

    out[t] = sum_j kernel[:, j] * u[t - (k-1) + j]; out[t] depends only on
    inputs at positions <= t.
    """
    if kernel.ndim != 2:
        raise ShapeError(f"conv kernel must be [D, k], got {kernel.shape}")
    bsz, seq, d = u.shape
    k = kernel.shape[1]
    if k < 1:
        raise ShapeError("conv kernel length must be >= 1")
    if kernel.shape[0] != d:
        raise ShapeError(f"conv kernel channels {kernel.shape[0]} != D={d}")

    padded = np.zeros((bsz, seq + k - 1, d), dtype=u.data.dtype)
    padded[:, k - 1:] = u.data
    out_data = np.zeros((bsz, seq, d), dtype=u.data.dtype)
    for j in range(k):
        out_data += kernel.data[:, j] * padded[:, j:j + seq]

    def bw(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[:, j] = np.einsum("btd,btd->d", g, padded[:, j:j + seq])
            _accumulate(kernel, gk)
        if u.requires_grad:
            gp = np.zeros_like(padded)
            for j in range(k):
                gp[:, j:j + seq] += kernel.data[:, j] * g
            _accumulate(u, gp[:, k - 1:])
    return _node(out_data, (u, kernel), bw)


def diagonal_scan(u: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """s_t = a*s_{t-1} + b*u_t; z_t = c*s_t + d*u_t, scanned over time.

    Computed in float32 at minimum (float64 inputs stay float64) and cast
    back to the activation dtype. States are stored for the backward pass.
    """
    for name, vec in (("a", a), ("b", b), ("c", c), ("d", d)):
        if vec.shape != (u.shape[-1],):
            raise ShapeError(f"scan parameter {name} has shape {vec.shape}, want ({u.shape[-1]},)")
    if not np.isfinite(u.data).all():
        raise NumericError("non-finite scan input")
    work = np.float64 if u.data.dtype == np.float64 else np.float32

    def up(t: Tensor) -> np.ndarray:
        return np.ascontiguousarray(t.data, dtype=work)

    u_w, a_w, b_w, c_w, d_w = up(u), up(a), up(b), up(c), up(d)
    z, states = _kernels.scan_forward(u_w, a_w, b_w, c_w, d_w)

    def bw(g):
        gz = np.ascontiguousarray(g, dtype=work)
        gu, ga, gb, gc, gd = _kernels.scan_backward(gz, u_w, a_w, b_w, c_w, d_w, states)
        if u.requires_grad:
            _accumulate(u, gu)
        if a.requires_grad:
            _accumulate(a, ga)
        if b.requires_grad:
            _accumulate(b, gb)
        if c.requires_grad:
            _accumulate(c, gc)
        if d.requires_grad:
            _accumulate(d, gd)
    return _node(z.astype(u.data.dtype, copy=False), (u, a, b, c, d), bw)


def decay_from_logits(a_logits: Tensor) -> Tensor:
    """sigmoid(a_logits) clamped strictly inside (0, 1)."""
    return tt.clip(tt.sigmoid(a_logits), DECAY_CLAMP, 1.0 - DECAY_CLAMP)


def ssm_block_forward(
    h: Tensor,
    params: SsmBlockParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Full block: norm -> gated projection -> conv -> SiLU -> scan -> gate
    -> output projection -> dropout (training only). Shape preserving."""
    h_norm = rms_norm(h, params.norm)
    u, g = gated_projection(h_norm, params)
    u = causal_depthwise_conv(u, params.conv_w)
    u = silu(u)
    a = decay_from_logits(params.a_logits)
    z = diagonal_scan(u, a, params.b, params.c, params.d)
    gated = z * tt.sigmoid(g)
    out = affine(gated, params.out_proj_w, params.out_proj_b)
    if training and params.dropout_rate > 0.0:
        if rng is None:
            raise NumericError("training-mode dropout requires an RNG")
        out = tt.dropout(out, params.dropout_rate, rng)
    return out
