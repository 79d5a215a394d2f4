"""Multi-stream residual machinery: expansion, simplex pre-mixing, post
scattering, doubly stochastic residual mixing, layer update, aggregation.

The stream axis sits third in [B, T, n, D] activations. Expansion happens
once after the embedding and aggregation once before the head; mixing
parameters are per layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ShapeError
from .numerics import DoublyStochasticMatrix, SimplexWeights
from .ssm_core import affine
from .tensor import Tensor


@dataclass
class ExpanderParams:
    weight: Tensor  # [D, n*D]
    bias: Tensor    # [n*D]


@dataclass
class StreamLayerParams:
    pre_logits: Tensor   # [n]
    post_logits: Tensor  # [n]
    res_logits: Tensor   # [n, n]


def expand(h: Tensor, p: ExpanderParams, n: int) -> Tensor:
    """Affine map [B,T,D] -> [B,T,n,D] producing n streams."""
    bsz, seq, d = h.shape
    if p.weight.shape != (d, n * d):
        raise ShapeError(f"expander weight {p.weight.shape} does not match n*D={n * d}")
    out = affine(h, p.weight, p.bias)
    return out.reshape((bsz, seq, n, d))


def pre_mix(x: Tensor, w_pre: SimplexWeights) -> Tensor:
    """Convex combination over the stream axis: u = sum_i w_i x_i."""
    n = x.shape[2]
    if w_pre.n != n:
        raise ShapeError(f"{w_pre.n} weights for {n} streams")
    w = w_pre.w.reshape((1, 1, n, 1))
    return (x * w).sum(axis=2)


def scatter(y: Tensor, w_post: SimplexWeights) -> Tensor:
    """Per-stream update delta: delta_i = w_i * y_i.

    ``y`` is either a single [B,T,D] tensor (broadcast across streams, the
    adapter-free path) or a per-stream [B,T,n,D] tensor from the
    post-adapter.
    """
    n = w_post.n
    w = w_post.w.reshape((1, 1, n, 1))
    if y.ndim == 3:
        bsz, seq, d = y.shape
        return y.reshape((bsz, seq, 1, d)) * w
    if y.ndim == 4:
        if y.shape[2] != n:
            raise ShapeError(f"{n} weights for {y.shape[2]} streams")
        return y * w
    raise ShapeError(f"scatter input must be [B,T,D] or [B,T,n,D], got {y.shape}")


def residual_mix(x: Tensor, h: DoublyStochasticMatrix) -> Tensor:
    """x_mixed_i = sum_j H_ij x_j; gradients flow through H to its logits."""
    if x.shape[2] != h.n:
        raise ShapeError(f"{h.n}x{h.n} mixing matrix for {x.shape[2]} streams")
    return tt.mix_streams(h.h, x)


def layer_update(x: Tensor, delta: Tensor, h: DoublyStochasticMatrix) -> Tensor:
    """X+ = residual_mix(X, H) + delta."""
    if x.shape != delta.shape:
        raise ShapeError(f"state {x.shape} vs delta {delta.shape}")
    return residual_mix(x, h) + delta


def aggregate(x: Tensor, w_agg: SimplexWeights) -> Tensor:
    """Collapse streams to a single hidden state (same kernel as pre_mix)."""
    return pre_mix(x, w_agg)


def replicate_expander(d: int, n: int, rng: np.random.Generator,
                       noise: float = 1e-3, dtype=np.float64) -> np.ndarray:
    """n stacked identities plus small noise: every stream starts near h."""
    w = np.tile(np.eye(d), (1, n))
    if noise:
        w = w + rng.normal(0.0, noise, size=w.shape)
    return w.astype(dtype)
