"""Stream-specialized adapters.

A shared bottleneck (down-projection, SiLU, up-projection) with per-stream
scaling vectors applied inside the bottleneck. The pre-adapter updates each
stream in place (residual form); the post-adapter turns the single-stream
block output into a per-stream tensor prior to scattering.

The up-projection is zero-initialized and carries no bias, so a freshly
constructed adapter is an exact identity (pre) or exact broadcast (post).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import NumericError, ShapeError
from .numerics import RmsNormParams, rms_norm, silu
from .tensor import Tensor


@dataclass
class AdapterParams:
    norm: RmsNormParams
    w_down: Tensor  # [D, r]
    w_up: Tensor    # [r, D]
    gamma: Tensor   # [n, r] per-stream bottleneck scaling
    dropout_rate: float = 0.0


def _bottleneck(x: Tensor, p: AdapterParams) -> Tensor:
    """phi(W_down Norm(x)) for x of shape [..., D] -> [..., r]."""
    normed = rms_norm(x, p.norm)
    lead = normed.shape[:-1]
    flat = normed.reshape((-1, normed.shape[-1]))
    return silu(flat @ p.w_down).reshape(lead + (p.w_down.shape[1],))


def _maybe_drop(t: Tensor, p: AdapterParams, training: bool,
                rng: np.random.Generator | None) -> Tensor:
    if training and p.dropout_rate > 0.0:
        if rng is None:
            raise NumericError("training-mode adapter dropout requires an RNG")
        return tt.dropout(t, p.dropout_rate, rng)
    return t


def pre_adapter(x: Tensor, p: AdapterParams, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """X_i <- X_i + Drop(W_up(phi(W_down Norm(X_i)) * gamma_i))."""
    bsz, seq, n, d = x.shape
    if p.gamma.shape[0] != n:
        raise ShapeError(f"gamma has {p.gamma.shape[0]} rows for {n} streams")
    r = p.w_down.shape[1]
    bottle = _bottleneck(x, p)                                # [B,T,n,r]
    scaled = bottle * p.gamma.reshape((1, 1, n, r))
    up = (scaled.reshape((-1, r)) @ p.w_up).reshape((bsz, seq, n, d))
    return x + _maybe_drop(up, p, training, rng)


def post_adapter(y: Tensor, p: AdapterParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """y_i = y + Drop(W_up(phi(W_down Norm(y)) * gamma_i)) for every stream.

    Norm(y) and the down-projection are computed once and reused across
    streams; only the gamma scaling and what follows is per stream.
    """
    bsz, seq, d = y.shape
    n, r = p.gamma.shape
    bottle = _bottleneck(y, p)                                # [B,T,r], shared
    scaled = bottle.reshape((bsz, seq, 1, r)) * p.gamma.reshape((1, 1, n, r))
    up = (scaled.reshape((-1, r)) @ p.w_up).reshape((bsz, seq, n, d))
    return y.reshape((bsz, seq, 1, d)) + _maybe_drop(up, p, training, rng)


def adapter_param_count(d: int, r: int, n: int) -> int:
    """Parameters one adapter adds: bottleneck pair, gammas, norm gain."""
    return d * r + r * d + n * r + d


def init_adapter(d: int, r: int, n: int, rng: np.random.Generator,
                 dropout_rate: float, dtype=np.float64) -> AdapterParams:
    """w_up starts at zero so the adapter is an exact identity at init."""
    return AdapterParams(
        norm=RmsNormParams(gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True)),
        w_down=Tensor(rng.normal(0.0, 0.02, size=(d, r)).astype(dtype), requires_grad=True),
        w_up=Tensor(np.zeros((r, d), dtype=dtype), requires_grad=True),
        gamma=Tensor(np.ones((n, r), dtype=dtype), requires_grad=True),
        dropout_rate=dropout_rate,
    )
