"""End-to-end model assembly for the three variants.

``baseline`` is a single-stream residual stack of SSM blocks. ``mhc_static``
expands the hidden state into n streams once after the embedding, runs every
layer with simplex pre-mixing, doubly stochastic residual mixing, and simplex
scattering, then aggregates once before the tied head. ``mhc_adapters`` adds
the stream-specialized bottleneck adapters around each layer's block.

Forward passes are pure functions of a flat name -> Tensor parameter dict, so
the finite-difference oracle can substitute any single parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as tt
from .adapters import AdapterParams, adapter_param_count, post_adapter, pre_adapter
from .errors import ConfigError, DataError, NumericError
from .numerics import (DoublyStochasticMatrix, RmsNormParams, SimplexWeights,
                       rms_norm, simplex_weights, sinkhorn_project)
from .ssm_core import SsmBlockParams, ssm_block_forward
from .streams import (ExpanderParams, StreamLayerParams, aggregate, expand,
                      layer_update, pre_mix, replicate_expander, scatter)
from .tensor import Tensor

VARIANTS = ("baseline", "mhc_static", "mhc_adapters")


@dataclass
class ModelConfig:
    variant: str = "baseline"
    vocab_size: int = 50257
    dim: int = 512
    layers: int = 8
    seq_len: int = 256
    streams: int = 1
    conv_kernel: int = 4
    adapter_rank: int = 16
    sinkhorn_iters: int = 5
    dropout: float = 0.1
    adapter_dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("vocab_size", "dim", "layers", "seq_len", "streams",
                     "conv_kernel", "sinkhorn_iters"):
            if getattr(self, name) < (0 if name == "layers" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.variant == "baseline" and self.streams != 1:
            raise ConfigError("baseline variant requires streams == 1")
        if self.variant == "mhc_adapters" and self.adapter_rank < 1:
            raise ConfigError("adapter_rank must be >= 1 when adapters are enabled")
        for name in ("dropout", "adapter_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {rate}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def multi_stream(self) -> bool:
        return self.variant in ("mhc_static", "mhc_adapters")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


# -- initialization ----------------------------------------------------------


def _param(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def build_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Initialize the full parameter dict for a config, seeded by cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dt, d, n = cfg.np_dtype, cfg.dim, cfg.streams
    params: dict[str, Tensor] = {}
    params["embed.weight"] = _param(rng, (cfg.vocab_size, d), 0.02, dt)
    params["pos.weight"] = _param(rng, (cfg.seq_len, d), 0.02, dt)

    if cfg.multi_stream:
        params["expander.weight"] = Tensor(
            replicate_expander(d, n, rng, noise=1e-3, dtype=dt), requires_grad=True)
        params["expander.bias"] = _zeros(n * d, dt)

    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        params[p + "block.norm.gain"] = _ones(d, dt)
        params[p + "block.in_proj.weight"] = _param(rng, (d, 2 * d), 0.02, dt)
        params[p + "block.in_proj.bias"] = _zeros(2 * d, dt)
        bound = 1.0 / math.sqrt(cfg.conv_kernel)
        params[p + "block.conv.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(d, cfg.conv_kernel)).astype(dt),
            requires_grad=True)
        # Decay rates spread over (0.5, 0.99) give multi-timescale memory.
        decay = np.linspace(0.5, 0.99, d)
        params[p + "block.a_logits"] = Tensor(
            np.log(decay / (1.0 - decay)).astype(dt), requires_grad=True)
        params[p + "block.b"] = _param(rng, (d,), 0.1, dt)
        params[p + "block.c"] = _param(rng, (d,), 0.1, dt)
        params[p + "block.d"] = _ones(d, dt)
        params[p + "block.out_proj.weight"] = _param(rng, (d, d), 0.02, dt)
        params[p + "block.out_proj.bias"] = _zeros(d, dt)
        if cfg.multi_stream:
            params[p + "mix.pre_logits"] = _zeros(n, dt)
            params[p + "mix.post_logits"] = _zeros(n, dt)
            params[p + "mix.res_logits"] = _zeros((n, n), dt)
        if cfg.variant == "mhc_adapters":
            for site in ("pre_adapter", "post_adapter"):
                params[p + site + ".norm.gain"] = _ones(d, dt)
                params[p + site + ".down.weight"] = _param(rng, (d, cfg.adapter_rank), 0.02, dt)
                params[p + site + ".up.weight"] = _zeros((cfg.adapter_rank, d), dt)
                params[p + site + ".gamma"] = _ones((n, cfg.adapter_rank), dt)

    if cfg.multi_stream:
        params["agg_logits"] = _zeros(n, dt)
    params["final_norm.gain"] = _ones(d, dt)
    # The head is tied to embed.weight: same Tensor, no extra entry.
    return params


# -- parameter views ---------------------------------------------------------


def _block_params(params: dict[str, Tensor], prefix: str, cfg: ModelConfig,
                  cast) -> SsmBlockParams:
    return SsmBlockParams(
        norm=RmsNormParams(gain=params[prefix + "norm.gain"]),
        in_proj_w=cast(params[prefix + "in_proj.weight"]),
        in_proj_b=cast(params[prefix + "in_proj.bias"]),
        conv_w=cast(params[prefix + "conv.weight"]),
        a_logits=params[prefix + "a_logits"],
        b=params[prefix + "b"],
        c=params[prefix + "c"],
        d=params[prefix + "d"],
        out_proj_w=cast(params[prefix + "out_proj.weight"]),
        out_proj_b=cast(params[prefix + "out_proj.bias"]),
        dropout_rate=cfg.dropout,
    )


def _adapter_params(params: dict[str, Tensor], prefix: str, cfg: ModelConfig,
                    cast) -> AdapterParams:
    return AdapterParams(
        norm=RmsNormParams(gain=params[prefix + "norm.gain"]),
        w_down=cast(params[prefix + "down.weight"]),
        w_up=cast(params[prefix + "up.weight"]),
        gamma=cast(params[prefix + "gamma"]),
        dropout_rate=cfg.adapter_dropout,
    )


# -- forward -----------------------------------------------------------------


def model_forward(
    params: dict[str, Tensor],
    tokens: np.ndarray,
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    compute_dtype=None,
    check_finite: bool = True,
) -> Tensor:
    """Map token ids [B, T] to logits [B, T, V].

    ``compute_dtype`` of float16 enables the reduced-precision path: dense
    projections run in half-precision storage while normalization, simplex /
    Sinkhorn weights, the scan, and the loss stay in float32 or wider.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DataError(f"tokens must be [B, T], got shape {tokens.shape}")
    bsz, seq = tokens.shape
    if seq > cfg.seq_len:
        raise DataError(f"sequence length {seq} exceeds configured max {cfg.seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError("token id out of range [0, vocab_size)")

    cd = np.dtype(compute_dtype) if compute_dtype is not None else cfg.np_dtype

    def cast(t: Tensor) -> Tensor:
        return tt.cast(t, cd)

    def finite_or_raise(t: Tensor, where: str) -> None:
        if check_finite and not np.isfinite(t.data).all():
            raise NumericError(f"non-finite activations after {where}")

    embed = cast(params["embed.weight"])
    pos = tt.narrow(cast(params["pos.weight"]), 0, 0, seq).reshape((1, seq, cfg.dim))
    h = tt.embedding(embed, tokens) + pos
    if training and cfg.dropout > 0.0:
        if rng is None:
            raise NumericError("training-mode dropout requires an RNG")
        h = tt.dropout(h, cfg.dropout, rng)
    finite_or_raise(h, "embedding")

    if not cfg.multi_stream:
        for layer in range(cfg.layers):
            block = _block_params(params, f"layers.{layer}.block.", cfg, cast)
            h = h + ssm_block_forward(h, block, training=training, rng=rng)
            finite_or_raise(h, f"layer {layer}")
        h_out = h
    else:
        n = cfg.streams
        expander = ExpanderParams(weight=cast(params["expander.weight"]),
                                  bias=cast(params["expander.bias"]))
        x = expand(h, expander, n)
        for layer in range(cfg.layers):
            p = f"layers.{layer}."
            block = _block_params(params, p + "block.", cfg, cast)
            if cfg.variant == "mhc_adapters":
                x = pre_adapter(x, _adapter_params(params, p + "pre_adapter.", cfg, cast),
                                training=training, rng=rng)
            w_pre = _simplex_in(params[p + "mix.pre_logits"], cast)
            w_post = _simplex_in(params[p + "mix.post_logits"], cast)
            u = pre_mix(x, w_pre)
            y = ssm_block_forward(u, block, training=training, rng=rng)
            if cfg.variant == "mhc_adapters":
                y = post_adapter(y, _adapter_params(params, p + "post_adapter.", cfg, cast),
                                 training=training, rng=rng)
            delta = scatter(y, w_post)
            mix = _sinkhorn_in(params[p + "mix.res_logits"], cfg.sinkhorn_iters, cast)
            x = layer_update(x, delta, mix)
            finite_or_raise(x, f"layer {layer}")
        h_out = aggregate(x, _simplex_in(params["agg_logits"], cast))

    h_out = rms_norm(h_out, RmsNormParams(gain=params["final_norm.gain"]))
    flat = h_out.reshape((bsz * seq, cfg.dim))
    logits = flat @ embed.transpose()
    return logits.reshape((bsz, seq, cfg.vocab_size))


def _simplex_in(logits: Tensor, cast) -> SimplexWeights:
    sw = simplex_weights(logits)
    return SimplexWeights(logits=sw.logits, w=cast(sw.w))


def _sinkhorn_in(logits: Tensor, iterations: int, cast) -> DoublyStochasticMatrix:
    ds = sinkhorn_project(logits, iterations)
    return DoublyStochasticMatrix(h=cast(ds.h), row_residual=ds.row_residual,
                                  col_residual=ds.col_residual)


# -- loss and metrics --------------------------------------------------------


def sequence_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level cross-entropy over every position in the batch."""
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise DataError("target id out of range [0, vocab_size)")
    flat_logits = logits.reshape((-1, vocab))
    return tt.cross_entropy(flat_logits, targets.reshape(-1))


def perplexity(loss: float) -> float:
    loss = float(loss)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return math.exp(loss)


# -- census ------------------------------------------------------------------


def parameter_census(params: dict[str, Tensor]) -> list[tuple[str, tuple[int, ...], int]]:
    """Deterministic (name, shape, count) enumeration; the tied head adds 0."""
    return [(name, t.shape, t.size) for name, t in params.items()]


def total_parameters(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def block_param_count(d: int, k: int) -> int:
    # in/out projections + conv kernel + gain, two biases (2D + D), a/b/c/d
    return 3 * d * d + d * k + 8 * d


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count per variant (census must match this)."""
    d, n, layers = cfg.dim, cfg.streams, cfg.layers
    total = cfg.vocab_size * d + cfg.seq_len * d + layers * block_param_count(d, cfg.conv_kernel) + d
    if cfg.multi_stream:
        total += d * n * d + n * d                      # expander
        total += layers * (2 * n + n * n) + n           # mix logits + aggregation
    if cfg.variant == "mhc_adapters":
        total += layers * 2 * adapter_param_count(d, cfg.adapter_rank, n)
    return total


# -- convenience wrapper -----------------------------------------------------


class Model:
    """Bundles config, parameters, and the dropout RNG stream."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config.validate()
        self.params = params if params is not None else build_params(config)
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)

    def forward(self, tokens, training: bool = False, compute_dtype=None,
                check_finite: bool = True) -> Tensor:
        return model_forward(self.params, tokens, self.config, training=training,
                             rng=self.rng, compute_dtype=compute_dtype,
                             check_finite=check_finite)

    def loss(self, tokens, targets, training: bool = False, compute_dtype=None,
             check_finite: bool = True) -> Tensor:
        logits = self.forward(tokens, training=training, compute_dtype=compute_dtype,
                              check_finite=check_finite)
        return sequence_loss(logits, targets)

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state

    def with_variant(self, variant: str, **overrides) -> "ModelConfig":
        return replace(self.config, variant=variant, **overrides)
