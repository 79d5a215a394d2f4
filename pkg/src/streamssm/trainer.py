"""Training loop: AdamW with decoupled decay, global gradient clipping,
optional reduced-precision mode with dynamic loss scaling, periodic
validation, metric logging, and checkpointing.

Data order is a pure function of (seed, epoch), so resuming from a
checkpoint reproduces an uninterrupted run bit-exactly in deterministic
full-precision mode.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tt
from .checkpoint import save_checkpoint
from .corpus import PackedDataset, batches
from .errors import ConfigError, DataError, NumericError
from .model import Model, perplexity
from .tensor import Tensor, global_grad_norm

LOSS_SCALE_INIT = 2.0 ** 16
LOSS_SCALE_MAX = 2.0 ** 24
LOSS_SCALE_MIN = 1.0
LOSS_SCALE_GROWTH_INTERVAL = 2000  # clean steps between doublings
NONFINITE_STREAK_LIMIT = 25


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    eval_interval: int = 500
    mixed_precision: bool = False
    seed: int = 0
    max_steps: int = 0            # 0 = run the full epoch budget
    log_interval: int = 100
    weight_decay_filter: str = "matrix"  # matrix | all | none

    def validate(self) -> "TrainConfig":
        for name in ("epochs", "batch_size", "eval_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.max_steps < 0:
            raise ConfigError("weight_decay and max_steps must be non-negative")
        if self.weight_decay_filter not in ("matrix", "all", "none"):
            raise ConfigError(f"unknown weight_decay_filter {self.weight_decay_filter!r}")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    loss_scale: float = LOSS_SCALE_INIT
    clean_steps: int = 0

    def to_dict(self) -> dict:
        return {"step": self.step, "loss_scale": self.loss_scale,
                "clean_steps": self.clean_steps, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(m=dict(d.get("m", {})), v=dict(d.get("v", {})),
                   step=int(d.get("step", 0)),
                   loss_scale=float(d.get("loss_scale", LOSS_SCALE_INIT)),
                   clean_steps=int(d.get("clean_steps", 0)))


def init_optimizer(params: dict[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def decays_weight(name: str, mode: str = "matrix") -> bool:
    """Decoupled decay applies to matrix weights and embeddings only: norms,
    gains, biases, scan vectors, simplex/mixing logits, and gammas are exempt.
    """
    if mode == "none":
        return False
    if mode == "all":
        return True
    return name.endswith(".weight")


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0,
               decay_filter: str = "matrix") -> None:
    """One AdamW update, in place. Decay is decoupled: applied directly to
    the weights scaled by lr, never through the gradient."""
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay and decays_weight(name, decay_filter):
            p.data *= 1.0 - lr * weight_decay
        denom = np.sqrt(v / bias2) + eps
        p.data -= (lr / bias1) * m / denom


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm/norm when the global (not per-tensor)
    2-norm exceeds max_norm. Returns the grads and the pre-clip norm."""
    norm = global_grad_norm(grads.values())
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


# -- metrics -------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    split: str           # train | val | val_final
    loss: float
    ppl: float
    tokens_per_sec: float = math.nan
    peak_mem_bytes: int = 0
    elapsed_s: float = 0.0

    CSV_COLUMNS = ("step", "split", "loss", "ppl", "tokens_per_sec",
                   "peak_mem_bytes", "elapsed_s")

    def row(self) -> list:
        tps = "" if math.isnan(self.tokens_per_sec) else f"{self.tokens_per_sec:.2f}"
        return [self.step, self.split, f"{self.loss:.6f}", f"{self.ppl:.4f}",
                tps, self.peak_mem_bytes, f"{self.elapsed_s:.3f}"]


class MetricsSink:
    """Appends records to a CSV file and/or keeps them in memory."""

    def __init__(self, csv_path=None, echo: bool = True):
        self.csv_path = Path(csv_path) if csv_path else None
        self.echo = echo
        self.records: list[MetricsRecord] = []
        if self.csv_path and not self.csv_path.exists():
            with open(self.csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(MetricsRecord.CSV_COLUMNS)

    def add(self, record: MetricsRecord) -> None:
        self.records.append(record)
        if self.csv_path:
            with open(self.csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow(record.row())
        if self.echo:
            tps = "" if math.isnan(record.tokens_per_sec) else f" {record.tokens_per_sec:8.1f} tok/s"
            print(f"[{record.split:>9}] step {record.step:>6}  "
                  f"loss {record.loss:.4f}  ppl {record.ppl:.2f}{tps}",
                  flush=True)


# -- evaluation ------------------------------------------------------------------


def evaluate(model: Model, val_ds: PackedDataset, batch_size: int,
             compute_dtype=None) -> tuple[float, float]:
    """Token-weighted mean cross-entropy over the full split, dropout off."""
    if val_ds.num_samples == 0:
        raise DataError("validation split has no full samples")
    total_loss = 0.0
    total_tokens = 0
    with tt.no_grad():
        for x, y in batches(val_ds, batch_size, shuffle=False, drop_last=False):
            loss = model.loss(x, y, training=False, compute_dtype=compute_dtype)
            total_loss += float(loss.data) * x.size
            total_tokens += x.size
    val_loss = total_loss / total_tokens
    return val_loss, perplexity(val_loss)


# -- single optimizer step --------------------------------------------------------


def optimizer_step(model: Model, x: np.ndarray, y: np.ndarray, tc: TrainConfig,
                   opt: OptimizerState) -> float | None:
    """Forward + backward + clip + AdamW. Returns the unscaled loss, or None
    when reduced-precision overflow skipped the step (scale already halved)."""
    mp = tc.mixed_precision
    compute_dtype = np.float16 if mp else None
    try:
        # Half-precision overflow anywhere in the forward is an expected
        # loss-scaling event, not an error; numpy's warnings about it are
        # silenced and NumericError becomes a skipped step.
        with np.errstate(over="ignore" if mp else "warn",
                         invalid="ignore" if mp else "warn"):
            loss_t = model.loss(x, y, training=True, compute_dtype=compute_dtype,
                                check_finite=not mp)
            loss = float(loss_t.data)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at step {opt.step + 1}")
            if mp:
                (loss_t * opt.loss_scale).backward()
            else:
                loss_t.backward()
    except NumericError:
        if not mp:
            raise
        for p in model.params.values():
            p.grad = None  # discard any partial backward state
        _backoff(opt)
        return None

    grads: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None

    if mp:
        inv = 1.0 / opt.loss_scale
        finite = True
        for g in grads.values():
            g *= inv
            if finite and not np.isfinite(g).all():
                finite = False
        if not finite:
            _backoff(opt)
            return None

    clip_gradients(grads, tc.clip_norm)
    adamw_step(model.params, grads, opt, lr=tc.lr, weight_decay=tc.weight_decay,
               decay_filter=tc.weight_decay_filter)
    if mp:
        opt.clean_steps += 1
        if opt.clean_steps >= LOSS_SCALE_GROWTH_INTERVAL:
            opt.loss_scale = min(opt.loss_scale * 2.0, LOSS_SCALE_MAX)
            opt.clean_steps = 0
    return loss


def _backoff(opt: OptimizerState) -> None:
    opt.loss_scale = max(opt.loss_scale * 0.5, LOSS_SCALE_MIN)
    opt.clean_steps = 0


# -- the training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    final: MetricsRecord
    checkpoint_path: str | None
    sink: MetricsSink


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    # Stateless: resuming at any step re-derives the same order.
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(epoch,))
    return np.random.default_rng(ss).permutation(n)


def _batch_for_step(ds: PackedDataset, tc: TrainConfig, step: int,
                    steps_per_epoch: int, perm_cache: dict) -> tuple[np.ndarray, np.ndarray]:
    epoch = step // steps_per_epoch
    index = step % steps_per_epoch
    if perm_cache.get("epoch") != epoch:
        perm_cache["epoch"] = epoch
        perm_cache["perm"] = _epoch_perm(tc.seed, epoch, ds.num_samples)
    rows = perm_cache["perm"][index * tc.batch_size:(index + 1) * tc.batch_size]
    xs = np.stack([ds.sample(i)[0] for i in rows])
    ys = np.stack([ds.sample(i)[1] for i in rows])
    return xs, ys


def train(model: Model, train_ds: PackedDataset, val_ds: PackedDataset,
          tc: TrainConfig, sink: MetricsSink | None = None,
          run_dir=None, opt: OptimizerState | None = None,
          start_step: int = 0) -> TrainResult:
    """Run the full training procedure.

    Evaluates on the complete validation split every ``eval_interval`` steps
    (dropout off), emits one metrics row per evaluation plus a final row, and
    writes a checkpoint at every evaluation and at the end. Pass ``opt`` and
    ``start_step`` (from a loaded checkpoint) to resume.
    """
    tc.validate()
    sink = sink if sink is not None else MetricsSink()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = train_ds.num_samples // tc.batch_size
    if steps_per_epoch == 0:
        raise DataError(
            f"corpus too small: {train_ds.num_samples} samples cannot fill a "
            f"batch of {tc.batch_size}")
    total_steps = tc.epochs * steps_per_epoch
    if tc.max_steps:
        total_steps = min(total_steps, tc.max_steps)
    if opt is None:
        opt = init_optimizer(model.params)

    perm_cache: dict = {}
    nonfinite_streak = 0
    window_loss, window_steps, window_tokens = 0.0, 0, 0
    window_t0 = time.perf_counter()
    t_start = time.perf_counter()
    ckpt_path = None

    def save(step: int, tag: str) -> str | None:
        if run_dir is None:
            return None
        path = run_dir / f"ckpt-{tag}.ssmckpt"
        # loop_step can differ from opt.step when loss-scaling skipped steps.
        opt_state = dict(opt.to_dict(), loop_step=step)
        save_checkpoint(path, model.config, model.params,
                        opt_state=opt_state, rng_state=model.rng_state())
        return str(path)

    step = start_step
    while step < total_steps:
        x, y = _batch_for_step(train_ds, tc, step, steps_per_epoch, perm_cache)
        loss = optimizer_step(model, x, y, tc, opt)
        step += 1
        if loss is None:
            nonfinite_streak += 1
            if nonfinite_streak > NONFINITE_STREAK_LIMIT:
                raise NumericError(
                    f"{nonfinite_streak} consecutive non-finite steps at step {step}; "
                    f"loss scale {opt.loss_scale}")
            continue
        nonfinite_streak = 0
        window_loss += loss
        window_steps += 1
        window_tokens += x.size

        if step % tc.log_interval == 0 and window_steps:
            dt = time.perf_counter() - window_t0
            mean_loss = window_loss / window_steps
            sink.add(MetricsRecord(
                step=step, split="train", loss=mean_loss, ppl=perplexity(mean_loss),
                tokens_per_sec=window_tokens / dt if dt > 0 else math.nan,
                elapsed_s=time.perf_counter() - t_start))
            window_loss, window_steps, window_tokens = 0.0, 0, 0
            window_t0 = time.perf_counter()

        if step % tc.eval_interval == 0 and step < total_steps:
            val_loss, ppl = evaluate(model, val_ds, tc.batch_size)
            sink.add(MetricsRecord(step=step, split="val", loss=val_loss, ppl=ppl,
                                   elapsed_s=time.perf_counter() - t_start))
            ckpt_path = save(step, f"step{step:07d}") or ckpt_path

    val_loss, ppl = evaluate(model, val_ds, tc.batch_size)
    final = MetricsRecord(step=step, split="val_final", loss=val_loss, ppl=ppl,
                          elapsed_s=time.perf_counter() - t_start)
    sink.add(final)
    ckpt_path = save(step, "final") or ckpt_path
    return TrainResult(final=final, checkpoint_path=ckpt_path, sink=sink)
