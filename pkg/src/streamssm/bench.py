"""Checkpoint-fair benchmarking.

Throughput is timed over full optimizer steps (forward + backward + update)
on synthetic random tokens. Because those steps modify weights, the model and
optimizer state are snapshotted before timing and restored bit-exactly
afterward; the reported validation loss and perplexity therefore come from
the untouched checkpoint. Peak memory is the high-water mark of the
package's own tensor allocator over the timed region.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, params_to_tensors
from .corpus import PackedDataset
from .errors import ConfigError, DataError, StreamSsmError
from .model import Model, perplexity
from .tensor import get_tracker
from .trainer import OptimizerState, TrainConfig, evaluate, init_optimizer, optimizer_step


@dataclass
class BenchConfig:
    warmup_steps: int = 5
    timed_steps: int = 20
    batch_size: int = 16
    seq_len: int = 0        # 0 = use the model's configured sequence length
    seed: int = 0

    def validate(self) -> "BenchConfig":
        if self.timed_steps < 1:
            raise ConfigError(f"timed_steps must be >= 1, got {self.timed_steps}")
        if self.warmup_steps < 0 or self.batch_size < 1 or self.seq_len < 0:
            raise ConfigError("invalid benchmark shape")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


@dataclass
class BenchReport:
    model: str
    val_loss: float
    ppl: float
    tokens_per_sec: float
    peak_mem_bytes: int

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- peak memory probe --------------------------------------------------------


def reset_peak_tracking() -> None:
    """Start (or restart) a peak-memory region from the current live set."""
    get_tracker().reset_peak()


def peak_memory_probe() -> int:
    """High-water mark of live tensor bytes since the last reset."""
    tracker = get_tracker()
    if not tracker.enabled:
        raise StreamSsmError("peak memory tracking was never enabled; call reset_peak_tracking()")
    return tracker.peak


# -- snapshot / restore --------------------------------------------------------


def _snapshot(model: Model, opt: OptimizerState) -> dict:
    return {
        "params": {k: t.data.copy() for k, t in model.params.items()},
        "m": {k: a.copy() for k, a in opt.m.items()},
        "v": {k: a.copy() for k, a in opt.v.items()},
        "step": opt.step,
        "loss_scale": opt.loss_scale,
        "clean_steps": opt.clean_steps,
        "rng": model.rng_state(),
    }


def _restore(model: Model, opt: OptimizerState, snap: dict) -> None:
    for k, t in model.params.items():
        t.data[...] = snap["params"][k]
    for k in opt.m:
        opt.m[k][...] = snap["m"][k]
        opt.v[k][...] = snap["v"][k]
    opt.step = snap["step"]
    opt.loss_scale = snap["loss_scale"]
    opt.clean_steps = snap["clean_steps"]
    model.set_rng_state(snap["rng"])


def _verify_restored(model: Model, opt: OptimizerState, snap: dict) -> None:
    for k, t in model.params.items():
        if t.data.tobytes() != snap["params"][k].tobytes():
            raise StreamSsmError(f"fairness violated: parameter {k} not restored bit-exactly")
    for k in opt.m:
        if (opt.m[k].tobytes() != snap["m"][k].tobytes()
                or opt.v[k].tobytes() != snap["v"][k].tobytes()):
            raise StreamSsmError(f"fairness violated: optimizer state for {k} not restored")


# -- the benchmark -------------------------------------------------------------


def run_fair_bench(model_ckpt, val_ds: PackedDataset, bc: BenchConfig,
                   tc: TrainConfig | None = None) -> BenchReport:
    """Time optimizer steps on synthetic tokens, restore, then evaluate.

    Order: snapshot -> untimed warmup -> timed steps -> restore (verified
    bit-exact) -> evaluation on the real validation split. Timing excludes
    snapshot/restore I/O. Runs shorter than 1 ms are rejected as
    unmeasurable.
    """
    bc.validate()
    tc = tc if tc is not None else TrainConfig()
    bundle = load_checkpoint(model_ckpt)
    model = Model(bundle.config, params=params_to_tensors(bundle.params))
    if bundle.rng_state is not None:
        model.set_rng_state(bundle.rng_state)
    opt = (OptimizerState.from_dict(bundle.opt_state)
           if bundle.opt_state is not None else init_optimizer(model.params))

    pre_loss, _ = evaluate(model, val_ds, bc.batch_size)

    snap = _snapshot(model, opt)
    seq_len = bc.seq_len or model.config.seq_len
    rng = np.random.default_rng(bc.seed)

    def synthetic_batch():
        block = rng.integers(0, model.config.vocab_size,
                             size=(bc.batch_size, seq_len + 1), dtype=np.int64)
        return block[:, :-1], block[:, 1:]

    for _ in range(bc.warmup_steps):
        x, y = synthetic_batch()
        optimizer_step(model, x, y, tc, opt)

    reset_peak_tracking()
    t0 = time.perf_counter()
    for _ in range(bc.timed_steps):
        x, y = synthetic_batch()
        optimizer_step(model, x, y, tc, opt)
    wall = time.perf_counter() - t0
    if wall < 1e-3:
        raise ConfigError(f"timed region lasted {wall * 1e3:.3f} ms; too short to measure")
    peak = peak_memory_probe()
    tokens_per_sec = bc.timed_steps * bc.batch_size * seq_len / wall

    _restore(model, opt, snap)
    _verify_restored(model, opt, snap)

    val_loss, ppl = evaluate(model, val_ds, bc.batch_size)
    if val_loss != pre_loss:
        raise StreamSsmError(
            f"fairness violated: post-restore evaluation {val_loss!r} differs "
            f"from pre-bench evaluation {pre_loss!r}")
    return BenchReport(model=model.config.variant, val_loss=val_loss, ppl=ppl,
                       tokens_per_sec=tokens_per_sec, peak_mem_bytes=peak)


# -- reporting -----------------------------------------------------------------


def write_reports_jsonl(reports: list[BenchReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_dict()) + "\n")


def read_reports_jsonl(path) -> list[BenchReport]:
    reports = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    reports.append(BenchReport(**json.loads(line)))
    except OSError as exc:
        raise DataError(f"cannot read benchmark report {path}: {exc}") from exc
    return reports


def compare_variants(reports: list[BenchReport]) -> list[dict]:
    """Rank reports (worst validation loss first, matching the convention
    that the baseline row leads) and attach deltas against the first row."""
    if len(reports) < 2:
        raise ConfigError("need at least two reports to compare")
    rows = sorted(reports, key=lambda r: -r.val_loss)
    first = rows[0]
    out = []
    for r in rows:
        out.append({
            "model": r.model,
            "val_loss": r.val_loss,
            "ppl": r.ppl,
            "tokens_per_sec": r.tokens_per_sec,
            "peak_mem_bytes": r.peak_mem_bytes,
            "loss_delta": first.val_loss - r.val_loss,
            "ppl_delta": first.ppl - r.ppl,
            "tokens_per_sec_pct": (
                (r.tokens_per_sec - first.tokens_per_sec) / first.tokens_per_sec * 100.0
                if first.tokens_per_sec else 0.0),
            "peak_mem_delta": r.peak_mem_bytes - first.peak_mem_bytes,
        })
    return out


def format_comparison(rows: list[dict]) -> str:
    """Aligned console table with the four benchmark metric columns plus
    deltas against the leading row."""
    header = (f"{'Model':<16} {'Val Loss':>9} {'PPL':>10} {'Tokens/sec':>11} "
              f"{'Peak Mem':>12} {'dLoss':>8} {'dTok%':>7}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['model']:<16} {r['val_loss']:>9.4f} {r['ppl']:>10.2f} "
            f"{r['tokens_per_sec']:>11.2f} {r['peak_mem_bytes']:>12} "
            f"{r['loss_delta']:>8.4f} {r['tokens_per_sec_pct']:>6.1f}%")
    return "\n".join(lines)
