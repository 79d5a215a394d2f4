"""Command-line entry point.

Subcommands: prepare, train, eval, bench, compare, selftest. Configuration
is a flat ``key = value`` text file whose keys are namespaced by section
(model.*, train.*, bench.*, data.*); every key is also addressable as a
``--section.key value`` flag, and flags win over file values. Each run
writes its fully resolved config plus metrics/report files into a
timestamped directory for provenance.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
5 internal error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bench import (BenchConfig, compare_variants, format_comparison,
                    read_reports_jsonl, run_fair_bench, write_reports_jsonl)
from .checkpoint import load_checkpoint, params_to_tensors
from .corpus import (DataConfig, build_tokenizer, load_tokens, pack,
                     save_tokens, tokenize_split)
from .errors import ConfigError, DataError, NumericError, StreamSsmError
from .model import Model, ModelConfig
from .selftest import run_selftest
from .trainer import MetricsSink, OptimizerState, TrainConfig, evaluate, train

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
    "data": DataConfig,
}

COMMANDS = ("prepare", "train", "eval", "bench", "compare", "selftest")

# Convenience aliases for common flags; each maps to one or more flat keys.
ALIASES = {
    "--variant": ("model.variant",),
    "--streams": ("model.streams",),
    "--seed": ("model.seed", "train.seed", "bench.seed"),
    "--max-steps": ("train.max_steps",),
}


@dataclass
class RunSpec:
    command: str
    config_path: str | None
    overrides: dict[str, str]
    out_dir: str


def _flat_defaults() -> dict[str, object]:
    flat = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            flat[f"{section}.{f.name}"] = getattr(cls(), f.name)
    return flat


def _coerce(key: str, raw: str):
    defaults = _flat_defaults()
    if key not in defaults:
        raise ConfigError(f"unknown config key {key!r}")
    current = defaults[key]
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key} expects an integer, got {raw!r}") from exc
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from exc
    return raw


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


@dataclass
class Resolved:
    model: ModelConfig
    train: TrainConfig
    bench: BenchConfig
    data: DataConfig
    flat: dict[str, object]
    explicit: set[str]


def resolve_config(config_path, overrides: dict[str, str]) -> Resolved:
    flat = _flat_defaults()
    explicit: set[str] = set()
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            flat[key] = _coerce(key, raw)
            explicit.add(key)
    for key, raw in overrides.items():
        flat[key] = _coerce(key, raw)
        explicit.add(key)

    # Baseline runs on a single stream; only an explicit conflicting value is
    # an error, the default stream count is adjusted silently.
    if flat["model.variant"] == "baseline":
        if "model.streams" in explicit and flat["model.streams"] != 1:
            raise ConfigError("baseline variant requires streams == 1")
        flat["model.streams"] = 1
    elif flat["model.variant"] in ("mhc_static", "mhc_adapters") \
            and "model.streams" not in explicit and flat["model.streams"] == 1:
        flat["model.streams"] = 4

    def section(name, cls):
        vals = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(name + ".")}
        return cls(**vals)

    resolved = Resolved(
        model=section("model", ModelConfig).validate(),
        train=section("train", TrainConfig).validate(),
        bench=section("bench", BenchConfig).validate(),
        data=section("data", DataConfig),
        flat=flat,
        explicit=explicit,
    )
    return resolved


def make_run_dir(root, command: str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for suffix in range(1000):
        name = f"{command}-{stamp}" + (f"-{suffix}" if suffix else "")
        run_dir = root / name
        try:
            run_dir.mkdir()
            return run_dir
        except FileExistsError:
            continue
    raise StreamSsmError("could not allocate a unique run directory")


def write_resolved_config(run_dir: Path, flat: dict[str, object]) -> Path:
    path = run_dir / "config.resolved"
    lines = [f"{key} = {flat[key]}" for key in sorted(flat)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# -- data loading ----------------------------------------------------------------


def _load_split(path: str, dc: DataConfig) -> tuple[np.ndarray, int]:
    """Load one split: a token cache (by magic) or raw text to tokenize."""
    if not path:
        raise ConfigError("data path not configured (set data.train_path / data.val_path)")
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise DataError(f"cannot read split {path}: {exc}") from exc
    if magic == b"SSTK":
        ids, vocab = load_tokens(path)
        return ids, vocab
    tokenizer = build_tokenizer(dc)
    return tokenize_split(path, tokenizer), tokenizer.vocab_size


# -- curves --------------------------------------------------------------------


def emit_training_curves(run_dir) -> Path:
    """Produce a tidy (variant, step, val_loss, ppl) CSV from a run's metrics.

    Validation rows keep their step; the final row is keyed as step = -1.
    """
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise DataError(f"no metrics.csv in {run_dir}")
    variant = "unknown"
    resolved = run_dir / "config.resolved"
    if resolved.exists():
        for line in resolved.read_text(encoding="utf-8").splitlines():
            if line.startswith("model.variant"):
                variant = line.split("=", 1)[1].strip()
    out = run_dir / "curves.csv"
    with open(metrics, newline="") as fh, open(out, "w", newline="") as oh:
        writer = csv.writer(oh)
        writer.writerow(["variant", "step", "val_loss", "ppl"])
        for row in csv.DictReader(fh):
            if row["split"] == "val":
                writer.writerow([variant, row["step"], row["loss"], row["ppl"]])
            elif row["split"] == "val_final":
                writer.writerow([variant, -1, row["loss"], row["ppl"]])
    return out


# -- command implementations ------------------------------------------------------


def _cmd_prepare(spec: RunSpec) -> int:
    res = resolve_config(spec.config_path, spec.overrides)
    run_dir = make_run_dir(spec.out_dir, "prepare")
    write_resolved_config(run_dir, res.flat)
    tokenizer = build_tokenizer(res.data)
    for split, path in (("train", res.data.train_path), ("val", res.data.val_path)):
        if not path:
            raise ConfigError(f"data.{split}_path not configured")
        ids = tokenize_split(path, tokenizer)
        out = run_dir / f"{split}.tokens"
        save_tokens(out, ids, tokenizer.vocab_size)
        print(f"{split}: {len(ids)} tokens (vocab {tokenizer.vocab_size}) -> {out}")
    return 0


def _prepare_model(res: Resolved, vocab: int, resume: str | None):
    if resume:
        bundle = load_checkpoint(resume)
        ckpt_cfg = bundle.config.to_dict()
        for key in res.explicit:
            if key.startswith("model."):
                field_name = key.split(".", 1)[1]
                if res.flat[key] != ckpt_cfg.get(field_name):
                    raise ConfigError(
                        f"{key}={res.flat[key]!r} conflicts with the resumed "
                        f"checkpoint's {ckpt_cfg.get(field_name)!r}")
        model = Model(bundle.config, params=params_to_tensors(bundle.params))
        if bundle.rng_state is not None:
            model.set_rng_state(bundle.rng_state)
        opt = (OptimizerState.from_dict(bundle.opt_state)
               if bundle.opt_state else None)
        start_step = 0
        if bundle.opt_state is not None:
            start_step = int(bundle.opt_state.get("loop_step",
                                                  bundle.opt_state.get("step", 0)))
        return model, opt, start_step
    cfg = res.model
    if "model.vocab_size" not in res.explicit:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "vocab_size": vocab})
    return Model(cfg), None, 0


def _cmd_train(spec: RunSpec, resume: str | None) -> int:
    res = resolve_config(spec.config_path, spec.overrides)
    run_dir = make_run_dir(spec.out_dir, "train")
    tc = res.train
    train_ids, vocab = _load_split(res.data.train_path, res.data)
    val_ids, _ = _load_split(res.data.val_path, res.data)
    model, opt, start_step = _prepare_model(res, vocab, resume)
    train_ds = pack(train_ids, model.config.seq_len)
    val_ds = pack(val_ids, model.config.seq_len)
    for name, value in model.config.to_dict().items():
        res.flat[f"model.{name}"] = value
    write_resolved_config(run_dir, res.flat)
    sink = MetricsSink(run_dir / "metrics.csv", echo=True)
    result = train(model, train_ds, val_ds, tc, sink=sink, run_dir=run_dir,
                   opt=opt, start_step=start_step)
    emit_training_curves(run_dir)
    print(f"final: loss {result.final.loss:.4f} ppl {result.final.ppl:.2f} "
          f"-> {result.checkpoint_path}")
    print(f"run dir: {run_dir}")
    return 0


def _cmd_eval(spec: RunSpec, ckpt: str | None) -> int:
    if not ckpt:
        raise ConfigError("eval requires --ckpt")
    res = resolve_config(spec.config_path, spec.overrides)
    run_dir = make_run_dir(spec.out_dir, "eval")
    write_resolved_config(run_dir, res.flat)
    bundle = load_checkpoint(ckpt)
    model = Model(bundle.config, params=params_to_tensors(bundle.params))
    val_ids, _ = _load_split(res.data.val_path, res.data)
    val_ds = pack(val_ids, model.config.seq_len)
    loss, ppl = evaluate(model, val_ds, res.train.batch_size)
    (run_dir / "eval.csv").write_text(
        f"variant,val_loss,ppl\n{model.config.variant},{loss:.6f},{ppl:.4f}\n",
        encoding="utf-8")
    print(f"{model.config.variant}: val_loss {loss:.4f} ppl {ppl:.2f}")
    return 0


def _cmd_bench(spec: RunSpec, ckpt: str | None) -> int:
    if not ckpt:
        raise ConfigError("bench requires --ckpt")
    res = resolve_config(spec.config_path, spec.overrides)
    run_dir = make_run_dir(spec.out_dir, "bench")
    write_resolved_config(run_dir, res.flat)
    bundle = load_checkpoint(ckpt)
    val_ids, _ = _load_split(res.data.val_path, res.data)
    val_ds = pack(val_ids, bundle.config.seq_len)
    report = run_fair_bench(ckpt, val_ds, res.bench, res.train)
    write_reports_jsonl([report], run_dir / "bench.jsonl")
    print(f"{report.model}: val_loss {report.val_loss:.4f} ppl {report.ppl:.2f} "
          f"{report.tokens_per_sec:.1f} tok/s peak {report.peak_mem_bytes} B")
    print(f"report: {run_dir / 'bench.jsonl'}")
    return 0


def _cmd_compare(paths: list[str]) -> int:
    reports = []
    for arg in paths:
        p = Path(arg)
        jsonl = p if p.is_file() else p / "bench.jsonl"
        if not jsonl.exists():
            raise DataError(f"no bench.jsonl found under {arg}")
        reports.extend(read_reports_jsonl(jsonl))
    rows = compare_variants(reports)
    print(format_comparison(rows))
    return 0


def _cmd_selftest() -> int:
    return 0 if run_selftest() else 4


# -- argv parsing -----------------------------------------------------------------


def _collect_overrides(unknown: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(unknown):
        token = unknown[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        if "=" in token:
            key, _, value = token[2:].partition("=")
        else:
            if i + 1 >= len(unknown):
                raise ConfigError(f"flag {token} is missing a value")
            key, value = token[2:], unknown[i + 1]
            i += 1
        i += 1
        if "--" + key in ALIASES:
            for target in ALIASES["--" + key]:
                overrides[target] = value
        elif key in _flat_defaults():
            overrides[key] = value
        else:
            raise ConfigError(f"unknown flag --{key}")
    return overrides


def parse_and_dispatch(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(
        prog="streamssm",
        description="Train, evaluate, and benchmark multi-stream SSM language models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "eval", "bench"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--out", default="runs", help="output root for run directories")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
        if name in ("eval", "bench"):
            p.add_argument("--ckpt", default=None, help="checkpoint to load")
    cmp_p = sub.add_parser("compare")
    cmp_p.add_argument("runs", nargs="+", help="run directories or bench.jsonl files")
    sub.add_parser("selftest")

    args, unknown = parser.parse_known_args(argv)
    if args.command == "selftest":
        if unknown:
            raise ConfigError(f"selftest takes no flags, got {unknown}")
        return _cmd_selftest()
    if args.command == "compare":
        if unknown:
            raise ConfigError(f"compare takes run directories only, got {unknown}")
        return _cmd_compare(args.runs)

    overrides = _collect_overrides(unknown)
    spec = RunSpec(command=args.command, config_path=args.config,
                   overrides=overrides, out_dir=args.out)
    if args.command == "prepare":
        return _cmd_prepare(spec)
    if args.command == "train":
        return _cmd_train(spec, args.resume)
    if args.command == "eval":
        return _cmd_eval(spec, args.ckpt)
    if args.command == "bench":
        return _cmd_bench(spec, args.ckpt)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        code = parse_and_dispatch(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        code = 4
    except StreamSsmError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        code = 5
    except Exception as exc:  # noqa: BLE001 - map anything else to internal
        print(f"internal error: {exc}", file=sys.stderr)
        code = 5
    return code


if __name__ == "__main__":
    sys.exit(main())
