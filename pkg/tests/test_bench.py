"""The checkpoint-fair benchmark: memory probe semantics, bit-exact restore,
report schema, and variant comparison arithmetic."""

import json
import math

import numpy as np
import pytest

import streamssm.bench as bench_mod
from streamssm.bench import (BenchConfig, BenchReport, compare_variants,
                             format_comparison, peak_memory_probe,
                             read_reports_jsonl, reset_peak_tracking,
                             run_fair_bench, write_reports_jsonl)
from streamssm.checkpoint import save_checkpoint
from streamssm.corpus import byte_fallback_tokenizer, pack
from streamssm.errors import ConfigError, StreamSsmError
from streamssm.model import Model, ModelConfig
from streamssm.tensor import MemoryTracker, Tensor, set_tracker
from streamssm.trainer import TrainConfig, evaluate, init_optimizer

from conftest import word_salad

# Table-style reference rows for comparison arithmetic.
REFERENCE_REPORTS = [
    BenchReport("baseline", 6.3507, 572.91, 1025.52, 2365 << 20),
    BenchReport("mhc_static", 6.2448, 515.35, 964.81, 2568 << 20),
    BenchReport("mhc_adapters", 6.1353, 461.88, 938.90, 3092 << 20),
]


def bench_model(variant, seed=0):
    n = 1 if variant == "baseline" else 3
    cfg = ModelConfig(variant=variant, vocab_size=257, dim=16, layers=2,
                      seq_len=16, streams=n, conv_kernel=3, adapter_rank=4,
                      dropout=0.1, adapter_dropout=0.1, seed=seed,
                      dtype="float32").validate()
    return Model(cfg)


def small_val_split():
    tok = byte_fallback_tokenizer()
    ids = np.array(tok.encode(word_salad(40, seed=9)) + [tok.eos_id])
    return pack(ids, 16)


def save_bench_ckpt(tmp_path, variant):
    m = bench_model(variant)
    path = tmp_path / f"{variant}.ssmckpt"
    save_checkpoint(path, m.config, m.params,
                    opt_state=init_optimizer(m.params).to_dict(),
                    rng_state=m.rng_state())
    return path, m


class TestPeakMemoryProbe:
    def test_high_water_semantics(self):
        tracker = MemoryTracker()
        old = set_tracker(tracker)
        try:
            reset_peak_tracking()
            big = Tensor(np.zeros(1 << 18, dtype=np.float32))   # 1 MiB
            del big
            small = Tensor(np.zeros(1 << 17, dtype=np.float32))  # 0.5 MiB
            assert peak_memory_probe() == 1 << 20
            del small
        finally:
            set_tracker(old)

    def test_reset_with_nothing_live_reads_zero(self):
        tracker = MemoryTracker()
        old = set_tracker(tracker)
        try:
            reset_peak_tracking()
            assert peak_memory_probe() == 0
        finally:
            set_tracker(old)

    def test_probe_requires_enablement(self):
        tracker = MemoryTracker()
        old = set_tracker(tracker)
        try:
            with pytest.raises(StreamSsmError):
                peak_memory_probe()
        finally:
            set_tracker(old)

    def test_peak_covers_parameter_bytes(self, tmp_path):
        tracker = MemoryTracker()
        old = set_tracker(tracker)
        try:
            ckpt, m = save_bench_ckpt(tmp_path, "baseline")
            param_bytes = sum(p.data.nbytes for p in m.params.values())
            bc = BenchConfig(warmup_steps=0, timed_steps=2, batch_size=2, seq_len=8)
            report = run_fair_bench(ckpt, small_val_split(), bc)
            assert report.peak_mem_bytes >= param_bytes
        finally:
            set_tracker(old)


class TestRunFairBench:
    def test_restore_and_evaluation_are_fair(self, tmp_path):
        ckpt, m = save_bench_ckpt(tmp_path, "mhc_static")
        val = small_val_split()
        # same batch partition as the bench so the comparison is bit-level
        pre_loss, pre_ppl = evaluate(Model(m.config, params=m.params), val, 2)
        bc = BenchConfig(warmup_steps=1, timed_steps=3, batch_size=2, seq_len=8)
        report = run_fair_bench(ckpt, val, bc)
        assert report.val_loss == pre_loss
        assert report.ppl == pre_ppl
        assert report.model == "mhc_static"
        assert report.tokens_per_sec > 0

    def test_ppl_consistent_with_loss(self, tmp_path):
        ckpt, _ = save_bench_ckpt(tmp_path, "baseline")
        bc = BenchConfig(warmup_steps=0, timed_steps=2, batch_size=2, seq_len=8)
        report = run_fair_bench(ckpt, small_val_split(), bc)
        assert abs(report.ppl - math.exp(report.val_loss)) / report.ppl <= 1e-4

    def test_peak_memory_ordering_across_variants(self, tmp_path):
        val = small_val_split()
        bc = BenchConfig(warmup_steps=0, timed_steps=2, batch_size=2, seq_len=16)
        peaks = {}
        for variant in ("baseline", "mhc_static", "mhc_adapters"):
            ckpt, _ = save_bench_ckpt(tmp_path, variant)
            peaks[variant] = run_fair_bench(ckpt, val, bc).peak_mem_bytes
        assert peaks["baseline"] <= peaks["mhc_static"] <= peaks["mhc_adapters"]

    def test_unmeasurable_timing_rejected(self, tmp_path, monkeypatch):
        ckpt, _ = save_bench_ckpt(tmp_path, "baseline")
        frozen = [0.0]
        monkeypatch.setattr(bench_mod.time, "perf_counter", lambda: frozen[0])
        bc = BenchConfig(warmup_steps=0, timed_steps=1, batch_size=1, seq_len=8)
        with pytest.raises(ConfigError):
            run_fair_bench(ckpt, small_val_split(), bc)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            BenchConfig(timed_steps=0).validate()

    def test_throughput_variation_reported(self, tmp_path, capsys):
        # coefficient of variation across repeats is informational, not gated
        ckpt, _ = save_bench_ckpt(tmp_path, "baseline")
        val = small_val_split()
        bc = BenchConfig(warmup_steps=1, timed_steps=3, batch_size=2, seq_len=8)
        rates = [run_fair_bench(ckpt, val, bc).tokens_per_sec for _ in range(3)]
        cv = float(np.std(rates) / np.mean(rates))
        print(f"tokens/sec over 3 runs: {rates} (cv {cv:.1%})")


class TestCompareVariants:
    def test_self_comparison_has_zero_deltas(self):
        r = REFERENCE_REPORTS[0]
        rows = compare_variants([r, BenchReport(**r.to_dict())])
        for row in rows:
            assert row["loss_delta"] == 0.0
            assert row["tokens_per_sec_pct"] == 0.0

    def test_reference_deltas(self):
        rows = compare_variants(REFERENCE_REPORTS)
        assert [r["model"] for r in rows] == ["baseline", "mhc_static", "mhc_adapters"]
        assert abs(rows[1]["loss_delta"] - 0.1059) <= 1e-9
        static_to_adapters = rows[2]["loss_delta"] - rows[1]["loss_delta"]
        assert abs(static_to_adapters - 0.1095) <= 1e-9

    def test_reference_throughput_drop_is_about_eight_percent(self):
        rows = compare_variants(REFERENCE_REPORTS)
        drop = -rows[2]["tokens_per_sec_pct"]
        assert abs(drop - 8.4464) <= 1e-2   # (1025.52 - 938.90) / 1025.52

    def test_requires_two_reports(self):
        with pytest.raises(ConfigError):
            compare_variants(REFERENCE_REPORTS[:1])

    def test_format_contains_metric_columns(self):
        table = format_comparison(compare_variants(REFERENCE_REPORTS))
        for column in ("Model", "Val Loss", "PPL", "Tokens/sec", "Peak Mem"):
            assert column in table

    def test_jsonl_round_trip(self, tmp_path):
        path = tmp_path / "bench.jsonl"
        write_reports_jsonl(REFERENCE_REPORTS, path)
        loaded = read_reports_jsonl(path)
        assert loaded == REFERENCE_REPORTS
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert set(json.loads(lines[0])) == {"model", "val_loss", "ppl",
                                             "tokens_per_sec", "peak_mem_bytes"}
