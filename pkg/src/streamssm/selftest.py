"""Built-in invariant suite behind the ``selftest`` CLI command.

Each check is small enough to run in seconds and prints one PASS/FAIL line;
the full pytest suite is the authoritative gate, this is the quick field
check.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .model import Model, ModelConfig, model_forward, sequence_loss
from .numerics import (finite_difference_check, simplex_weights,
                       sinkhorn_project, spectral_norm_estimate)
from .ssm_core import causal_depthwise_conv, diagonal_scan
from .tensor import Tensor
from .trainer import OptimizerState, adamw_step, clip_gradients


def _check_sinkhorn_properties():
    rng = np.random.default_rng(7)
    for _ in range(40):
        n = int(rng.integers(2, 9))
        ds = sinkhorn_project(rng.uniform(-1, 1, size=(n, n)), 20)
        h = ds.h.data
        assert h.min() >= 0.0, "negative entry"
        assert max(ds.row_residual, ds.col_residual) <= 1e-5, "residual too large"
        assert spectral_norm_estimate(h, 100) <= 1.0 + 1e-4, "spectral bound violated"


def _check_simplex():
    rng = np.random.default_rng(3)
    for _ in range(50):
        w = simplex_weights(rng.uniform(-50, 50, size=5)).w.data
        assert w.min() >= 0 and abs(w.sum() - 1) <= 1e-6


def _check_scan_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        B, T, D = 2, int(rng.integers(2, 17)), 5
        u = rng.normal(size=(B, T, D))
        a = rng.uniform(0.05, 0.95, D)
        b, c, d = (rng.normal(size=D) for _ in range(3))
        z = diagonal_scan(Tensor(u), Tensor(a), Tensor(b), Tensor(c), Tensor(d)).data
        s = np.zeros((B, D))
        for t in range(T):
            s = a * s + b * u[:, t]
            ref = c * s + d * u[:, t]
            assert np.abs(z[:, t] - ref).max() <= 1e-6, "scan oracle mismatch"


def _check_conv_oracle():
    rng = np.random.default_rng(13)
    for _ in range(10):
        B, T, D, k = 2, int(rng.integers(2, 12)), 4, int(rng.integers(1, 5))
        u = rng.normal(size=(B, T, D))
        w = rng.normal(size=(D, k))
        out = causal_depthwise_conv(Tensor(u), Tensor(w)).data
        for t in range(T):
            acc = np.zeros((B, D))
            for j in range(k):
                src = t - (k - 1) + j
                if src >= 0:
                    acc += w[:, j] * u[:, src]
            assert np.abs(out[:, t] - acc).max() <= 1e-6, "conv oracle mismatch"


def _check_gradients():
    cfg = ModelConfig(variant="mhc_adapters", vocab_size=7, dim=4, layers=1,
                      seq_len=4, streams=2, conv_kernel=2, adapter_rank=2,
                      dropout=0.0, adapter_dropout=0.0, seed=5, dtype="float64")
    m = Model(cfg)
    x = np.random.default_rng(0).integers(0, 7, size=(2, 4))
    for name in ("layers.0.mix.res_logits", "layers.0.block.a_logits",
                 "layers.0.post_adapter.gamma"):
        base = m.params[name].data

        def f(t, name=name):
            p2 = dict(m.params)
            p2[name] = t
            return sequence_loss(model_forward(p2, x, cfg), x)

        err = finite_difference_check(f, base)
        assert err <= 1e-4, f"{name}: finite-difference error {err:.2e}"


def _check_optimizer():
    p = {"w.weight": Tensor(np.array([1.0]), requires_grad=True)}
    state = OptimizerState(m={"w.weight": np.zeros(1)}, v={"w.weight": np.zeros(1)})
    adamw_step(p, {"w.weight": np.zeros(1)}, state, lr=3e-4, weight_decay=0.1)
    assert abs(float(p["w.weight"].data[0]) - (1.0 - 3e-4 * 0.1)) < 1e-15, "decoupled decay broken"
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    _, norm = clip_gradients(grads, 1.0)
    assert abs(norm - 5.0) < 1e-12 and abs(grads["a"][0] - 0.6) < 1e-12, "global clip broken"


def _check_no_grad_purity():
    t = Tensor(np.ones(3), requires_grad=True)
    with tt.no_grad():
        out = (t * 2.0).sum()
    assert out._backward is None, "no_grad leaked graph state"


CHECKS = [
    ("sinkhorn_doubly_stochastic_properties", _check_sinkhorn_properties),
    ("simplex_weights_nonneg_sum_to_one", _check_simplex),
    ("diagonal_scan_matches_naive_oracle", _check_scan_oracle),
    ("causal_conv_matches_naive_oracle", _check_conv_oracle),
    ("finite_difference_gradients", _check_gradients),
    ("adamw_decay_and_global_clip", _check_optimizer),
    ("no_grad_suppresses_graph", _check_no_grad_purity),
]


def run_selftest(echo=print) -> bool:
    ok = True
    for name, check in CHECKS:
        try:
            check()
        except Exception as exc:  # noqa: BLE001 - report and continue
            ok = False
            echo(f"FAIL {name}: {exc}")
        else:
            echo(f"PASS {name}")
    return ok
