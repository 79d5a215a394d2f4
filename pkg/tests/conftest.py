import random

import numpy as np
import pytest

from streamssm.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def desk_config(variant: str, **overrides) -> ModelConfig:
    """Desk-scale config: small enough for finite differences in float64."""
    base = dict(variant=variant, vocab_size=11, dim=8, layers=2, seq_len=6,
                streams=1 if variant == "baseline" else 3, conv_kernel=3,
                adapter_rank=2, sinkhorn_iters=5, dropout=0.0,
                adapter_dropout=0.0, seed=7, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base).validate()


def word_salad(n_sentences: int, seed: int = 0, vocab=None) -> str:
    """Deterministic low-entropy text for smoke corpora."""
    state = random.Random(seed)
    words = vocab or ["the", "cat", "sat", "on", "a", "mat", "dog", "ran",
                      "and", "bird", "sang", "sun", "rose", "over", "hill"]
    sentences = []
    for _ in range(n_sentences):
        length = state.randint(4, 8)
        sentences.append(" ".join(state.choice(words) for _ in range(length)) + ".")
    return " ".join(sentences)
