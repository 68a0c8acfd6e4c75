"""Shared fixtures: tiny model configurations that keep unit tests fast."""

from __future__ import annotations

import numpy as np
import pytest

from placegen.diffusion import make_schedule
from placegen.model import DenoiserModel, ModelConfig

TINY_VOCAB = ("<null>", "<pad>", "a", "photo", "of", "and",
              "disc", "cross", "wrench", "sks", "oxt", "zvq",
              "high", "quality", "colorful", "image",
              "low", "dull", "collaging", "effect", "assembled")


def tiny_config(**overrides) -> ModelConfig:
    base = dict(image_size=8, in_channels=1, ch0=4, ch1=6, time_dim=8,
                n_fourier=2, ground_hidden=8, max_prompt_len=8, vocab=TINY_VOCAB)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_model() -> DenoiserModel:
    """Gradcheck-sized model with randomized gates and output conv."""
    m = DenoiserModel.create(tiny_config(), seed=3)
    rng = np.random.default_rng(7)
    for k, v in m.params.items():
        if k.endswith("out.w") or k.endswith("gamma"):
            m.params[k] = (rng.standard_normal(v.shape) * 0.2).astype(np.float32)
    return m


@pytest.fixture(scope="session")
def small_sched():
    return make_schedule(40, 1e-3, 0.05)


@pytest.fixture(scope="session")
def full_sched():
    return make_schedule(1000)
