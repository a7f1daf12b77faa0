"""Shared fixtures: a small pretrained diffusion world reused across test modules."""

import numpy as np
import pytest

from omnictl import scenes
from omnictl.stage2 import DenoiserConfig, NoiseSchedule, PretrainConfig, pretrain_base
from omnictl.text import standard_encoder

TASKS = ("depth", "hed", "scribble", "animal_pose")


@pytest.fixture(scope="session")
def tiny_world():
    """32px corpus + briefly pretrained frozen base + registered task tokens."""
    corpus = scenes.generate_corpus(101, 24, 6, size=32)
    enc = standard_encoder(seed=11)
    schedule = NoiseSchedule()
    base, losses = pretrain_base(
        corpus, enc, PretrainConfig(steps=250, batch=8, lr=2e-3), schedule, seed=13,
        denoiser_cfg=DenoiserConfig(image_size=32))
    for t in TASKS:
        enc.register_token(t)
    return {"corpus": corpus, "enc": enc, "base": base, "schedule": schedule,
            "pretrain_losses": losses}
