"""Textual inversion: parameter isolation, gradient path through the encoder,
quality comparisons on fixed probe grids."""

import numpy as np
import pytest

from omnictl import rng
from omnictl import tensor as T
from omnictl.inversion import (
    InversionJob,
    inversion_loss_curve,
    inversion_quality,
    learn_embedding,
)
from omnictl.stage2 import BaseDenoiser, DenoiserConfig, NoiseSchedule, add_noise, diffusion_loss
from omnictl.tensor import ContractError, Tape, Tensor, grad_check
from omnictl.text import standard_encoder


def _exemplars(world, task, n=8):
    return [s.conditions[task] for s in world["corpus"] if task in s.task_mask][:n]


def test_zero_steps_keeps_random_init(tiny_world):
    enc = tiny_world["enc"]
    before = enc.token_row("hed").data.copy()
    job = InversionJob("hed", _exemplars(tiny_world, "hed"), steps=0)
    v = learn_embedding(job, tiny_world["base"], enc, tiny_world["schedule"], seed=1)
    assert np.array_equal(v, before)


def test_other_rows_bitwise_unchanged(tiny_world):
    enc = tiny_world["enc"]
    table_before = enc.p["text.embed"].data.copy()
    other_before = enc.token_row("scribble").data.copy()
    job = InversionJob("depth", _exemplars(tiny_world, "depth"), steps=25)
    learn_embedding(job, tiny_world["base"], enc, tiny_world["schedule"], seed=2)
    assert enc.p["text.embed"].data.tobytes() == table_before.tobytes()
    assert enc.token_row("scribble").data.tobytes() == other_before.tobytes()


def test_parameter_isolation_symmetric_difference(tiny_world):
    enc, base = tiny_world["enc"], tiny_world["base"]
    job = InversionJob("scribble", _exemplars(tiny_world, "scribble"), steps=10)
    all_params = list(base.params().values()) + list(enc.params().values())
    before = {p.name: p.data.copy() for p in all_params}
    learn_embedding(job, base, enc, tiny_world["schedule"], seed=3)
    changed = {p.name for p in all_params if not np.array_equal(p.data, before[p.name])}
    assert changed == {"text.tok.scribble"}


def test_refuses_unfrozen_base(tiny_world):
    base = BaseDenoiser(DenoiserConfig(image_size=32), seed=9)  # unfrozen
    enc = tiny_world["enc"]
    job = InversionJob("depth", _exemplars(tiny_world, "depth"), steps=1)
    with pytest.raises(ContractError):
        learn_embedding(job, base, enc, NoiseSchedule(), seed=0)


def test_objective_gradient_matches_finite_differences(tiny_world):
    enc, base, sched = tiny_world["enc"], tiny_world["base"], tiny_world["schedule"]
    v = enc.token_row("animal_pose")
    ids = enc.tokenize("an image of ⟨animal_pose⟩")
    ex = _exemplars(tiny_world, "animal_pose", 1)[0]
    from omnictl.inversion import exemplar_latents

    z = exemplar_latents(base, [ex])[0]
    g = rng.stream(4, "fd")
    eps = T.constant(g.normal(0, 1, z.shape)[None])
    z_t = add_noise(T.constant(z[None]), 700, eps, sched)

    def f(row):
        ctx = T.reshape(enc.encode_ids(ids).tokens, (1, -1, 64))
        return diffusion_loss(eps, base.predict(z_t, [700], ctx))

    assert grad_check(f, [v], h=1e-5) < 1e-4


def test_quality_learned_beats_random(tiny_world):
    enc, base, sched = tiny_world["enc"], tiny_world["base"], tiny_world["schedule"]
    maps = [s.conditions["depth"] for s in tiny_world["corpus"] if "depth" in s.task_mask]
    job = InversionJob("depth", maps[:8], steps=250, lr=1e-2)
    learned = learn_embedding(job, base, enc, sched, seed=5)
    random_v = rng.normal(999, learned.shape, "rand-v", scale=0.02)
    holdouts = maps[8:12]
    q_learned = inversion_quality(learned, "depth", holdouts, base, enc, sched)
    q_random = inversion_quality(random_v, "depth", holdouts, base, enc, sched)
    assert q_learned < q_random


def test_quality_deterministic_and_train_set_identity(tiny_world):
    enc, base, sched = tiny_world["enc"], tiny_world["base"], tiny_world["schedule"]
    maps = _exemplars(tiny_world, "hed", 4)
    v = enc.token_row("hed").data
    a = inversion_quality(v, "hed", maps, base, enc, sched)
    b = inversion_quality(v, "hed", maps, base, enc, sched)
    assert a == b
    with pytest.raises(ContractError):
        inversion_quality(v, "hed", [], base, enc, sched)


def test_loss_curve_decreases(tiny_world):
    enc, base, sched = tiny_world["enc"], tiny_world["base"], tiny_world["schedule"]
    job = InversionJob("hed", _exemplars(tiny_world, "hed"), steps=300, lr=1e-2)
    losses = inversion_loss_curve(job, base, enc, sched, seed=6)
    assert np.mean(losses[-100:]) < np.mean(losses[:100])
