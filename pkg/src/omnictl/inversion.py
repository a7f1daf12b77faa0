"""Textual inversion: learn one embedding row per task token against the
frozen base denoiser, using condition-map exemplars rendered as images.

The only trainable object in a job is the token's embedding row; everything
else must already be frozen or the job refuses to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .optim import AdamW
from .stage2 import BaseDenoiser, NoiseSchedule, add_noise, diffusion_loss
from .tensor import ContractError, Tape, Tensor


@dataclass
class InversionJob:
    token: str
    exemplars: list  # condition maps [1,S,S] (Tensor or ndarray), 16 by default
    steps: int = 2000
    lr: float = 5e-3
    prompt_template: str = "an image of ⟨{}⟩"

    def prompt(self) -> str:
        return self.prompt_template.format(self.token)


def _as_image(cond) -> np.ndarray:
    arr = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    return np.repeat(arr, 3, axis=0)  # grayscale map -> 3-channel exemplar image


def _check_frozen(base: BaseDenoiser, text_encoder):
    if not base.is_frozen():
        raise ContractError("learn_embedding: base denoiser must be frozen")
    if not all(p.frozen for p in text_encoder.params(include_tokens=False).values()):
        raise ContractError("learn_embedding: text encoder must be frozen")


def exemplar_latents(base: BaseDenoiser, exemplars) -> np.ndarray:
    imgs = np.stack([_as_image(e) for e in exemplars])
    return base.img_to_latent(T.constant(imgs)).data


def learn_embedding(job: InversionJob, base: BaseDenoiser, text_encoder,
                    schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """argmin over v of E ||eps - eps_theta(z_t, t, c(v))||^2, v = row of ⟨token⟩."""
    _check_frozen(base, text_encoder)
    if not text_encoder.has_token(job.token):
        raise ContractError(f"token {job.token!r} not registered")
    v = text_encoder.token_row(job.token)
    if v.frozen:
        raise ContractError(f"token row {job.token!r} is frozen")
    ids = text_encoder.tokenize(job.prompt())
    latents = exemplar_latents(base, job.exemplars)
    opt = AdamW(weight_decay=0.0)
    for step in range(job.steps):
        g = rng.stream(seed, "invert", job.token, step)
        i = int(g.integers(0, len(latents)))
        t = int(g.integers(1, schedule.T + 1))
        eps = T.constant(g.normal(0.0, 1.0, latents[i].shape)[None])
        z_t = add_noise(T.constant(latents[i][None]), t, eps, schedule)
        v.grad = None
        with Tape() as tape:
            ctx = T.reshape(text_encoder.encode_ids(ids).tokens, (1, -1, base.cfg.text_dim))
            loss = diffusion_loss(eps, base.predict(z_t, [t], ctx))
            tape.backward(loss)
        opt.step([v], job.lr)
    return v.data.copy()


def inversion_loss_curve(job: InversionJob, base, text_encoder, schedule, seed: int) -> list[float]:
    """Same loop as learn_embedding, returning the per-step loss trace."""
    _check_frozen(base, text_encoder)
    v = text_encoder.token_row(job.token)
    ids = text_encoder.tokenize(job.prompt())
    latents = exemplar_latents(base, job.exemplars)
    opt = AdamW(weight_decay=0.0)
    losses = []
    for step in range(job.steps):
        g = rng.stream(seed, "invert", job.token, step)
        i = int(g.integers(0, len(latents)))
        t = int(g.integers(1, schedule.T + 1))
        eps = T.constant(g.normal(0.0, 1.0, latents[i].shape)[None])
        z_t = add_noise(T.constant(latents[i][None]), t, eps, schedule)
        v.grad = None
        with Tape() as tape:
            ctx = T.reshape(text_encoder.encode_ids(ids).tokens, (1, -1, base.cfg.text_dim))
            loss = diffusion_loss(eps, base.predict(z_t, [t], ctx))
            tape.backward(loss)
        opt.step([v], job.lr)
        losses.append(loss.item())
    return losses


def inversion_quality(v: np.ndarray, token: str, holdouts, base: BaseDenoiser,
                      text_encoder, schedule: NoiseSchedule, probes: int = 6,
                      probe_seed: int = 715) -> float:
    """Mean diffusion loss of c(v) on holdout maps over a fixed (t, eps) probe grid."""
    if not holdouts:
        raise ContractError("inversion_quality: empty holdout set")
    row = text_encoder.token_row(token)
    saved = row.data.copy()
    row.data = np.asarray(v, dtype=np.float64).copy()
    try:
        ids = text_encoder.tokenize(f"an image of ⟨{token}⟩")
        ctx = T.reshape(text_encoder.encode_ids(ids).tokens, (1, -1, base.cfg.text_dim))
        latents = exemplar_latents(base, holdouts)
        t_grid = np.linspace(1, schedule.T, probes).astype(np.int64)
        total = 0.0
        for i, z in enumerate(latents):
            for k, t in enumerate(t_grid):
                eps = rng.normal(probe_seed, z.shape, "quality", i, k)[None]
                z_t = add_noise(T.constant(z[None]), int(t), T.constant(eps), schedule)
                total += diffusion_loss(T.constant(eps), base.predict(z_t, [int(t)], ctx)).item()
        return total / (len(latents) * probes)
    finally:
        row.data = saved
