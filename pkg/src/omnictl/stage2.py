"""Conditioned latent diffusion: a frozen toy denoiser (encoder E, middle M,
decoder D with skips), a trainable encoder+middle copy fed the prefixed
prompt, and zero-convolutions gating the condition pathway so training starts
exactly at the base model.

eps_pred = D(M(E(z_t, t, c_t)) + Z2(E'(Z1(c_f) + z_t, t, prefix_c_t))) with
Z2 realized as one zero-conv per trainable-copy output resolution, added to
the matching frozen skip/middle features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from . import tensor as T
from .optim import AdamW
from .tensor import ContractError, Parameter, Tape, Tensor

Z2_TAPS = ("h0", "h1", "h2", "h3", "mid")


# ---------------------------------------------------------------------------
# Noise schedule and forward process
# ---------------------------------------------------------------------------


class NoiseSchedule:
    """Linear-beta tables; alpha_bar[0] = 1 so index t in [1, T]."""

    def __init__(self, total_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        self.T = total_steps
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, total_steps)])
        self.betas = betas
        self.alpha_bar = np.cumprod(1.0 - betas)
        self.sqrt_ab = np.sqrt(self.alpha_bar)
        self.sqrt_1mab = np.sqrt(1.0 - self.alpha_bar)
        inner = self.alpha_bar[1:]
        if not (np.diff(inner) < 0).all():
            raise ContractError("alpha_bar must be strictly decreasing")
        if inner[-1] >= 0.01 or inner[0] <= 0.99:
            raise ContractError("alpha_bar endpoints out of contract")
        if not ((inner > 0) & (inner < 1)).all():
            raise ContractError("schedule tables must lie in (0,1)")

    def check_t(self, t):
        t = np.asarray(t)
        if (t < 1).any() or (t > self.T).any():
            raise ContractError(f"t must be in [1, {self.T}]")
        return t


def add_noise(z, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) eps."""
    t = schedule.check_t(t)
    z_t = z if isinstance(z, Tensor) else Tensor(z)
    e_t = eps if isinstance(eps, Tensor) else Tensor(eps)
    shape = z_t.shape
    c1 = np.broadcast_to(schedule.sqrt_ab[t].reshape(-1, *([1] * (len(shape) - 1))), shape).copy()
    c2 = np.broadcast_to(schedule.sqrt_1mab[t].reshape(-1, *([1] * (len(shape) - 1))), shape).copy()
    return T.add(T.mul(z_t, T.constant(c1)), T.mul(e_t, T.constant(c2)))


def diffusion_loss(eps, eps_pred) -> Tensor:
    """Mean squared error between injected and predicted noise (Eq. of the squared L2)."""
    a = eps if isinstance(eps, Tensor) else Tensor(eps)
    b = eps_pred if isinstance(eps_pred, Tensor) else Tensor(eps_pred)
    if a.shape != b.shape:
        raise T.ShapeError(f"diffusion_loss shape mismatch {a.shape} vs {b.shape}")
    d = T.sub(a, b)
    return T.mean(T.mul(d, d))


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# Base denoiser (frozen after pretraining)
# ---------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    image_size: int = 64
    image_channels: int = 3
    latent_channels: int = 4
    width: int = 32
    text_dim: int = 64
    time_dim: int = 32
    cond_channels: int = 8


class BaseDenoiser:
    def __init__(self, cfg: DenoiserConfig, seed: int):
        self.cfg = cfg
        self.p: dict[str, Parameter] = {}
        w, lc, ic = cfg.width, cfg.latent_channels, cfg.image_channels
        self._conv("base.ie1", 16, ic, 3, seed)
        self._conv("base.ie2", lc, 16, 3, seed)
        self._convt("base.id1", lc, 16, 2, seed)
        self._convt("base.id2", 16, 16, 2, seed)
        self._conv("base.id3", ic, 16, 3, seed)
        self._conv("base.stem", w, lc, 3, seed)
        for i in (1, 2, 3):
            self._block_params(f"base.e{i}", w, w, "down", seed)
        self._block_params("base.mid", w, w, "same", seed)
        for i in (1, 2, 3):
            self._block_params(f"base.d{i}", 2 * w, w, "up", seed)
        self._conv("base.out1", w, 2 * w, 3, seed)
        self._conv("base.out2", lc, w, 3, seed)

    # -- parameter helpers ------------------------------------------------------

    def _add(self, name, arr):
        self.p[name] = Parameter(arr, name)

    def _conv(self, name, cout, cin, k, seed):
        self._add(name, rng.normal(seed, (cout, cin, k, k), name, scale=(cin * k * k) ** -0.5))
        self._add(name + ".b", np.zeros(cout))

    def _convt(self, name, cin, cout, k, seed):
        self._add(name, rng.normal(seed, (cin, cout, k, k), name, scale=(cin * k * k) ** -0.5))
        self._add(name + ".b", np.zeros(cout))

    def _block_params(self, pre, cin, cout, mode, seed):
        cfg = self.cfg
        if mode == "up":
            self._add(pre + ".k", rng.normal(seed, (cin, cout, 2, 2), pre + ".k", scale=(cin * 4) ** -0.5))
        else:
            self._add(pre + ".k", rng.normal(seed, (cout, cin, 3, 3), pre + ".k", scale=(cin * 9) ** -0.5))
        self._add(pre + ".t", rng.normal(seed, (cfg.time_dim, cout), pre + ".t", scale=cfg.time_dim ** -0.5))
        self._add(pre + ".tb", np.zeros(cout))
        self._add(pre + ".wq", rng.normal(seed, (cout, cout), pre + ".wq", scale=cout ** -0.5))
        self._add(pre + ".wk", rng.normal(seed, (cfg.text_dim, cout), pre + ".wk", scale=cfg.text_dim ** -0.5))
        self._add(pre + ".wv", rng.normal(seed, (cfg.text_dim, cout), pre + ".wv", scale=cfg.text_dim ** -0.5))
        self._add(pre + ".wo", rng.normal(seed, (cout, cout), pre + ".wo", scale=cout ** -0.5) * 0.1)

    def params(self) -> dict[str, Parameter]:
        return dict(self.p)

    def freeze(self):
        for p in self.p.values():
            p.frozen = True

    def is_frozen(self) -> bool:
        return all(p.frozen for p in self.p.values())

    # -- image <-> latent --------------------------------------------------------

    def img_to_latent(self, images: Tensor) -> Tensor:
        x = T.silu(T.add_channel(T.conv2d(images, self.p["base.ie1"], stride=2, padding=1), self.p["base.ie1.b"]))
        return T.add_channel(T.conv2d(x, self.p["base.ie2"], stride=2, padding=1), self.p["base.ie2.b"])

    def latent_to_img(self, z: Tensor) -> Tensor:
        x = T.silu(T.add_channel(T.conv_transpose2d(z, self.p["base.id1"], stride=2), self.p["base.id1.b"]))
        x = T.silu(T.add_channel(T.conv_transpose2d(x, self.p["base.id2"], stride=2), self.p["base.id2.b"]))
        return T.add_channel(T.conv2d(x, self.p["base.id3"], padding=1), self.p["base.id3.b"])

    # -- UNet blocks --------------------------------------------------------------

    def _xattn(self, x: Tensor, ctx: Tensor, store, pre: str) -> Tensor:
        b, c, h, w = x.shape
        flat = T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))
        q = T.matmul(flat, store[pre + ".wq"])
        k = T.matmul(ctx, store[pre + ".wk"])
        v = T.matmul(ctx, store[pre + ".wv"])
        o = T.matmul(T.attention(q, k, v), store[pre + ".wo"])
        flat = T.add(flat, o)
        return T.reshape(T.transpose(flat, (0, 2, 1)), (b, c, h, w))

    def _block(self, x: Tensor, temb: Tensor, ctx: Tensor, store, pre: str, mode: str) -> Tensor:
        if mode == "up":
            y = T.conv_transpose2d(x, store[pre + ".k"], stride=2)
        elif mode == "down":
            y = T.conv2d(x, store[pre + ".k"], stride=2, padding=1)
        else:
            y = T.conv2d(x, store[pre + ".k"], stride=1, padding=1)
        shift = T.bias_add_last(T.matmul(temb, store[pre + ".t"]), store[pre + ".tb"])
        y = T.silu(T.add_channel(y, shift))
        return self._xattn(y, ctx, store, pre)

    def encoder_and_mid(self, z_t: Tensor, temb: Tensor, ctx: Tensor, store=None, tag="base"):
        """Stem + 3 downsampling blocks + middle; returns (h0, h1, h2, h3, mid)."""
        store = self.p if store is None else store
        h0 = T.conv2d(z_t, store[f"{tag}.stem"], padding=1)
        h0 = T.silu(T.add_channel(h0, store[f"{tag}.stem.b"]))
        h1 = self._block(h0, temb, ctx, store, f"{tag}.e1", "down")
        h2 = self._block(h1, temb, ctx, store, f"{tag}.e2", "down")
        h3 = self._block(h2, temb, ctx, store, f"{tag}.e3", "down")
        mid = self._block(h3, temb, ctx, store, f"{tag}.mid", "same")
        return h0, h1, h2, h3, mid

    def decode_eps(self, feats, temb: Tensor, ctx: Tensor) -> Tensor:
        h0, h1, h2, h3, mid = feats
        d1 = self._block(T.concat([mid, h3], axis=1), temb, ctx, self.p, "base.d1", "up")
        d2 = self._block(T.concat([d1, h2], axis=1), temb, ctx, self.p, "base.d2", "up")
        d3 = self._block(T.concat([d2, h1], axis=1), temb, ctx, self.p, "base.d3", "up")
        y = T.concat([d3, h0], axis=1)
        y = T.silu(T.add_channel(T.conv2d(y, self.p["base.out1"], padding=1), self.p["base.out1.b"]))
        return T.add_channel(T.conv2d(y, self.p["base.out2"], padding=1), self.p["base.out2.b"])

    def predict(self, z_t: Tensor, t, ctx: Tensor) -> Tensor:
        temb = T.constant(time_embedding(t, self.cfg.time_dim))
        return self.decode_eps(self.encoder_and_mid(z_t, temb, ctx), temb, ctx)


# ---------------------------------------------------------------------------
# Conditioned model: trainable copy + zero convolutions
# ---------------------------------------------------------------------------


class ConditionedDenoiser:
    """Trainable duplicate of encoder+middle, Z1/Z2 zero-convs, condition encoder."""

    def __init__(self, base: BaseDenoiser, seed: int, prefix_mode: str = "trainable_only",
                 zeroconv_mode: str = "learned"):
        if prefix_mode not in ("trainable_only", "both"):
            raise ContractError(f"unknown prefix_mode {prefix_mode!r}")
        if zeroconv_mode not in ("learned", "mlp_from_embedding"):
            raise ContractError(f"unknown zeroconv_mode {zeroconv_mode!r}")
        self.base = base
        self.cfg = base.cfg
        self.prefix_mode = prefix_mode
        self.zeroconv_mode = zeroconv_mode
        self.p: dict[str, Parameter] = {}
        cfg = self.cfg
        # exact duplicate of stem + encoder blocks + middle, bitwise from base
        for name, bp in base.p.items():
            tail = name.split(".", 1)[1]
            head = tail.split(".")[0]
            if head in ("stem", "e1", "e2", "e3", "mid"):
                cname = "ctrl." + tail
                self.p[cname] = Parameter(bp.data.copy(), cname)
        self._conv("ctrl.cond.c1", cfg.cond_channels, 1, 3, seed)
        self._conv("ctrl.cond.c2", cfg.cond_channels, cfg.cond_channels, 3, seed)
        w = cfg.width
        self._zero("ctrl.z1.k", (cfg.latent_channels, cfg.cond_channels, 1, 1))
        self._zero("ctrl.z1.b", (cfg.latent_channels,))
        for tap in Z2_TAPS:
            self._zero(f"ctrl.z2.{tap}.k", (w, w, 1, 1))
            self._zero(f"ctrl.z2.{tap}.b", (w,))
        if zeroconv_mode == "mlp_from_embedding":
            d = cfg.text_dim
            n_out = cfg.latent_channels * cfg.cond_channels + cfg.latent_channels
            self.p["ctrl.zmlp.w1"] = Parameter(
                rng.normal(seed, (d, d), "ctrl.zmlp.w1", scale=d ** -0.5), "ctrl.zmlp.w1")
            self.p["ctrl.zmlp.b1"] = Parameter(np.zeros(d), "ctrl.zmlp.b1")
            # final layer zero-initialized: training starts at the base model
            self.p["ctrl.zmlp.w2"] = Parameter(np.zeros((d, n_out)), "ctrl.zmlp.w2")
            self.p["ctrl.zmlp.b2"] = Parameter(np.zeros(n_out), "ctrl.zmlp.b2")

    def _conv(self, name, cout, cin, k, seed):
        self.p[name] = Parameter(rng.normal(seed, (cout, cin, k, k), name, scale=(cin * k * k) ** -0.5), name)
        self.p[name + ".b"] = Parameter(np.zeros(cout), name + ".b")

    def _zero(self, name, shape):
        self.p[name] = Parameter(np.zeros(shape), name)

    def params(self) -> dict[str, Parameter]:
        return dict(self.p)

    def all_params(self) -> dict[str, Parameter]:
        out = self.base.params()
        out.update(self.p)
        return out

    # -- condition pathway ---------------------------------------------------------

    def encode_condition(self, cond_map: Tensor) -> Tensor:
        """Condition map [B,1,S,S] -> c_f at latent resolution."""
        x = T.silu(T.add_channel(T.conv2d(cond_map, self.p["ctrl.cond.c1"], stride=2, padding=1),
                                 self.p["ctrl.cond.c1.b"]))
        return T.silu(T.add_channel(T.conv2d(x, self.p["ctrl.cond.c2"], stride=2, padding=1),
                                    self.p["ctrl.cond.c2.b"]))

    def z1_from_embedding(self, v: Tensor) -> tuple[Tensor, Tensor]:
        """MLP image of a task embedding -> (Z1 kernel, Z1 bias)."""
        cfg = self.cfg
        h = T.silu(T.bias_add_last(T.matmul(T.reshape(v, (1, cfg.text_dim)), self.p["ctrl.zmlp.w1"]),
                                   self.p["ctrl.zmlp.b1"]))
        out = T.bias_add_last(T.matmul(h, self.p["ctrl.zmlp.w2"]), self.p["ctrl.zmlp.b2"])
        nk = cfg.latent_channels * cfg.cond_channels
        flat = T.reshape(out, (nk + cfg.latent_channels,))
        kernel = T.reshape(T.take_rows(flat, list(range(nk))), (cfg.latent_channels, cfg.cond_channels, 1, 1))
        bias = T.take_rows(flat, list(range(nk, nk + cfg.latent_channels)))
        return kernel, bias

    def _apply_z1(self, c_f: Tensor, task_embeddings=None) -> Tensor:
        if self.zeroconv_mode == "learned":
            return T.add_channel(T.conv2d(c_f, self.p["ctrl.z1.k"]), self.p["ctrl.z1.b"])
        if task_embeddings is None:
            raise ContractError("mlp_from_embedding mode needs per-item task embeddings")
        outs = []
        for i, v in enumerate(task_embeddings):
            k, bias = self.z1_from_embedding(v)
            item = T.take_rows(c_f, [i])
            outs.append(T.add_channel(T.conv2d(item, k), bias))
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=0)

    # -- Eq. 1 composition -----------------------------------------------------------

    def predict_noise(self, z_t: Tensor, t, c_t: Tensor, c_f: Tensor, prefix_c_t: Tensor,
                      frozen_feats=None, task_embeddings=None) -> Tensor:
        if c_f is None:
            raise ContractError("conditioned model requires c_f")
        temb = T.constant(time_embedding(t, self.cfg.time_dim))
        frozen_ctx = c_t if self.prefix_mode == "trainable_only" else prefix_c_t
        if frozen_feats is None:
            frozen_feats = self.base.encoder_and_mid(z_t, temb, frozen_ctx)
        x = T.add(z_t, self._apply_z1(c_f, task_embeddings))
        ctrl_feats = self.base.encoder_and_mid(x, temb, prefix_c_t, store=self.p, tag="ctrl")
        taps = []
        for name, fz, ct in zip(Z2_TAPS, frozen_feats, ctrl_feats):
            z2 = T.add_channel(T.conv2d(ct, self.p[f"ctrl.z2.{name}.k"]), self.p[f"ctrl.z2.{name}.b"])
            taps.append(T.add(fz, z2))
        return self.base.decode_eps(tuple(taps), temb, frozen_ctx)


def zero_conv_from_embedding(model: ConditionedDenoiser, v: Tensor) -> tuple[Tensor, Tensor]:
    if model.zeroconv_mode != "mlp_from_embedding":
        raise ContractError("zero_conv_from_embedding requires zeroconv_mode=mlp_from_embedding")
    return model.z1_from_embedding(v)


def count_parameters(params, trainable_only: bool = False) -> int:
    if isinstance(params, dict):
        params = params.values()
    return sum(p.size for p in params if not (trainable_only and p.frozen))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch: int = 8
    lr: float = 2e-3
    recon_weight: float = 1.0


def pretrain_base(corpus, text_encoder, cfg: PretrainConfig, schedule: NoiseSchedule,
                  seed: int, denoiser_cfg: DenoiserConfig | None = None,
                  progress=None) -> tuple[BaseDenoiser, list[float]]:
    """Text-to-image denoiser + image/latent projections, trained jointly with
    the toy text encoder on the standard eps-prediction loss plus latent
    reconstruction; everything is frozen afterwards."""
    if not corpus:
        raise ContractError("pretrain_base: empty corpus")
    if denoiser_cfg is None:
        denoiser_cfg = DenoiserConfig(image_size=corpus[0].image.shape[-1])
    base = BaseDenoiser(denoiser_cfg, seed)
    params = list(base.params().values()) + list(text_encoder.params(include_tokens=False).values())
    opt = AdamW(weight_decay=0.0)
    losses = []
    tok_cache: dict[str, list[int]] = {}
    for step in range(cfg.steps if cfg.steps else 0):
        g = rng.stream(seed, "pretrain", step)
        idx = g.choice(len(corpus), size=min(cfg.batch, len(corpus)), replace=False)
        batch = [corpus[i] for i in idx]
        images = T.constant(np.stack([s.image.data for s in batch]))
        t = g.integers(1, schedule.T + 1, size=len(batch))
        T.zero_grads(params)
        with Tape() as tape:
            ctxs = []
            for s in batch:
                ids = tok_cache.setdefault(s.caption, text_encoder.tokenize(s.caption))
                ctxs.append(T.reshape(text_encoder.encode_ids(ids).tokens, (1, -1, denoiser_cfg.text_dim)))
            ctx = ctxs[0] if len(ctxs) == 1 else T.concat(ctxs, axis=0)
            z = base.img_to_latent(images)
            eps = T.constant(g.normal(0.0, 1.0, z.shape))
            z_t = add_noise(z, t, eps, schedule)
            loss = diffusion_loss(eps, base.predict(z_t, t, ctx))
            if cfg.recon_weight:
                recon = base.latent_to_img(z)
                loss = T.add(loss, T.mul(diffusion_loss(images, recon), cfg.recon_weight))
            tape.backward(loss)
        opt.step(params, cfg.lr)
        losses.append(loss.item())
        if progress and (step + 1) % 200 == 0:
            progress(step + 1, losses)
    base.freeze()
    text_encoder.freeze()
    return base, losses


@dataclass
class Stage2Config:
    lr: float = 1e-3
    steps: int = 4000
    batch: int = 8
    ddim_steps: int = 50
    prefix_mode: str = "trainable_only"
    zeroconv_mode: str = "learned"


def _check_registered_tokens(text_encoder, prompt: str):
    from .text import split_words

    for w in split_words(prompt):
        if w.startswith("⟨") and w not in text_encoder.id_of:
            raise ContractError(f"caption contains unregistered task token {w}")


def train_stage2(base: BaseDenoiser, text_encoder, corpus, cfg: Stage2Config,
                 schedule: NoiseSchedule, seed: int,
                 progress=None) -> tuple[ConditionedDenoiser, list[float]]:
    """Fit the trainable copy + zero-convs + condition encoder; the frozen side
    sees the original caption, the copy sees the prefixed caption."""
    from .text import apply_prefix

    if not base.is_frozen():
        raise ContractError("train_stage2: base model must be frozen")
    model = ConditionedDenoiser(base, seed, cfg.prefix_mode, cfg.zeroconv_mode)
    trainable = list(model.params().values())
    opt = AdamW(weight_decay=0.0)
    # frozen-text encodings are constants; cache per caption
    enc_cache: dict[str, np.ndarray] = {}

    def enc(prompt: str) -> np.ndarray:
        if prompt not in enc_cache:
            _check_registered_tokens(text_encoder, prompt)
            enc_cache[prompt] = text_encoder.encode(prompt).tokens.data
        return enc_cache[prompt]

    tok_rows = {t: text_encoder.token_row(t) for t in
                ("depth", "hed", "scribble", "animal_pose") if text_encoder.has_token(t)}
    losses = []
    for step in range(cfg.steps):
        g = rng.stream(seed, "stage2", step)
        idx = g.choice(len(corpus), size=min(cfg.batch, len(corpus)), replace=False)
        batch = [corpus[i] for i in idx]
        tasks = [sorted(s.task_mask)[g.integers(0, len(s.task_mask))] for s in batch]
        conds = T.constant(np.stack([s.conditions[t].data for s, t in zip(batch, tasks)]))
        images = np.stack([s.image.data for s in batch])
        ctx = T.constant(np.stack([enc(s.caption) for s in batch]))
        pctx = T.constant(np.stack([enc(apply_prefix(text_encoder, t, s.caption))
                                    for s, t in zip(batch, tasks)]))
        t_steps = g.integers(1, schedule.T + 1, size=len(batch))
        # the frozen pathway does not depend on trainables: compute off-tape
        z = base.img_to_latent(T.constant(images))
        eps = T.constant(g.normal(0.0, 1.0, z.shape))
        z_t = add_noise(z, t_steps, eps, schedule)
        temb = T.constant(time_embedding(t_steps, base.cfg.time_dim))
        frozen_ctx = ctx if cfg.prefix_mode == "trainable_only" else pctx
        frozen_feats = base.encoder_and_mid(z_t, temb, frozen_ctx)
        embs = [tok_rows[t] for t in tasks] if cfg.zeroconv_mode == "mlp_from_embedding" else None
        T.zero_grads(list(model.all_params().values()) + list(tok_rows.values()))
        with Tape() as tape:
            c_f = model.encode_condition(conds)
            eps_pred = model.predict_noise(z_t, t_steps, ctx, c_f, pctx,
                                           frozen_feats=frozen_feats, task_embeddings=embs)
            loss = diffusion_loss(eps, eps_pred)
            tape.backward(loss)
        opt.step(trainable, cfg.lr)
        losses.append(loss.item())
        if progress and (step + 1) % 200 == 0:
            progress(step + 1, losses)
    return model, losses


# ---------------------------------------------------------------------------
# DDIM sampling (eta = 0)
# ---------------------------------------------------------------------------


def ddim_timesteps(total: int, steps: int) -> list[int]:
    if steps > total:
        raise ContractError(f"ddim steps {steps} > schedule length {total}")
    if total % steps != 0:
        raise ContractError(f"ddim steps {steps} must evenly stride {total}")
    stride = total // steps
    return list(range(total, 0, -stride))


def ddim_step(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    z0 = (z_t - schedule.sqrt_1mab[t] * eps) / schedule.sqrt_ab[t]
    return schedule.sqrt_ab[t_prev] * z0 + schedule.sqrt_1mab[t_prev] * eps


def ddim_sample_batch(model, text_encoder, schedule: NoiseSchedule, prompts,
                      tasks, cond_maps, steps: int = 50, seed: int = 0,
                      sample_offset: int = 0) -> Tensor:
    """Deterministic reverse process; per-sample streams keyed (seed, index)."""
    from .text import apply_prefix

    base = model.base if isinstance(model, ConditionedDenoiser) else model
    conditioned = isinstance(model, ConditionedDenoiser)
    n = len(prompts)
    cfg = base.cfg
    lat = cfg.image_size // 4
    z = np.stack([rng.normal(seed, (cfg.latent_channels, lat, lat), "ddim", sample_offset + i)
                  for i in range(n)])
    ctx = T.constant(np.stack([text_encoder.encode(p).tokens.data for p in prompts]))
    if conditioned:
        pctx = T.constant(np.stack([
            text_encoder.encode(apply_prefix(text_encoder, t, p)).tokens.data
            for p, t in zip(prompts, tasks)]))
        conds = cond_maps if isinstance(cond_maps, Tensor) else T.constant(np.stack(
            [c.data if isinstance(c, Tensor) else np.asarray(c) for c in cond_maps]))
        c_f = model.encode_condition(conds)
        embs = ([text_encoder.token_row(t) for t in tasks]
                if model.zeroconv_mode == "mlp_from_embedding" else None)
    ts = ddim_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        t_vec = np.full(n, t, dtype=np.int64)
        if conditioned:
            eps = model.predict_noise(T.constant(z), t_vec, ctx, c_f, pctx,
                                      task_embeddings=embs).data
        else:
            eps = base.predict(T.constant(z), t_vec, ctx).data
        z = ddim_step(z, eps, t, t_prev, schedule)
    img = base.latent_to_img(T.constant(z)).data
    return Tensor(np.clip(img, 0.0, 1.0))


def ddim_sample(model, text_encoder, schedule: NoiseSchedule, prompt: str, task: str,
                condition_map, steps: int = 50, seed: int = 0) -> Tensor:
    """One image for (prompt, task, condition); bitwise reproducible per seed."""
    cond = condition_map if isinstance(condition_map, Tensor) else Tensor(condition_map)
    batch = ddim_sample_batch(model, text_encoder, schedule, [prompt], [task],
                              T.constant(cond.data[None]), steps=steps, seed=seed)
    return Tensor(batch.data[0])
