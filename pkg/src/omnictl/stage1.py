"""Integrated multi-task dense prediction: strided-conv multi-scale backbone,
m parallel FPN heads concatenated to an m·C-channel full-resolution feature,
and a task-embedding decoder (per-pixel inner product + sigmoid).

One shared model serves all tasks; which condition comes out is selected
purely by the projected task vector, so parameter count is task-count
independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .optim import poly_decay, sgd_step
from .tensor import ContractError, Parameter, Tape, Tensor

TASKS = ("depth", "hed", "scribble", "animal_pose")
LOSS_WEIGHTS = {"depth": 0.5, "hed": 1.0, "scribble": 5.0, "animal_pose": 5.0}
SCALES = (4, 8, 16, 32)


@dataclass
class Stage1Config:
    m: int = 4  # parallel FPN heads
    c: int = 8  # per-head output channels
    backbone_channels: int = 32
    fpn_channels: int = 16  # per-head internal width
    embed_hidden: int = 32
    embedding_mode: str = "one_hot"  # one_hot | text
    lr: float = 1e-3
    lr_floor: float = 1e-4
    steps: int = 3000
    batch: int = 8


@dataclass(frozen=True)
class TaskEmbedding:
    mode: str
    task: str
    raw: np.ndarray  # length 4 (one_hot) or d_text (text)


def one_hot_embeddings() -> dict[str, TaskEmbedding]:
    eye = np.eye(len(TASKS))
    return {t: TaskEmbedding("one_hot", t, eye[i]) for i, t in enumerate(TASKS)}


def text_embeddings(text_encoder) -> dict[str, TaskEmbedding]:
    """Pooled text encodings of the task names (e.g. "animal pose")."""
    out = {}
    for t in TASKS:
        pooled = text_encoder.encode(t.replace("_", " ")).pooled.data
        out[t] = TaskEmbedding("text", t, pooled)
    return out


class DensePredictor:
    def __init__(self, cfg: Stage1Config, task_embeddings: dict[str, TaskEmbedding], seed: int):
        self.cfg = cfg
        self.tasks = task_embeddings
        raw_dims = {e.raw.shape[0] for e in task_embeddings.values()}
        if len(raw_dims) != 1:
            raise ContractError("task embeddings must share one raw dimension")
        self.raw_dim = raw_dims.pop()
        self.p: dict[str, Parameter] = {}
        self._init(seed)

    def _conv(self, name, cout, cin, k, seed):
        scale = (cin * k * k) ** -0.5
        self.p[name] = Parameter(rng.normal(seed, (cout, cin, k, k), name, scale=scale), name)
        self.p[name + ".b"] = Parameter(np.zeros(cout), name + ".b")

    def _init(self, seed):
        cfg = self.cfg
        cbb, cf = cfg.backbone_channels, cfg.fpn_channels
        self._conv("s1.stem1", cbb, 3, 3, seed)
        self._conv("s1.stem2", cbb, cbb, 3, seed)
        for lv in range(1, 4):
            self._conv(f"s1.down{lv}", cbb, cbb, 3, seed)
        for lv in range(4):
            self.p[f"s1.norm{lv}.scale"] = Parameter(np.ones(cbb), f"s1.norm{lv}.scale")
            self.p[f"s1.norm{lv}.shift"] = Parameter(np.zeros(cbb), f"s1.norm{lv}.shift")
        for h in range(cfg.m):
            for lv in range(4):
                self._conv(f"s1.h{h}.lat{lv}", cf, cbb, 1, seed)
            self._conv(f"s1.h{h}.smooth", cf, cf, 3, seed)
            name = f"s1.h{h}.up"
            scale = (cf * 16) ** -0.5
            self.p[name] = Parameter(rng.normal(seed, (cf, cfg.c, 4, 4), name, scale=scale), name)
            self.p[name + ".b"] = Parameter(np.zeros(cfg.c), name + ".b")
        mc = cfg.m * cfg.c
        self.p["s1.mlp.w1"] = Parameter(
            rng.normal(seed, (self.raw_dim, cfg.embed_hidden), "s1.mlp.w1", scale=self.raw_dim ** -0.5),
            "s1.mlp.w1")
        self.p["s1.mlp.b1"] = Parameter(np.zeros(cfg.embed_hidden), "s1.mlp.b1")
        self.p["s1.mlp.w2"] = Parameter(
            rng.normal(seed, (cfg.embed_hidden, mc), "s1.mlp.w2", scale=cfg.embed_hidden ** -0.5),
            "s1.mlp.w2")
        self.p["s1.mlp.b2"] = Parameter(np.zeros(mc), "s1.mlp.b2")

    def params(self) -> dict[str, Parameter]:
        return dict(self.p)

    # -- forward pieces --------------------------------------------------------

    def _norm_channels(self, x: Tensor, lv: int) -> Tensor:
        xt = T.transpose(x, (0, 2, 3, 1))
        xt = T.layer_norm(xt, self.p[f"s1.norm{lv}.scale"], self.p[f"s1.norm{lv}.shift"])
        return T.transpose(xt, (0, 3, 1, 2))

    def _block(self, x, name, stride):
        y = T.conv2d(x, self.p[name], stride=stride, padding=1)
        return T.silu(T.add_channel(y, self.p[name + ".b"]))

    def extract_multiscale(self, images: Tensor) -> list[Tensor]:
        s = images.shape[-1]
        if s % 32 != 0:
            raise ContractError(f"input size {s} not divisible by 32")
        x = self._block(images, "s1.stem1", 2)
        x = self._block(x, "s1.stem2", 2)
        levels = [self._norm_channels(x, 0)]
        for lv in range(1, 4):
            x = self._block(levels[-1], f"s1.down{lv}", 2)
            levels.append(self._norm_channels(x, lv))
        return levels

    def _head(self, pyramid, h: int) -> Tensor:
        def lat(lv):
            k = self.p[f"s1.h{h}.lat{lv}"]
            return T.add_channel(T.conv2d(pyramid[lv], k), self.p[f"s1.h{h}.lat{lv}.b"])

        p = lat(3)
        for lv in (2, 1, 0):
            p = T.add(lat(lv), T.upsample_nearest(p, 2))
        p = T.silu(T.add_channel(T.conv2d(p, self.p[f"s1.h{h}.smooth"], padding=1),
                                 self.p[f"s1.h{h}.smooth.b"]))
        up = T.conv_transpose2d(p, self.p[f"s1.h{h}.up"], stride=4)
        return T.add_channel(up, self.p["s1.h%d.up.b" % h])

    def fpn_forward(self, pyramid) -> Tensor:
        heads = [self._head(pyramid, h) for h in range(self.cfg.m)]
        return heads[0] if len(heads) == 1 else T.concat(heads, axis=1)

    def project_task(self, emb: TaskEmbedding) -> Tensor:
        raw = T.constant(emb.raw.reshape(1, -1))
        h = T.silu(T.bias_add_last(T.matmul(raw, self.p["s1.mlp.w1"]), self.p["s1.mlp.b1"]))
        out = T.bias_add_last(T.matmul(h, self.p["s1.mlp.w2"]), self.p["s1.mlp.b2"])
        return T.reshape(out, (self.cfg.m * self.cfg.c,))

    def decode(self, feature: Tensor, emb: TaskEmbedding) -> Tensor:
        v = self.project_task(emb)
        if v.shape[0] != feature.shape[1]:
            raise ContractError(f"projected task length {v.shape[0]} != feature channels {feature.shape[1]}")
        return T.sigmoid(T.channel_sum(T.channel_scale(feature, v)))

    def forward(self, images: Tensor, task: str) -> Tensor:
        return self.decode(self.fpn_forward(self.extract_multiscale(images)), self.tasks[task])


def stage1_loss(pred: Tensor, target: Tensor, task: str) -> Tensor:
    if task not in LOSS_WEIGHTS:
        raise ContractError(f"unknown task {task!r}")
    if pred.shape != target.shape:
        raise ContractError(f"pred/target shape mismatch {pred.shape} vs {target.shape}")
    w = LOSS_WEIGHTS[task]
    if task == "depth":
        return T.mul(T.mean(T.absolute(T.sub(pred, target))), w)
    return T.mul(bce(pred, target), w)


def bce(pred: Tensor, target: Tensor) -> Tensor:
    p = T.clip(pred, 1e-7, 1.0 - 1e-7)
    pos = T.mul(target, T.log(p))
    negt = T.mul(T.sub(T.constant(np.ones(pred.shape)), target), T.log(T.sub(T.constant(np.ones(pred.shape)), p)))
    return T.neg(T.mean(T.add(pos, negt)))


def predict_condition(model: DensePredictor, image, task: str) -> Tensor:
    """Pure inference: extract -> fpn -> decode for one image."""
    if task not in model.tasks:
        raise ContractError(f"task {task!r} not registered")
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.data.ndim == 3:
        img = T.reshape(img, (1,) + img.shape)
    out = model.forward(img, task)
    return T.reshape(out, out.shape[1:])


def train_stage1(corpus, cfg: Stage1Config, steps: int, seed: int,
                 task_embeddings=None, checkpoint_every: int = 0,
                 checkpoint_dir=None) -> tuple[DensePredictor, list[float]]:
    """Weighted multi-task SGD with polynomial lr decay; deterministic per seed."""
    if not corpus:
        raise ContractError("train_stage1: empty corpus")
    if task_embeddings is None:
        task_embeddings = one_hot_embeddings()
    model = DensePredictor(cfg, task_embeddings, seed)
    params = list(model.params().values())
    losses = []
    for step in range(steps):
        g = rng.stream(seed, "stage1", step)
        idx = g.choice(len(corpus), size=min(cfg.batch, len(corpus)), replace=False)
        batch = [corpus[i] for i in idx]
        images = T.constant(np.stack([s.image.data for s in batch]))
        T.zero_grads(params)
        with Tape() as tape:
            feature = model.fpn_forward(model.extract_multiscale(images))
            total = None
            for task in TASKS:
                rows = [i for i, s in enumerate(batch) if task in s.task_mask]
                if not rows:
                    continue
                feat = T.take_rows(feature, rows)
                target = T.constant(np.stack([batch[i].conditions[task].data for i in rows]))
                loss = stage1_loss(model.decode(feat, task_embeddings[task]), target, task)
                total = loss if total is None else T.add(total, loss)
            tape.backward(total)
        sgd_step(params, poly_decay(cfg.lr, step, max(steps, 1), cfg.lr_floor))
        losses.append(total.item())
        if checkpoint_every and checkpoint_dir and (step + 1) % checkpoint_every == 0:
            from .checkpoint import save_params

            save_params(checkpoint_dir, model.params())
    return model, losses
