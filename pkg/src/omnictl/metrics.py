"""Evaluation quantities: depth RMSE, edge ODS/OIS/AP, Fréchet distance on
Gaussian feature statistics, and text-image inner-product similarity.

The Fréchet feature extractor is a fixed-seed random conv net concatenated
with the pooled toy image encoder, so scores only compare runs of this
artifact ("toy-FID").
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from . import tensor as T
from .optim import AdamW
from .tensor import ContractError, Parameter, ShapeError, Tape, Tensor

THRESHOLD_GRID = tuple(i / 100.0 for i in range(1, 100))


# ---------------------------------------------------------------------------
# Pixel metrics
# ---------------------------------------------------------------------------


def rmse(pred, gt) -> float:
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"rmse shape mismatch {p.shape} vs {g.shape}")
    d = p - g
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f_measure: float


def _counts(pred: np.ndarray, gt: np.ndarray, tau: float):
    b = pred > tau
    g = gt > 0.5
    tp = int(np.sum(b & g))
    fp = int(np.sum(b & ~g))
    fn = int(np.sum(~b & g))
    return tp, fp, fn


def _prf(tp: int, fp: int, fn: int):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def pr_at_threshold(pred, gt, tau: float) -> PRPoint:
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
    if not set(np.unique(g)).issubset({0.0, 1.0}):
        raise ContractError("pr_at_threshold: ground truth must be binary")
    prec, rec, f = _prf(*_counts(p, g, tau))
    return PRPoint(tau, prec, rec, f)


def _dataset_counts(preds, gts):
    preds = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in preds]
    gts = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in gts]
    if not preds or len(preds) != len(gts):
        raise ContractError("ods/ois/ap need equal-length nonempty prediction/gt lists")
    # per image, per threshold: tp/fp/fn
    table = np.zeros((len(preds), len(THRESHOLD_GRID), 3), dtype=np.int64)
    for i, (p, g) in enumerate(zip(preds, gts)):
        for j, tau in enumerate(THRESHOLD_GRID):
            table[i, j] = _counts(p, g, tau)
    return table


def ods(preds, gts) -> tuple[float, float]:
    """Best dataset-wide fixed threshold: mean per-image F, maximized over the grid.

    Dataset aggregation is the mean of per-image F so that ODS <= OIS holds by
    the max-inside-mean inequality.
    """
    table = _dataset_counts(preds, gts)
    best_tau, best_f = THRESHOLD_GRID[0], -1.0
    for j, tau in enumerate(THRESHOLD_GRID):
        f = float(np.mean([_prf(*table[i, j])[2] for i in range(table.shape[0])]))
        if f > best_f:
            best_tau, best_f = tau, f
    return best_tau, best_f


def ois(preds, gts) -> float:
    """Mean over images of each image's best-threshold F."""
    table = _dataset_counts(preds, gts)
    best = []
    for i in range(table.shape[0]):
        best.append(max(_prf(*table[i, j])[2] for j in range(len(THRESHOLD_GRID))))
    return float(np.mean(best))


def ap(preds, gts) -> float:
    """Trapezoidal integral of the dataset precision-recall envelope over [0,1]."""
    table = _dataset_counts(preds, gts).sum(axis=0)
    pts = [_prf(*table[j])[:2] for j in range(len(THRESHOLD_GRID))]

    def envelope(r):
        vals = [p for p, rr in pts if rr >= r]
        return max(vals) if vals else 0.0

    nodes = sorted({0.0, 1.0} | {rr for _, rr in pts})
    area = 0.0
    for a, b in zip(nodes[:-1], nodes[1:]):
        area += (b - a) * (envelope(a) + envelope(b)) / 2.0
    return area


# ---------------------------------------------------------------------------
# Fréchet distance between Gaussian feature statistics
# ---------------------------------------------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray  # [d]
    cov: np.ndarray  # [d,d]


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh(m)
    if w.min() < -1e-10:
        raise ContractError(f"covariance has eigenvalue {w.min():.3e} < -1e-10")
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.T


def frechet(a: GaussianStats, b: GaussianStats) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), via the symmetrized product."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ShapeError("frechet: dimension mismatch")
    for s in (a.cov, b.cov):
        if not np.allclose(s, s.T, atol=1e-10):
            raise ContractError("frechet: covariance not symmetric")
    s1h = _sym_sqrt((a.cov + a.cov.T) / 2.0)
    inner = s1h @ ((b.cov + b.cov.T) / 2.0) @ s1h
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    d2 = float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def feature_stats(images, extractor) -> GaussianStats:
    """Gaussian fit of extractor features; regularized when n < d+1."""
    if len(images) == 0:
        raise ContractError("feature_stats: empty image set")
    feats = extractor(images)
    n, d = feats.shape
    mu = feats.mean(axis=0)
    if n > 1:
        xc = feats - mu
        cov = (xc.T @ xc) / (n - 1)
    else:
        cov = np.zeros((d, d))
    if n < d + 1:
        cov = cov + 1e-6 * np.eye(d)
    return GaussianStats(mean=mu, cov=cov)


# ---------------------------------------------------------------------------
# Toy image encoder (CLIP-style tower) and Fréchet feature extractor
# ---------------------------------------------------------------------------


def _normalize_rows(x: Tensor) -> Tensor:
    n = T.sum_axis(T.mul(x, x), 1)
    return T.scale_rows(x, T.power(T.add(n, 1e-12), -0.5))


class ImageEncoder:
    """Small conv tower; pooled features feed toy-FID, projected rows feed CLIP_t."""

    POOL_DIM = 32

    def __init__(self, seed: int, embed_dim: int = 64):
        self.embed_dim = embed_dim
        self.p: dict[str, Parameter] = {}

        def add(name, shape, scale):
            self.p[name] = Parameter(rng.normal(seed, shape, name, scale=scale), name)

        add("imgenc.c1", (16, 3, 3, 3), 0.2)
        self.p["imgenc.b1"] = Parameter(np.zeros(16), "imgenc.b1")
        add("imgenc.c2", (32, 16, 3, 3), 0.1)
        self.p["imgenc.b2"] = Parameter(np.zeros(32), "imgenc.b2")
        add("imgenc.c3", (32, 32, 3, 3), 0.1)
        self.p["imgenc.b3"] = Parameter(np.zeros(32), "imgenc.b3")
        add("imgenc.proj", (32, embed_dim), 32 ** -0.5)
        self.p["imgenc.pb"] = Parameter(np.zeros(embed_dim), "imgenc.pb")

    def params(self):
        return dict(self.p)

    def freeze(self):
        for p in self.p.values():
            p.frozen = True

    def pool(self, images: Tensor) -> Tensor:
        x = T.silu(T.add_channel(T.conv2d(images, self.p["imgenc.c1"], stride=2, padding=1), self.p["imgenc.b1"]))
        x = T.silu(T.add_channel(T.conv2d(x, self.p["imgenc.c2"], stride=2, padding=1), self.p["imgenc.b2"]))
        x = T.silu(T.add_channel(T.conv2d(x, self.p["imgenc.c3"], stride=2, padding=1), self.p["imgenc.b3"]))
        b, c, h, w = x.shape
        pooled = T.reshape(T.sum_axis(T.sum_axis(x, 3), 2), (b, c))
        return T.mul(pooled, 1.0 / (h * w))

    def embed(self, images: Tensor) -> Tensor:
        e = T.bias_add_last(T.matmul(self.pool(images), self.p["imgenc.proj"]), self.p["imgenc.pb"])
        return _normalize_rows(e)

    def embed_np(self, images: np.ndarray) -> np.ndarray:
        return self.embed(Tensor(images)).data

    def pool_np(self, images: np.ndarray) -> np.ndarray:
        return self.pool(Tensor(images)).data


class FidExtractor:
    """Fixed-seed random conv features concatenated with encoder pooled features."""

    def __init__(self, image_encoder: ImageEncoder, seed: int = 1234):
        self.enc = image_encoder
        self.k1 = rng.normal(seed, (8, 3, 3, 3), "fid.k1", scale=0.3)
        self.k2 = rng.normal(seed, (16, 8, 3, 3), "fid.k2", scale=0.2)

    def __call__(self, images) -> np.ndarray:
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        h = T.relu(T.conv2d(Tensor(x), Tensor(self.k1), stride=4, padding=1))
        h = T.relu(T.conv2d(h, Tensor(self.k2), stride=4, padding=1))
        rand_feats = h.data.mean(axis=(2, 3))
        return np.concatenate([rand_feats, self.enc.pool_np(x)], axis=1)


def clip_sim(image, caption: str, image_encoder: ImageEncoder, text_encoder) -> float:
    """Inner product of L2-normalized image and text embeddings."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    ie = image_encoder.embed_np(img[None])[0]
    te = text_encoder.encode(caption).pooled.data
    te = te / max(np.linalg.norm(te), 1e-12)
    if ie.shape != te.shape:
        raise ShapeError(f"clip_sim dim mismatch {ie.shape} vs {te.shape}")
    return float(ie @ te)


def corpus_clip_score(images, captions, image_encoder, text_encoder) -> float:
    return float(np.mean([
        clip_sim(im, cap, image_encoder, text_encoder) for im, cap in zip(images, captions)
    ]))


def _log_softmax_rows(x: Tensor) -> Tensor:
    shift = T.constant(np.broadcast_to(x.data.max(axis=1, keepdims=True), x.shape).copy())
    z = T.sub(x, shift)
    lse = T.log(T.sum_axis(T.exp(z), 1))
    return T.sub(z, T.scale_rows(T.constant(np.ones(x.shape)), lse))


def train_alignment(image_encoder: ImageEncoder, text_encoder, corpus, steps: int,
                    lr: float, seed: int, batch: int = 16) -> list[float]:
    """Contrastive phase aligning the image tower to frozen text embeddings."""
    temp = 10.0  # inverse temperature on cosine logits
    texts = {}
    for s in corpus:
        if s.caption not in texts:
            te = text_encoder.encode(s.caption).pooled.data
            texts[s.caption] = te / max(np.linalg.norm(te), 1e-12)
    opt = AdamW(weight_decay=0.0)
    params = list(image_encoder.params().values())
    losses = []
    eye = None
    for step in range(steps):
        g = rng.stream(seed, "align", step)
        idx = g.choice(len(corpus), size=min(batch, len(corpus)), replace=False)
        imgs = np.stack([corpus[i].image.data for i in idx])
        tmat = np.stack([texts[corpus[i].caption] for i in idx])
        b = len(idx)
        if eye is None or eye.shape[0] != b:
            eye = np.eye(b)
        T.zero_grads(params)
        with Tape() as tape:
            ie = image_encoder.embed(Tensor(imgs))
            logits = T.mul(T.matmul(ie, T.constant(tmat.T)), temp)
            l_i2t = T.mul(T.tsum(T.mul(_log_softmax_rows(logits), T.constant(eye))), -1.0 / b)
            l_t2i = T.mul(T.tsum(T.mul(_log_softmax_rows(T.transpose(logits, (1, 0))), T.constant(eye))), -1.0 / b)
            loss = T.mul(T.add(l_i2t, l_t2i), 0.5)
            tape.backward(loss)
        opt.step(params, lr)
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_metrics_csv(rows, path) -> None:
    """Rows of (metric, task, variant, value)."""
    lines = ["metric,task,variant,value"]
    for metric, task, variant, value in rows:
        lines.append(f"{metric},{task},{variant},{value:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_csv(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        metric, task, variant, value = line.split(",")
        rows.append((metric, task, variant, float(value)))
    return rows


def write_markdown_summary(rows, path, tasks=("depth", "hed", "scribble", "animal_pose")) -> None:
    """Generation-metric grid (variants x tasks for toy-FID and CLIP_t) plus stage-1 lines."""
    by = {(m, t, v): val for m, t, v, val in rows}
    variants = sorted({v for m, _, v, _ in rows if m in ("toy_fid", "clip_t")})
    lines = ["# Evaluation summary", ""]
    for metric, label in (("toy_fid", "toy-FID (lower is better)"), ("clip_t", "CLIP_t (higher is better)")):
        if not any(m == metric for m, _, _, _ in rows):
            continue
        lines += [f"## {label}", "", "| method | " + " | ".join(tasks) + " |",
                  "|---" * (len(tasks) + 1) + "|"]
        for v in variants:
            cells = [f"{by[(metric, t, v)]:.4f}" if (metric, t, v) in by else "-" for t in tasks]
            lines.append(f"| {v} | " + " | ".join(cells) + " |")
        lines.append("")
    stage1 = [(m, t, v, val) for m, t, v, val in rows if m in ("rmse", "ods", "ois", "ap", "pixel_acc", "bce")]
    if stage1:
        lines += ["## Stage-1 dense prediction", "", "| metric | task | value |", "|---|---|---|"]
        for m, t, _, val in stage1:
            lines.append(f"| {m} | {t} | {val:.4f} |")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")
