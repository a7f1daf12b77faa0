"""Procedural synthetic scenes with analytically exact condition maps.

Each scene is a few depth-ordered colored primitives or a stick figure on a
plain background. Depth, edge, scribble, and pose maps are derived directly
from the scene geometry, so stage-1 targets are exact rather than estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rng
from .tensor import ContractError, Tensor

TASKS = ("depth", "hed", "scribble", "animal_pose")
SHAPE_TASKS = frozenset(("depth", "hed", "scribble"))
POSE_TASKS = frozenset(("animal_pose",))

FILL_COLORS = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.78, 0.16),
    "blue": (0.15, 0.22, 0.90),
    "yellow": (0.95, 0.90, 0.12),
    "purple": (0.60, 0.16, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.85, 0.90),
    "magenta": (0.90, 0.15, 0.75),
}
BG_COLORS = {
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
    "black": (0.06, 0.06, 0.06),
}
SHAPE_NAMES = ("circle", "rectangle", "triangle")
STANCES = ("standing", "walking", "running")

BONES = ((0, 1), (0, 2), (1, 3), (2, 4))  # head->hips, hips->feet


@dataclass(frozen=True)
class Primitive:
    kind: str  # circle | rectangle | triangle
    cx: float
    cy: float
    size: float  # radius / half-extent
    aspect: float  # rectangle height factor
    depth: float  # in (0, 1]; larger = nearer
    color: str


@dataclass(frozen=True)
class Skeleton:
    points: tuple  # 5 (x, y) pairs: head, left/right hip, left/right foot
    color: str


@dataclass(frozen=True)
class SceneSpec:
    size: int
    primitives: tuple = ()
    skeleton: Skeleton | None = None
    background: str = "white"
    seed: int = 0


@dataclass
class Sample:
    name: str
    image: Tensor  # [3,S,S] in [0,1]
    caption: str
    conditions: dict  # task -> Tensor [1,S,S] in [0,1]
    task_mask: frozenset
    spec: SceneSpec | None = None


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def _grid(s: int):
    ys, xs = np.mgrid[0:s, 0:s]
    return xs + 0.5, ys + 0.5


def _coverage(prim: Primitive, s: int) -> np.ndarray:
    px, py = _grid(s)
    if prim.kind == "circle":
        return (px - prim.cx) ** 2 + (py - prim.cy) ** 2 <= prim.size ** 2
    if prim.kind == "rectangle":
        return (np.abs(px - prim.cx) <= prim.size) & (np.abs(py - prim.cy) <= prim.size * prim.aspect)
    if prim.kind == "triangle":
        v0 = (prim.cx, prim.cy - prim.size)
        v1 = (prim.cx - 0.9 * prim.size, prim.cy + 0.8 * prim.size)
        v2 = (prim.cx + 0.9 * prim.size, prim.cy + 0.8 * prim.size)

        def edge(a, b):
            return (px - a[0]) * (b[1] - a[1]) - (py - a[1]) * (b[0] - a[0])

        d0, d1, d2 = edge(v0, v1), edge(v1, v2), edge(v2, v0)
        neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
        pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
        return ~(neg & pos)
    raise ContractError(f"unknown primitive kind {prim.kind!r}")


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    x, y = x0, y0
    while True:
        pts.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return pts


def _skeleton_mask(skel: Skeleton, s: int) -> np.ndarray:
    mask = np.zeros((s, s), dtype=bool)
    px, py = _grid(s)
    pts = [(int(round(x)), int(round(y))) for x, y in skel.points]
    for x, y in pts:
        mask |= (px - (x + 0.5)) ** 2 + (py - (y + 0.5)) ** 2 <= 2.0 ** 2
    for a, b in BONES:
        for x, y in _bresenham(*pts[a], *pts[b]):
            if 0 <= y < s and 0 <= x < s:
                mask[y, x] = True
    return mask


def render_scene(spec: SceneSpec) -> Tensor:
    """Painter's algorithm, back to front by depth (larger depth = nearer)."""
    s = spec.size
    img = np.empty((3, s, s))
    img[:] = np.asarray(BG_COLORS[spec.background])[:, None, None]
    for prim in sorted(spec.primitives, key=lambda p: p.depth):
        m = _coverage(prim, s)
        for c, v in enumerate(FILL_COLORS[prim.color]):
            img[c][m] = v
    if spec.skeleton is not None:
        m = _skeleton_mask(spec.skeleton, s)
        for c, v in enumerate(FILL_COLORS[spec.skeleton.color]):
            img[c][m] = v
    return Tensor(img)


# ---------------------------------------------------------------------------
# Condition derivations (pure functions of spec / image)
# ---------------------------------------------------------------------------


def derive_depth(spec: SceneSpec) -> Tensor:
    """Per-pixel depth of the front-most primitive; 0 on background."""
    s = spec.size
    dm = np.zeros((s, s))
    for prim in sorted(spec.primitives, key=lambda p: p.depth):
        dm[_coverage(prim, s)] = prim.depth
    return Tensor(dm[None])


def _luma(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def derive_edges(image: Tensor) -> Tensor:
    """Sobel gradient magnitude of the grayscale image, normalized to max 1."""
    g = _luma(image.data if isinstance(image, Tensor) else np.asarray(image))
    gp = np.pad(g, 1, mode="edge")  # replicate so flat images give exactly zero
    # separable Sobel: the central difference cancels exactly on flat regions
    dxc = gp[:, 2:] - gp[:, :-2]
    gx = dxc[:-2] + 2.0 * dxc[1:-1] + dxc[2:]
    dyc = gp[2:, :] - gp[:-2, :]
    gy = dyc[:, :-2] + 2.0 * dyc[:, 1:-1] + dyc[:, 2:]
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return Tensor(mag[None])


def derive_scribble(image: Tensor) -> Tensor:
    """Binary map: 8-bit grayscale value > 127 -> 1.0, else 0.0."""
    g = _luma(image.data if isinstance(image, Tensor) else np.asarray(image))
    q = np.floor(g * 255.0 + 0.5)
    return Tensor((q > 127.0).astype(np.float64)[None])


def derive_pose(spec: SceneSpec) -> Tensor:
    """Skeleton raster: keypoint disks (radius 2) and width-1 bone segments."""
    if spec.skeleton is None:
        raise ContractError("derive_pose: spec has no skeleton")
    return Tensor(_skeleton_mask(spec.skeleton, spec.size).astype(np.float64)[None])


# ---------------------------------------------------------------------------
# Captions
# ---------------------------------------------------------------------------


def _stance(skel: Skeleton, s: int) -> str:
    spread = abs(skel.points[3][0] - skel.points[4][0]) / s
    if spread < 0.18:
        return "standing"
    if spread < 0.30:
        return "walking"
    return "running"


def caption(spec: SceneSpec) -> str:
    if spec.skeleton is not None:
        return f"a stick figure {_stance(spec.skeleton, spec.size)} on a {spec.background} background"
    if not spec.primitives:
        return f"a plain {spec.background} background"
    parts = [f"a {p.color} {p.kind}" for p in spec.primitives]
    return " and ".join(parts) + f" on a {spec.background} background"


def caption_vocabulary() -> set[str]:
    words = {"a", "plain", "and", "on", "background", "stick", "figure"}
    words |= set(SHAPE_NAMES) | set(STANCES) | set(FILL_COLORS) | set(BG_COLORS)
    return words


# ---------------------------------------------------------------------------
# Random specs and corpus assembly
# ---------------------------------------------------------------------------


def _random_shape_spec(seed: int, index: int, size: int) -> SceneSpec:
    g = rng.stream(seed, "shape", index)
    n = int(g.integers(1, 4))
    depths = None
    while depths is None or len(set(depths)) != n:
        depths = [float(d) for d in np.sort(g.uniform(0.25, 1.0, n))]
    prims = []
    names = list(FILL_COLORS)
    for i in range(n):
        kind = SHAPE_NAMES[int(g.integers(0, len(SHAPE_NAMES)))]
        sz = float(g.uniform(0.10, 0.22)) * size
        margin = sz * (1.0 if kind != "rectangle" else 1.3) + 1.0
        cx = float(g.uniform(margin, size - margin))
        cy = float(g.uniform(margin, size - margin))
        prims.append(Primitive(kind, cx, cy, sz, float(g.uniform(0.6, 1.3)), depths[i],
                               names[int(g.integers(0, len(names)))]))
    bg = list(BG_COLORS)[int(g.integers(0, len(BG_COLORS)))]
    return SceneSpec(size=size, primitives=tuple(prims), background=bg, seed=seed)


def _random_pose_spec(seed: int, index: int, size: int) -> SceneSpec:
    g = rng.stream(seed, "pose", index)
    s = size
    hx = float(g.uniform(0.35, 0.65)) * s
    hy = float(g.uniform(0.15, 0.30)) * s
    hip_y = hy + float(g.uniform(0.25, 0.35)) * s
    hip_dx = float(g.uniform(0.04, 0.10)) * s
    foot_y = min(hip_y + float(g.uniform(0.25, 0.35)) * s, s - 4)
    foot_spread = float(g.uniform(0.02, 0.42)) * s
    pts = (
        (hx, hy),
        (hx - hip_dx, hip_y),
        (hx + hip_dx, hip_y),
        (max(3.0, hx - foot_spread / 2), foot_y),
        (min(s - 4.0, hx + foot_spread / 2), foot_y),
    )
    names = list(FILL_COLORS)
    fg = names[int(g.integers(0, len(names)))]
    bg = list(BG_COLORS)[int(g.integers(0, len(BG_COLORS)))]
    return SceneSpec(size=size, skeleton=Skeleton(points=pts, color=fg), background=bg, seed=seed)


def make_shape_sample(seed: int, index: int, size: int) -> Sample:
    spec = _random_shape_spec(seed, index, size)
    img = render_scene(spec)
    conds = {
        "depth": derive_depth(spec),
        "hed": derive_edges(img),
        "scribble": derive_scribble(img),
    }
    return Sample(f"shape_{index:05d}", img, caption(spec), conds, SHAPE_TASKS, spec)


def make_pose_sample(seed: int, index: int, size: int) -> Sample:
    spec = _random_pose_spec(seed, index, size)
    img = render_scene(spec)
    return Sample(f"pose_{index:05d}", img, caption(spec), {"animal_pose": derive_pose(spec)},
                  POSE_TASKS, spec)


def replication_factor(n_shapes: int, n_pose: int) -> int:
    if n_pose <= 0:
        return 1
    return max(1, round(n_shapes / n_pose))


def generate_corpus(seed: int, n_shapes: int, n_pose: int, size: int = 64, workers: int = 1) -> list[Sample]:
    """Shape samples followed by the pose part replicated to balance the two halves.

    Samples are derived from independent per-index streams and merged in index
    order, so any worker count yields bitwise-identical corpora.
    """
    if n_shapes < 1:
        raise ContractError("generate_corpus: n_shapes must be >= 1")
    shape_jobs = [(make_shape_sample, seed, i, size) for i in range(n_shapes)]
    pose_jobs = [(make_pose_sample, seed, j, size) for j in range(n_pose)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda j: j[0](*j[1:]), shape_jobs + pose_jobs))
    else:
        results = [f(*args) for f, *args in shape_jobs + pose_jobs]
    shapes, poses = results[:n_shapes], results[n_shapes:]
    k = replication_factor(n_shapes, n_pose)
    return shapes + [p for _ in range(k) for p in poses]


# ---------------------------------------------------------------------------
# Disk formats: PNG images, PGM condition maps, caption/meta sidecars
# ---------------------------------------------------------------------------


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_png(path, image: Tensor) -> None:
    arr = to_uint8(image.data).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return Tensor(arr.transpose(2, 0, 1))


def write_pgm(path, cond: Tensor) -> None:
    arr = to_uint8(cond.data[0])
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path) -> Tensor:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    arr = np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)
    return Tensor(arr.astype(np.float64)[None] / 255.0)


def write_corpus(dirpath, samples: list[Sample]) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    seen = set()
    for s in samples:
        if s.name in seen:
            continue
        seen.add(s.name)
        sd = d / s.name
        sd.mkdir(exist_ok=True)
        write_png(sd / "image.png", s.image)
        for task, cond in s.conditions.items():
            write_pgm(sd / f"cond_{task}.pgm", cond)
        (sd / "caption.txt").write_text(s.caption, encoding="utf-8")
        seed = s.spec.seed if s.spec is not None else 0
        (sd / "meta.txt").write_text(
            f"tasks={','.join(sorted(s.task_mask))}\nseed={seed}\n", encoding="utf-8"
        )
    (d / "index.txt").write_text("\n".join(s.name for s in samples) + "\n", encoding="utf-8")


def load_corpus(dirpath) -> list[Sample]:
    d = Path(dirpath)
    cache: dict[str, Sample] = {}
    out = []
    for name in (d / "index.txt").read_text(encoding="utf-8").split():
        if name not in cache:
            sd = d / name
            meta = dict(line.split("=", 1) for line in (sd / "meta.txt").read_text().splitlines())
            tasks = frozenset(meta["tasks"].split(","))
            conds = {t: read_pgm(sd / f"cond_{t}.pgm") for t in tasks}
            cache[name] = Sample(name, read_png(sd / "image.png"),
                                 (sd / "caption.txt").read_text(encoding="utf-8"), conds, tasks)
        out.append(cache[name])
    return out
