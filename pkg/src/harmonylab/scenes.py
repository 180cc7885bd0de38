"""Procedural cylindrical toy objects rendered from N evenly spaced azimuths.

Each object is an RGB texture strip wrapped around a cylinder. The half
facing azimuth 0 carries a class pattern (stripes, checker or blob) in two
seed-dependent colors. The opposite half is a flat palette color drawn
independently of everything on the front, so the front view says nothing
about it: given view 0 the back color is uniform over the palette.

A fixed, zero-mean grain is added everywhere. It is identical for all
objects (so a model can learn it) and gives flat regions enough structure
for block matching to lock onto.

Texture columns are stored in decreasing-azimuth order. Moving the camera
from view n to view n+1 therefore shifts content right by ``w_col`` pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .diffusion import ViewSet
from .rng import derive_seed, stream

CLASSES = ("stripes", "checker", "blob")
PALETTE = np.array(
    [
        [0.8, 0.2, 0.2],
        [0.2, 0.8, 0.2],
        [0.2, 0.2, 0.8],
        [0.8, 0.8, 0.2],
    ]
)
PALETTE_NAMES = ("red", "green", "blue", "yellow")
GRAIN_AMPLITUDE = 0.15
STRIPE_PERIOD = 4
CHECKER_CELL = 4
BLOB_RADIUS = 3.0


@dataclass(frozen=True)
class SceneConfig:
    n_views: int = 8
    size: int = 16
    w_col: int = 4
    elevation: float = 30.0

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("need at least two views")
        if self.w_col < 1 or self.size < self.w_col:
            raise ValueError("w_col must be in [1, size]")
        if self.tex_width < self.size:
            raise ValueError("texture strip narrower than a view")
        if self.tex_width % 4:
            raise ValueError("n_views * w_col must be divisible by 4")

    @property
    def tex_width(self) -> int:
        return self.n_views * self.w_col

    def to_dict(self) -> dict:
        return {"n_views": self.n_views, "size": self.size, "w_col": self.w_col, "elevation": self.elevation}


@dataclass
class Scene:
    seed: int
    label: str
    back_color: int
    front_colors: np.ndarray
    texture: np.ndarray  # (H, W_tex, 3), float64 in [0, 1]
    config: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class FlowField:
    """Per-pixel displacement (pixels) with a validity mask, all (H, W)."""

    dx: np.ndarray
    dy: np.ndarray
    valid: np.ndarray


@lru_cache(maxsize=8)
def _grain(height: int, width: int) -> np.ndarray:
    g = stream(0, "surface-grain").uniform(-1.0, 1.0, size=(height, width))
    g -= g.mean(axis=0, keepdims=True)
    g *= GRAIN_AMPLITUDE / np.abs(g).max()
    g.setflags(write=False)
    return g


def front_mask(cfg: SceneConfig) -> np.ndarray:
    """True for texture columns on the half facing azimuth 0."""
    c = np.arange(cfg.tex_width)
    return (c + cfg.tex_width // 4) % cfg.tex_width < cfg.tex_width // 2


def _front_colors(rng: np.random.Generator) -> np.ndarray:
    while True:
        c = rng.uniform(0.25, 0.75, size=(2, 3))
        if np.linalg.norm(c[0] - c[1]) >= 0.3:
            return c


def gen_scene(seed: int, label: str | None = None, cfg: SceneConfig | None = None) -> Scene:
    """Deterministic scene for ``seed``; the class is drawn from the seed when
    ``label`` is None."""
    cfg = cfg or SceneConfig()
    if label is None:
        label = CLASSES[int(stream(seed, "class").integers(len(CLASSES)))]
    if label not in CLASSES:
        raise ValueError(f"unknown class {label!r}; expected one of {CLASSES}")

    front_rng = stream(seed, "front")
    colors = _front_colors(front_rng)
    back = int(stream(seed, "back").integers(len(PALETTE)))

    H, W = cfg.size, cfg.tex_width
    half = W // 2
    u = np.arange(half)[None, :]
    r = np.arange(H)[:, None]
    if label == "stripes":
        mix = ((u // (STRIPE_PERIOD // 2)) % 2 == 0).astype(float) * np.ones((H, 1))
    elif label == "checker":
        mix = (((u // CHECKER_CELL) + (r // CHECKER_CELL)) % 2 == 0).astype(float)
    else:
        u0 = front_rng.uniform(3.0, half - 3.0)
        r0 = front_rng.uniform(3.0, H - 3.0)
        mix = np.exp(-((u - u0) ** 2 + (r - r0) ** 2) / (2.0 * BLOB_RADIUS**2))
    front = colors[1] + (colors[0] - colors[1]) * mix[..., None]

    tex = np.empty((H, W, 3))
    tex[:] = PALETTE[back]
    cols = np.flatnonzero(front_mask(cfg))
    # order front columns left-to-right as seen from view 0
    order = np.argsort((cols + W // 4) % W)
    tex[:, cols[order]] = front
    tex += _grain(H, W)[..., None]
    np.clip(tex, 0.0, 1.0, out=tex)
    return Scene(seed, label, back, colors, tex, cfg)


def view_columns(cfg: SceneConfig, n: int) -> np.ndarray:
    """Texture column index read by each image column of view ``n``."""
    return (np.arange(cfg.size) - cfg.size // 2 - n * cfg.w_col) % cfg.tex_width


def shading(cfg: SceneConfig) -> np.ndarray:
    """Per-column factor ``0.5 + 0.5 cos(angle)`` across a view, shape (W,).

    The angle advances by ``180 / W_tex`` degrees per column, so a crop of
    half the strip spans +-45 degrees. A full-arc falloff darkens the limb
    columns enough that SAD block matching locks onto the shading instead
    of the content.
    """
    theta = (np.arange(cfg.size) - (cfg.size - 1) / 2.0) * (np.pi / cfg.tex_width)
    return 0.5 + 0.5 * np.cos(theta)


def render_view(scene: Scene, n: int) -> np.ndarray:
    cfg = scene.config
    if not 0 <= n < cfg.n_views:
        raise IndexError(f"view index {n} outside [0, {cfg.n_views})")
    crop = scene.texture[:, view_columns(cfg, n)]
    return (crop * shading(cfg)[None, :, None]).astype(np.float32)


def render_viewset(scene: Scene) -> ViewSet:
    cfg = scene.config
    return ViewSet(np.stack([render_view(scene, n) for n in range(cfg.n_views)]), cfg.elevation)


def unshade(img: np.ndarray, cfg: SceneConfig | None = None) -> np.ndarray:
    cfg = cfg or SceneConfig(size=img.shape[-2])
    return np.asarray(img, dtype=np.float64) / shading(cfg)[None, :, None]


def back_view_index(cfg: SceneConfig) -> int:
    return cfg.n_views // 2


def nearest_palette(img: np.ndarray, cfg: SceneConfig | None = None) -> int:
    """Palette index closest (RGB L2) to the unshaded mean color of ``img``."""
    mean = unshade(img, cfg).reshape(-1, 3).mean(axis=0)
    return int(np.argmin(np.linalg.norm(PALETTE - mean, axis=1)))


def gt_flow(scene: Scene, n: int) -> FlowField:
    """Analytic flow from view n to view n+1 (mod N)."""
    cfg = scene.config
    if not 0 <= n < cfg.n_views:
        raise IndexError(f"view index {n} outside [0, {cfg.n_views})")
    H = W = cfg.size
    valid = np.zeros((H, W), dtype=bool)
    valid[:, : W - cfg.w_col] = True
    dx = np.where(valid, float(cfg.w_col), 0.0)
    return FlowField(dx, np.zeros((H, W)), valid)


# -- dataset files ---------------------------------------------------------


def scene_seed(dataset_seed: int, index: int) -> int:
    return derive_seed(dataset_seed, "scene", index)


def _write_png(path: Path, img: np.ndarray) -> None:
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(q, mode="RGB").save(path, format="PNG", optimize=False)


def _read_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def make_dataset(count: int, seed: int, out: str | Path, cfg: SceneConfig | None = None) -> Path:
    """Render ``count`` scenes to ``out`` as PNG views plus ``manifest.jsonl``.

    Returns the manifest path.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = cfg or SceneConfig()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        s = scene_seed(seed, i)
        scene = gen_scene(s, None, cfg)
        sid = f"scene_{i:05d}"
        (out / sid).mkdir(exist_ok=True)
        files = []
        for n in range(cfg.n_views):
            name = f"{sid}/view_{n:02d}.png"
            _write_png(out / name, render_view(scene, n))
            files.append(name)
        rec = {
            "scene_id": sid,
            "seed": s,
            "class": scene.label,
            "back_color": PALETTE_NAMES[scene.back_color],
            "files": files,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "dataset.json").write_text(
        json.dumps({"count": count, "seed": seed, "scene": cfg.to_dict()}, sort_keys=True, indent=2) + "\n"
    )
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class Dataset:
    views: np.ndarray  # (S, N, H, W, 3) in [0, 1]
    records: list[dict]
    config: SceneConfig

    def __len__(self) -> int:
        return len(self.records)

    def viewset(self, i: int) -> ViewSet:
        return ViewSet(self.views[i], self.config.elevation)


def load_dataset(path: str | Path, limit: int | None = None) -> Dataset:
    path = Path(path)
    meta_file = path / "dataset.json"
    manifest = path / "manifest.jsonl"
    if not meta_file.exists() or not manifest.exists():
        raise FileNotFoundError(f"no dataset at {path} (need dataset.json and manifest.jsonl)")
    meta = json.loads(meta_file.read_text())
    cfg = SceneConfig(**meta["scene"])
    records = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
    if limit is not None:
        records = records[:limit]
    views = np.stack([np.stack([_read_png(path / f) for f in rec["files"]]) for rec in records])
    return Dataset(views, records, cfg)
