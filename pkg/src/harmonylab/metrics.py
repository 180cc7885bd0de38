"""Evaluation metrics.

Reference-based: PSNR, SSIM and the flow-coherency error E_flow (block
matching stands in for a learned flow network). Reference-free: diversity
D, semantic variance S_Var and their ratio, the CD score.

Embeddings come from an :class:`EncoderSpec`. The bundled toy encoder is a
color histogram plus a coarse grayscale layout; any image-to-vector map
(a CLIP image tower, say) can be dropped in instead.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import ViewSet
from .scenes import FlowField

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
GRAY = np.array([0.299, 0.587, 0.114])
SVAR_FLOOR = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


class DegenerateVarianceError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1], capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ GRAY if img.ndim == 3 else img


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over 8x8 windows at stride 4 on the grayscale images.

    Window statistics use population (1/n) moments; dynamic range is 1.
    """
    a, b = _pair(a, b)
    ga, gb = to_gray(a), to_gray(b)
    H, W = ga.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"image {H}x{W} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    vals = []
    for y in range(0, H - SSIM_WINDOW + 1, SSIM_STRIDE):
        for x in range(0, W - SSIM_WINDOW + 1, SSIM_STRIDE):
            wa = ga[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW]
            wb = gb[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW]
            ma, mb = wa.mean(), wb.mean()
            da, db = wa - ma, wb - mb
            va, vb, cov = (da * da).mean(), (db * db).mean(), (da * db).mean()
            num = (2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)
            den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)
            vals.append(num / den)
    return float(np.mean(vals))


# -- optical flow ------------------------------------------------------------


def _offsets(radius: int) -> list[tuple[int, int]]:
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # visiting order doubles as the tie-break: smallest |dx|+|dy|, then dx, then dy
    offs.sort(key=lambda o: (abs(o[0]) + abs(o[1]), o[0], o[1]))
    return offs


def block_flow(a: np.ndarray, b: np.ndarray, block: int = 4, radius: int = 4) -> FlowField:
    """Exhaustive block matching from ``a`` to ``b`` (sum of absolute differences).

    Blocks tile the image on a ``block`` grid. Candidates that fall outside
    ``b`` are not considered. A block is valid only when its whole search
    window lies inside the image, so every displacement in range was
    actually tested; pixels of invalid blocks carry zero flow.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if block < 1 or block > min(H, W):
        raise ValueError(f"block size {block} incompatible with {H}x{W} image")
    hb, wb = H // block, W // block
    r = radius
    padded = np.full((H + 2 * r, W + 2 * r, a.shape[2]), np.nan)
    padded[r : r + H, r : r + W] = b
    a_crop = a[: hb * block, : wb * block]

    best = np.full((hb, wb), np.inf)
    bdx = np.zeros((hb, wb))
    bdy = np.zeros((hb, wb))
    for dx, dy in _offsets(r):
        shifted = padded[r + dy : r + dy + hb * block, r + dx : r + dx + wb * block]
        sad = np.abs(a_crop - shifted).sum(axis=2)
        sad = sad.reshape(hb, block, wb, block).sum(axis=(1, 3))
        sad = np.where(np.isnan(sad), np.inf, sad)
        better = sad < best
        best[better] = sad[better]
        bdx[better] = dx
        bdy[better] = dy

    oy = np.arange(hb) * block
    ox = np.arange(wb) * block
    bvalid = ((oy - r >= 0) & (oy + block + r <= H))[:, None] & ((ox - r >= 0) & (ox + block + r <= W))[None, :]

    def expand(m):
        full = np.zeros((H, W), dtype=m.dtype)
        full[: hb * block, : wb * block] = np.repeat(np.repeat(m, block, axis=0), block, axis=1)
        return full

    valid = expand(bvalid)
    return FlowField(np.where(valid, expand(bdx), 0.0), np.where(valid, expand(bdy), 0.0), valid)


def _views(vs) -> np.ndarray:
    return vs.views if isinstance(vs, ViewSet) else np.asarray(vs)


def e_flow(gt, gen, block: int = 4, radius: int = 4) -> float:
    """Mean L1 gap between flows of adjacent GT pairs and adjacent generated pairs.

    Pairs are (n, n+1 mod N); the mean is pooled over the valid pixels of
    all pairs.
    """
    g, x = _views(gt), _views(gen)
    if g.shape[0] != x.shape[0]:
        raise ValueError(f"view count mismatch: {g.shape[0]} vs {x.shape[0]}")
    if g.shape != x.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {x.shape}")
    N = g.shape[0]
    total, count = 0.0, 0
    for n in range(N):
        fg = block_flow(g[n], g[(n + 1) % N], block, radius)
        fx = block_flow(x[n], x[(n + 1) % N], block, radius)
        m = fg.valid & fx.valid
        total += float(np.sum(np.abs(fg.dx - fx.dx)[m] + np.abs(fg.dy - fx.dy)[m]))
        count += int(m.sum())
    if count == 0:
        raise ValueError("no valid flow pixels; images too small for the search window")
    return total / count


# -- embeddings and the CD score --------------------------------------------


def toy_features(img: np.ndarray) -> np.ndarray:
    """27-bin joint RGB histogram (3 levels per channel) and 4x4 mean-pooled
    grayscale, concatenated (43 values)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    H, W, _ = img.shape
    if H % 4 or W % 4:
        raise ValueError("toy encoder needs height and width divisible by 4")
    if not np.all(np.isfinite(img)):
        return np.zeros(43)
    q = np.minimum((np.clip(img, 0.0, 1.0) * 3).astype(int), 2)
    idx = (q[..., 0] * 9 + q[..., 1] * 3 + q[..., 2]).ravel()
    hist = np.bincount(idx, minlength=27) / idx.size
    gray = to_gray(img).reshape(4, H // 4, 4, W // 4).mean(axis=(1, 3)).ravel()
    return np.concatenate([hist, gray])


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    features: Callable[[np.ndarray], np.ndarray]
    dim: int


TOY_ENCODER = EncoderSpec("toy-hist-layout", toy_features, 43)


def embed(enc: EncoderSpec, img: np.ndarray) -> np.ndarray:
    f = np.asarray(enc.features(img), dtype=np.float64)
    norm = float(np.linalg.norm(f))
    if not math.isfinite(norm) or norm < 1e-12:
        raise DegenerateEmbeddingError(f"{enc.name}: degenerate feature vector (norm={norm})")
    return f / norm


def class_prototype(enc: EncoderSpec, exemplars: Sequence[np.ndarray]) -> np.ndarray:
    """Normalized mean embedding of the exemplars; stands in for a text embedding."""
    if len(exemplars) == 0:
        raise ValueError("class_prototype needs at least one exemplar")
    m = np.mean([embed(enc, e) for e in exemplars], axis=0)
    n = np.linalg.norm(m)
    if n < 1e-12:
        raise DegenerateEmbeddingError("exemplar embeddings cancel out")
    return m / n


def diversity(enc: EncoderSpec, ref: np.ndarray, views) -> float:
    v = _views(views)
    if len(v) < 1:
        raise ValueError("need at least one view")
    e_ref = embed(enc, ref)
    return float(np.mean([1.0 - float(e_ref @ embed(enc, x)) for x in v]))


@dataclass
class SemanticStats:
    sims: np.ndarray
    mean: float
    var: float


def semantic_stats_from_sims(sims) -> SemanticStats:
    sims = np.asarray(sims, dtype=np.float64)
    m = float(sims.mean())
    return SemanticStats(sims, m, float(np.mean((sims - m) ** 2)))


def semantic_variance(enc: EncoderSpec, prototype: np.ndarray, views) -> SemanticStats:
    v = _views(views)
    if len(v) < 1:
        raise ValueError("need at least one view")
    sims = [float(np.asarray(prototype) @ embed(enc, x)) for x in v]
    return semantic_stats_from_sims(sims)


def cd_score(D: float, stats: SemanticStats) -> float:
    if stats.var < 0:
        raise ValueError("semantic variance cannot be negative")
    if stats.var < SVAR_FLOOR:
        raise DegenerateVarianceError(f"semantic variance {stats.var:.3g} below {SVAR_FLOOR}")
    return D / stats.var


@dataclass
class InstanceCD:
    D: float
    s_mean: float
    s_var: float
    cd: float | None  # None when the instance was excluded


@dataclass
class CDReport:
    cd: float
    instances: list[InstanceCD]
    excluded: int


def cd_report(enc: EncoderSpec, ref: np.ndarray, instances: Sequence, prototype: np.ndarray) -> CDReport:
    """Per-instance CD averaged over the instances with non-degenerate variance."""
    rows = []
    for inst in instances:
        D = diversity(enc, ref, inst)
        st = semantic_variance(enc, prototype, inst)
        try:
            cd = cd_score(D, st)
        except DegenerateVarianceError:
            cd = None
        rows.append(InstanceCD(D, st.mean, st.var, cd))
    good = [r.cd for r in rows if r.cd is not None]
    if not good:
        raise DegenerateVarianceError("every instance has degenerate semantic variance")
    return CDReport(float(np.mean(good)), rows, len(rows) - len(good))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    e_flow: float
    d: float
    s_var: float
    cd: float
    excluded_instances: int
    inputs: int
    instances: int
    config: dict = field(default_factory=dict)
    psnr_mean: float = 0.0  # instance-mean counterparts of the best-instance psnr/ssim
    ssim_mean: float = 0.0

    CSV_COLUMNS = ("psnr", "ssim", "e_flow", "d", "s_var", "cd", "excluded_instances", "psnr_mean", "ssim_mean")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.CSV_COLUMNS), lineterminator="\n")
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()
