"""Four-branch toy noise predictor with hand-written backprop.

Per-view input row::

    x_t^n (D) | time emb (16) | pose emb (4) | ref code (64) | mv code (64) | flags (2)

``ref code = y @ W_r`` and ``mv code = mean_m(x_t^m) @ W_m``. A dropped
condition zeroes its code and its presence flag, so an absent condition is
distinguishable from a present all-zero one. Two SiLU hidden layers feed a
linear output of width D, to which a skip ``g(t) * x_t^n`` is added with a
scalar gain linear in the time embedding. Without the skip the 256-wide
bottleneck cannot pass x_t through, and at high noise the target is x_t
itself. All branches share every parameter; only the mask changes.

Parameters are plain numpy arrays so the same code runs in float32 for
training and float64 for gradient checks.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffusion import NoiseSchedule, forward_diffuse_batch, pose_embedding, to_model_range
from .guidance import BranchOutputs
from .rng import stream

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HVTD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    size: int = 16
    n_views: int = 8
    hidden: int = 256
    layers: int = 2
    ref_dim: int = 64
    mv_dim: int = 64
    time_dim: int = 16
    T: int = 100

    def __post_init__(self):
        if self.size < 1 or self.n_views < 2 or self.hidden < 1 or self.layers < 0:
            raise ValueError(f"inconsistent denoiser config: {self}")
        if self.time_dim % 2 or self.time_dim < 2:
            raise ValueError("time_dim must be a positive even number")
        if self.ref_dim < 1 or self.mv_dim < 1 or self.T < 2:
            raise ValueError(f"inconsistent denoiser config: {self}")

    @property
    def pixels(self) -> int:
        return self.size * self.size * 3

    @property
    def in_dim(self) -> int:
        return self.pixels + self.time_dim + 4 + self.ref_dim + self.mv_dim + 2

    def slices(self) -> dict[str, slice]:
        names = [("x", self.pixels), ("time", self.time_dim), ("pose", 4),
                 ("ref", self.ref_dim), ("mv", self.mv_dim), ("flags", 2)]
        out, at = {}, 0
        for name, width in names:
            out[name] = slice(at, at + width)
            at += width
        return out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D = self.pixels
        shapes = {"W_r": (D, self.ref_dim), "W_m": (D, self.mv_dim)}
        width = self.in_dim
        for i in range(self.layers):
            shapes[f"W{i}"] = (width, self.hidden)
            shapes[f"b{i}"] = (self.hidden,)
            width = self.hidden
        shapes["W_out"] = (width, D)
        shapes["b_out"] = (D,)
        shapes["w_skip"] = (self.time_dim,)
        shapes["b_skip"] = (1,)
        return shapes


@dataclass(frozen=True)
class ConditionMask:
    use_ref: bool = True
    use_mv: bool = True


FULL = ConditionMask(True, True)
MV_ONLY = ConditionMask(False, True)
REF_ONLY = ConditionMask(True, False)
UNCOND = ConditionMask(False, False)


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        expected = self.config.shapes()
        if set(expected) != set(self.arrays):
            raise ValueError(f"parameter names {sorted(self.arrays)} != {sorted(expected)}")
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise ValueError(f"{k}: shape {self.arrays[k].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays["W_out"].dtype

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()}, self.version)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_denoiser(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, identity skip gain;
    one stream per tensor."""
    arrays = {}
    for name, shape in config.shapes().items():
        if name == "b_skip":
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif name.startswith(("b", "w_skip")):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arrays[name] = stream(seed, f"init:{name}").uniform(-bound, bound, size=shape).astype(np.float32)
    return DenoiserParams(config, arrays)


def time_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps -> (..., dim)."""
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2)
    freqs = np.exp(-math.log(1000.0) * k / (dim // 2))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class _Inputs:
    """One batch of rows, already flattened. ``ref`` and ``mv`` may have a
    single row that broadcasts over the batch."""

    x: np.ndarray
    temb: np.ndarray
    pose: np.ndarray
    ref: np.ndarray
    mv: np.ndarray
    use_ref: np.ndarray
    use_mv: np.ndarray


def _forward(p: DenoiserParams, inp: _Inputs, keep: bool = False):
    cfg = p.config
    dt = p.dtype
    B = inp.x.shape[0]
    ur = inp.use_ref.astype(dt)[:, None]
    um = inp.use_mv.astype(dt)[:, None]
    rcode = inp.ref.astype(dt, copy=False) @ p["W_r"]
    mcode = inp.mv.astype(dt, copy=False) @ p["W_m"]
    z = np.concatenate(
        [
            inp.x.astype(dt, copy=False),
            np.broadcast_to(inp.temb.astype(dt, copy=False), (B, cfg.time_dim)),
            np.broadcast_to(inp.pose.astype(dt, copy=False), (B, 4)),
            ur * np.broadcast_to(rcode, (B, cfg.ref_dim)),
            um * np.broadcast_to(mcode, (B, cfg.mv_dim)),
            ur,
            um,
        ],
        axis=1,
    )
    acts = [z]
    pre = []
    h = z
    for i in range(cfg.layers):
        a = h @ p[f"W{i}"] + p[f"b{i}"]
        h = a * _sigmoid(a)
        pre.append(a)
        acts.append(h)
    temb = np.broadcast_to(inp.temb.astype(dt, copy=False), (B, cfg.time_dim))
    gain = temb @ p["w_skip"] + p["b_skip"]
    out = h @ p["W_out"] + p["b_out"] + gain[:, None] * z[:, : cfg.pixels]
    if keep:
        return out, (acts, pre, ur, um)
    return out


def _backward(p: DenoiserParams, inp: _Inputs, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    cfg = p.config
    acts, pre, ur, um = cache
    grads = {}
    dgain = np.sum(dout * acts[0][:, : cfg.pixels], axis=1)
    temb = np.broadcast_to(inp.temb.astype(p.dtype, copy=False), (dout.shape[0], cfg.time_dim))
    grads["w_skip"] = temb.T @ dgain
    grads["b_skip"] = np.array([dgain.sum()], dtype=p.dtype)
    grads["W_out"] = acts[-1].T @ dout
    grads["b_out"] = dout.sum(axis=0)
    dh = dout @ p["W_out"].T
    for i in reversed(range(cfg.layers)):
        a = pre[i]
        s = _sigmoid(a)
        da = dh * (s + a * s * (1.0 - s))
        grads[f"W{i}"] = acts[i].T @ da
        grads[f"b{i}"] = da.sum(axis=0)
        dh = da @ p[f"W{i}"].T
    sl = cfg.slices()
    d_r = dh[:, sl["ref"]] * ur
    d_m = dh[:, sl["mv"]] * um
    ref = np.broadcast_to(inp.ref.astype(p.dtype, copy=False), (dh.shape[0], cfg.pixels))
    mv = np.broadcast_to(inp.mv.astype(p.dtype, copy=False), (dh.shape[0], cfg.pixels))
    grads["W_r"] = ref.T @ d_r
    grads["W_m"] = mv.T @ d_m
    return grads


def _flat_views(p: DenoiserParams, xt_views) -> np.ndarray:
    x = np.asarray(xt_views)
    N = p.config.n_views
    x = x.reshape(x.shape[0], -1)
    if x.shape != (N, p.config.pixels):
        raise ValueError(f"expected {N} views of {p.config.pixels} values, got {x.shape}")
    return x


def _check_nt(p: DenoiserParams, n: int, t: int) -> None:
    if not 0 <= n < p.config.n_views:
        raise IndexError(f"view index {n} outside [0, {p.config.n_views})")
    if not 1 <= t <= p.config.T:
        raise ValueError(f"timestep {t} outside [1, {p.config.T}]")


def _pose_rows(cfg: DenoiserConfig) -> np.ndarray:
    az = np.arange(cfg.n_views) * (360.0 / cfg.n_views)
    return pose_embedding(np.stack([np.zeros_like(az), az], axis=1))


def denoise(p: DenoiserParams, xt_views, n: int, t: int, ref: np.ndarray, mask: ConditionMask) -> np.ndarray:
    """Predicted noise for view ``n`` (flattened, length H*W*3).

    ``xt_views`` are the noisy views in model range, shape (N, H, W, 3) or
    (N, D); ``ref`` is the input image in [0, 1].
    """
    _check_nt(p, n, t)
    x = _flat_views(p, xt_views)
    inp = _Inputs(
        x=x[n : n + 1],
        temb=time_embedding(t, p.config.time_dim)[None],
        pose=_pose_rows(p.config)[n : n + 1],
        ref=to_model_range(ref).reshape(1, -1),
        mv=x.mean(axis=0, keepdims=True),
        use_ref=np.array([mask.use_ref]),
        use_mv=np.array([mask.use_mv]),
    )
    return _forward(p, inp)[0]


def eval_branches(p: DenoiserParams, xt_views, n: int, t: int, ref: np.ndarray) -> BranchOutputs:
    return BranchOutputs(
        eps_full=denoise(p, xt_views, n, t, ref, FULL),
        eps_mv=denoise(p, xt_views, n, t, ref, MV_ONLY),
        eps_ref=denoise(p, xt_views, n, t, ref, REF_ONLY),
        eps_uncond=denoise(p, xt_views, n, t, ref, UNCOND),
    )


def eval_all_branches(p: DenoiserParams, xt_views, t: int, ref: np.ndarray) -> BranchOutputs:
    """All four branches for every view in one batched pass; arrays are (N, D).

    Every branch reads the same ``xt_views`` snapshot.
    """
    cfg = p.config
    if not 1 <= t <= cfg.T:
        raise ValueError(f"timestep {t} outside [1, {cfg.T}]")
    x = _flat_views(p, xt_views)
    N = cfg.n_views
    masks = (FULL, MV_ONLY, REF_ONLY, UNCOND)
    inp = _Inputs(
        x=np.tile(x, (4, 1)),
        temb=time_embedding(t, cfg.time_dim)[None],
        pose=np.tile(_pose_rows(cfg), (4, 1)),
        ref=to_model_range(ref).reshape(1, -1),
        mv=x.mean(axis=0, keepdims=True),
        use_ref=np.repeat([m.use_ref for m in masks], N),
        use_mv=np.repeat([m.use_mv for m in masks], N),
    )
    out = _forward(p, inp)
    return BranchOutputs(out[:N], out[N : 2 * N], out[2 * N : 3 * N], out[3 * N :])


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    p_drop: float = 0.1
    seed: int = 0
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must be in [0, 1)")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class TrainBatch:
    """Items are (scene, target view n, timestep t, noise for all views).

    ``views`` are clean views in model range, (B, N, D); ``refs`` the input
    view per item in model range, (B, D); ``eps`` is (B, N, D).
    """

    views: np.ndarray
    refs: np.ndarray
    n: np.ndarray
    t: np.ndarray
    eps: np.ndarray


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, p: DenoiserParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in p.arrays.items()},
                   {k: np.zeros_like(a) for k, a in p.arrays.items()})


class TrainingDivergedError(FloatingPointError):
    pass


def _batch_inputs(p: DenoiserParams, batch: TrainBatch, sched: NoiseSchedule, use_ref, use_mv) -> tuple[_Inputs, np.ndarray]:
    cfg = p.config
    xt = forward_diffuse_batch(batch.views, batch.t, batch.eps, sched)
    rows = np.arange(len(batch.n))
    inp = _Inputs(
        x=xt[rows, batch.n],
        temb=time_embedding(batch.t, cfg.time_dim),
        pose=_pose_rows(cfg)[batch.n],
        ref=batch.refs,
        mv=xt.mean(axis=1),
        use_ref=np.asarray(use_ref, dtype=bool),
        use_mv=np.asarray(use_mv, dtype=bool),
    )
    return inp, batch.eps[rows, batch.n]


def loss_and_grads(p: DenoiserParams, batch: TrainBatch, sched: NoiseSchedule, use_ref, use_mv):
    """Mean squared noise-prediction error and its gradient for fixed masks."""
    inp, target = _batch_inputs(p, batch, sched, use_ref, use_mv)
    out, cache = _forward(p, inp, keep=True)
    diff = out - target.astype(p.dtype, copy=False)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dout = (2.0 / diff.size) * diff
    return loss, _backward(p, inp, cache, dout)


def draw_masks(rng: np.random.Generator, size: int, p_drop: float) -> tuple[np.ndarray, np.ndarray]:
    """Independent per-row dropout of the reference and multi-view conditions."""
    drop = rng.random((2, size)) < p_drop
    return ~drop[0], ~drop[1]


def train_step(
    p: DenoiserParams,
    batch: TrainBatch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: AdamState,
    sched: NoiseSchedule,
) -> tuple[DenoiserParams, float]:
    """One Adam update; mutates ``p`` and ``opt`` in place."""
    use_ref, use_mv = draw_masks(rng, len(batch.n), cfg.p_drop)
    loss, grads = loss_and_grads(p, batch, sched, use_ref, use_mv)
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at step {opt.step + 1} (t range {batch.t.min()}-{batch.t.max()})"
        )
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for k, g in grads.items():
        m, v = opt.m[k], opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.arrays[k] -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype, copy=False)
    return p, loss


def make_batch(views: np.ndarray, items: np.ndarray, rng: np.random.Generator, T: int) -> TrainBatch:
    """``views``: (S, N, D) clean views in model range; ``items``: (B, 2) of
    (scene, view) indices."""
    scenes, n = items[:, 0], items[:, 1]
    v = views[scenes]
    t = rng.integers(1, T + 1, size=len(items))
    eps = rng.standard_normal(v.shape, dtype=np.float32)
    return TrainBatch(v, v[:, 0], n, t, eps)


def train(
    p: DenoiserParams,
    views01: np.ndarray,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[DenoiserParams, list[float]]:
    """Epoch loop over shuffled (scene, view) pairs.

    ``views01`` is the dataset, (S, N, H, W, 3) in [0, 1]. Returns the
    trained parameters and the per-step loss history.
    """
    S, N = views01.shape[:2]
    if N != p.config.n_views:
        raise ValueError(f"dataset has {N} views, model expects {p.config.n_views}")
    views = to_model_range(views01).reshape(S, N, -1)
    pairs = np.stack(np.meshgrid(np.arange(S), np.arange(N), indexing="ij"), axis=-1).reshape(-1, 2)
    opt = AdamState.zeros_like(p)
    losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(pairs))
        for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return p, losses
            items = pairs[order[start : start + cfg.batch_size]]
            batch = make_batch(views, items, stream(cfg.seed, "batch", step), sched.T)
            p, loss = train_step(p, batch, cfg, stream(cfg.seed, "dropout", step), opt, sched)
            losses.append(loss)
            step += 1
            if on_step is not None:
                on_step(step, loss)
    return p, losses


# -- gradient check -----------------------------------------------------------


@dataclass
class GradProbe:
    batch: TrainBatch
    use_ref: np.ndarray
    use_mv: np.ndarray


def make_probe(config: DenoiserConfig, sched: NoiseSchedule, batch_size: int = 4, seed: int = 0) -> GradProbe:
    rng = stream(seed, "grad-probe")
    N, D = config.n_views, config.pixels
    views = rng.uniform(-1, 1, size=(batch_size, N, D))
    batch = TrainBatch(
        views=views,
        refs=views[:, 0].copy(),
        n=rng.integers(0, N, size=batch_size),
        t=rng.integers(1, sched.T + 1, size=batch_size),
        eps=rng.standard_normal((batch_size, N, D)),
    )
    # cover all four branch states
    use_ref = np.array([True, False, True, False] * ((batch_size + 3) // 4))[:batch_size]
    use_mv = np.array([True, True, False, False] * ((batch_size + 3) // 4))[:batch_size]
    return GradProbe(batch, use_ref, use_mv)


def _probe_outputs(p: DenoiserParams, probe: GradProbe, sched: NoiseSchedule):
    inp, target = _batch_inputs(p, probe.batch, sched, probe.use_ref, probe.use_mv)
    return _forward(p, inp), target


def grad_check(
    p: DenoiserParams,
    probe: GradProbe,
    sched: NoiseSchedule,
    n_coords: int = 256,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a random subset of ``n_coords`` coordinates. The
    loss difference ``L(+h) - L(-h)`` is evaluated as
    ``mean((o+ - o-) * (o+ + o- - 2 y))``, which equals the plain difference
    of the two means but does not cancel catastrophically. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    p64 = p.astype(np.float64)
    _, grads = loss_and_grads(p64, probe.batch, sched, probe.use_ref, probe.use_mv)
    names = sorted(p64.arrays)
    sizes = np.array([p64[k].size for k in names])
    rng = stream(seed, "grad-coords")
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for f in flat:
        i = int(np.searchsorted(bounds, f, side="right"))
        k = names[i]
        j = int(f - (bounds[i - 1] if i else 0))
        arr = p64.arrays[k].reshape(-1)
        orig = arr[j]
        arr[j] = orig + h
        op, y = _probe_outputs(p64, probe, sched)
        arr[j] = orig - h
        om, _ = _probe_outputs(p64, probe, sched)
        arr[j] = orig
        num = float(np.mean((op - om) * (op + om - 2.0 * y))) / (2.0 * h)
        ana = float(grads[k].reshape(-1)[j])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


# -- checkpoint ---------------------------------------------------------------
#
# Layout (little-endian):
#   magic "HVTD" | u32 version | u32 len | config JSON (utf-8) | u32 block count
#   per block: u32 name len | name | u32 ndim | u32 dims... | float32 data


def save_checkpoint(p: DenoiserParams, path: str | Path) -> None:
    cfg_json = json.dumps(asdict(p.config), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", p.version, len(cfg_json)), cfg_json]
    names = sorted(p.arrays)
    parts.append(struct.pack("<I", len(names)))
    for k in names:
        a = np.ascontiguousarray(p.arrays[k], dtype="<f4")
        kb = k.encode("utf-8")
        parts.append(struct.pack("<I", len(kb)) + kb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> DenoiserParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    version, clen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    at = 12
    config = DenoiserConfig(**json.loads(data[at : at + clen].decode("utf-8")))
    at += clen
    (count,) = struct.unpack_from("<I", data, at)
    at += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, at)
        at += 4
        name = data[at : at + nlen].decode("utf-8")
        at += nlen
        (ndim,) = struct.unpack_from("<I", data, at)
        at += 4
        shape = struct.unpack_from(f"<{ndim}I", data, at)
        at += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=at).reshape(shape).astype(np.float32)
        at += 4 * size
    return DenoiserParams(config, arrays, version)
