"""Noise schedule, forward noising, epsilon loss and the deterministic DDIM step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance-preserving schedule.

    ``beta[t-1]`` is the noise rate of step ``t`` (1-based), while
    ``alpha_bar`` and ``sigma`` are indexed directly by ``t`` in ``[0, T]``
    with ``alpha_bar[0] == 1``.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check(self) -> None:
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if not (ab[-1] > 0):
            raise ScheduleError("alpha_bar must stay positive")


def make_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule; products are accumulated in float64."""
    if not (isinstance(T, (int, np.integer)) and 2 <= T <= 10000):
        raise ScheduleError(f"T must be an integer in [2, 10000], got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    sigma = np.sqrt(1.0 - alpha_bar)
    sched = NoiseSchedule(int(T), beta, alpha_bar, sigma)
    sched.check()
    return sched


def _check_t(t: int, sched: NoiseSchedule, lo: int = 0) -> None:
    if not (lo <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Sample of q(x_t | x_0) for a given noise draw."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    _check_t(t, sched)
    a = sched.alpha_bar[t]
    dtype = np.result_type(x0.dtype, eps.dtype, np.float32)
    return (np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps).astype(dtype, copy=False)


def forward_diffuse_batch(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Per-item timesteps along axis 0; used by the trainer."""
    t = np.asarray(t)
    if x0.shape != eps.shape or t.shape != (x0.shape[0],):
        raise ValueError("shape mismatch in forward_diffuse_batch")
    if t.min() < 0 or t.max() > sched.T:
        raise ValueError("timestep out of range")
    shape = (-1,) + (1,) * (x0.ndim - 1)
    a = sched.alpha_bar[t].reshape(shape)
    dt = x0.dtype
    return np.sqrt(a).astype(dt) * x0 + np.sqrt(1.0 - a).astype(dt) * eps.astype(dt, copy=False)


def simple_loss(eps_true: np.ndarray, eps_pred: np.ndarray) -> float:
    """Mean squared error over every element."""
    eps_true = np.asarray(eps_true)
    eps_pred = np.asarray(eps_pred)
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {eps_true.shape} vs {eps_pred.shape}")
    d = eps_true.astype(np.float64) - eps_pred.astype(np.float64)
    return float(np.mean(d * d))


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert the forward marginal. The result is not clamped; use
    :func:`clamp_x0` for a bounded copy."""
    if t < 1:
        raise ValueError("predict_x0 needs t >= 1")
    _check_t(t, sched)
    a = sched.alpha_bar[t]
    out = (np.asarray(x_t) - np.sqrt(1.0 - a) * np.asarray(eps_hat)) / np.sqrt(a)
    return out.astype(np.result_type(np.asarray(x_t).dtype, np.float32), copy=False)


def clamp_x0(x0: np.ndarray) -> np.ndarray:
    return np.clip(x0, -1.0, 1.0)


def ddim_step(
    x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if not (0 <= t_prev < t <= sched.T):
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(x_t, eps_hat, t, sched)
    a_prev = sched.alpha_bar[t_prev]
    out = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * np.asarray(eps_hat)
    return out.astype(x0.dtype, copy=False)


def ddim_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """Uniform-stride ``(t, t_prev)`` pairs from ``T`` down to 0."""
    if not (1 <= steps <= T):
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [(int(a), int(b)) for a, b in zip(grid[:-1], grid[1:])]


def to_model_range(img: np.ndarray) -> np.ndarray:
    return (2.0 * np.asarray(img, dtype=np.float32) - 1.0).astype(np.float32)


def to_image_range(x: np.ndarray) -> np.ndarray:
    return ((np.asarray(x, dtype=np.float32) + 1.0) * 0.5).astype(np.float32)


@dataclass
class ViewSet:
    """N images at evenly spaced azimuths around the object, values in [0, 1].

    ``views`` has shape (N, H, W, 3). ``deltas[n]`` is the (elevation,
    azimuth) offset of view n from view 0, in degrees.
    """

    views: np.ndarray
    elevation: float = 30.0

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float32)
        if self.views.ndim != 4 or self.views.shape[-1] != 3:
            raise ValueError(f"views must be (N, H, W, 3), got {self.views.shape}")
        if self.views.shape[0] < 2:
            raise ValueError("a viewset needs at least two views")
        if not np.all(np.isfinite(self.views)):
            raise ValueError("viewset contains non-finite values")

    def __len__(self) -> int:
        return self.views.shape[0]

    @property
    def azimuths(self) -> np.ndarray:
        n = len(self)
        return np.arange(n, dtype=np.float64) * (360.0 / n)

    @property
    def deltas(self) -> np.ndarray:
        az = self.azimuths
        return np.stack([np.zeros_like(az), az - az[0]], axis=1)


def pose_embedding(deltas: np.ndarray) -> np.ndarray:
    """sin/cos of (elevation delta, azimuth delta) -> (..., 4)."""
    r = np.deg2rad(np.asarray(deltas, dtype=np.float64))
    return np.stack([np.sin(r[..., 0]), np.cos(r[..., 0]), np.sin(r[..., 1]), np.cos(r[..., 1])], axis=-1)
