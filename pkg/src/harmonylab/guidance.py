"""Guidance algebra over the four denoiser branches.

The baseline extrapolates the fully-conditioned prediction away from the
unconditional one with a single scale. The decomposed form splits that
push in two: ``s1`` scales the gap to the multi-view-only branch (what the
input view adds, i.e. consistency with it) and ``s2`` scales the gap to the
reference-only branch (what the other noisy views add, i.e. diversity and
cross-view agreement).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODES = ("none", "baseline", "harmony")


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "harmony"
    s: float | None = 1.0
    s1: float | None = 2.0
    s2: float | None = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "baseline" and self.s is None:
            raise ValueError("baseline guidance requires s")
        if self.mode == "harmony" and (self.s1 is None or self.s2 is None):
            raise ValueError("harmony guidance requires s1 and s2")
        for name in ("s", "s1", "s2"):
            v = getattr(self, name)
            if v is None:
                continue
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"guidance scale {name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "s": self.s, "s1": self.s1, "s2": self.s2}


@dataclass(frozen=True)
class BranchOutputs:
    """Predicted noise under each conditioning state.

    eps_full:   reference view and multi-view context
    eps_mv:     multi-view context only
    eps_ref:    reference view only
    eps_uncond: neither
    """

    eps_full: np.ndarray
    eps_mv: np.ndarray
    eps_ref: np.ndarray
    eps_uncond: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.eps_full, self.eps_mv, self.eps_ref, self.eps_uncond)}
        if len(shapes) != 1:
            raise ValueError(f"branch shapes differ: {sorted(shapes)}")


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _finite_scale(*scales):
    for s in scales:
        if not math.isfinite(s):
            raise ValueError(f"guidance scale must be finite, got {s}")


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """Joint classifier-free guidance: ``eps_cond + s * (eps_cond - eps_uncond)``."""
    _same_shape(eps_cond, eps_uncond)
    _finite_scale(s)
    eps_cond = np.asarray(eps_cond)
    return eps_cond + s * (eps_cond - np.asarray(eps_uncond))


def harmony_combine(b: BranchOutputs, s1: float, s2: float) -> np.ndarray:
    """Decomposed guidance.

    ``eps_full + s1 * (eps_full - eps_mv) + s2 * (eps_full - eps_ref)``
    """
    _finite_scale(s1, s2)
    full = np.asarray(b.eps_full)
    return full + s1 * (full - np.asarray(b.eps_mv)) + s2 * (full - np.asarray(b.eps_ref))


def implicit_score_ref(b: BranchOutputs, sigma_t: float) -> np.ndarray:
    """Score of the implicit classifier p(ref | x_t^n, x_t^{1:N})."""
    if not sigma_t > 0:
        raise ValueError(f"sigma_t must be positive, got {sigma_t}")
    return -(np.asarray(b.eps_full) - np.asarray(b.eps_mv)) / sigma_t


def implicit_score_mv(b: BranchOutputs, sigma_t: float) -> np.ndarray:
    """Score of the implicit classifier p(x_t^{1:N} | x_t^n, ref)."""
    if not sigma_t > 0:
        raise ValueError(f"sigma_t must be positive, got {sigma_t}")
    return -(np.asarray(b.eps_full) - np.asarray(b.eps_ref)) / sigma_t


def score_form(b: BranchOutputs, s1: float, s2: float, sigma_t: float) -> np.ndarray:
    """The decomposed guidance written through the implicit-classifier scores.

    Algebraically identical to :func:`harmony_combine`; kept as a separate
    route so the two can be checked against each other.
    """
    return (
        np.asarray(b.eps_full)
        - s1 * sigma_t * implicit_score_ref(b, sigma_t)
        - s2 * sigma_t * implicit_score_mv(b, sigma_t)
    )


def combine(cfg: GuidanceConfig, b: BranchOutputs) -> np.ndarray:
    if cfg.mode == "none":
        return np.asarray(b.eps_full)
    if cfg.mode == "baseline":
        return cfg_combine(b.eps_full, b.eps_uncond, cfg.s)
    return harmony_combine(b, cfg.s1, cfg.s2)
