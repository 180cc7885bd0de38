"""Sampling orchestration, evaluation and guidance-scale sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from .denoiser import DenoiserParams, eval_all_branches, load_checkpoint
from .diffusion import NoiseSchedule, ViewSet, ddim_step, ddim_timesteps, make_schedule, to_image_range
from .guidance import GuidanceConfig, combine
from .rng import derive_seed, stream
from .scenes import CLASSES, Dataset, SceneConfig, gen_scene, load_dataset, render_view, scene_seed, _write_png

log = logging.getLogger(__name__)


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    checkpoint: str = ""
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    steps: int = 50
    instances: int = 4
    inputs: int = 20
    seed: int = 0
    out: str = "out"
    run_id: str = ""
    save_images: bool = False
    generator: str = "model"  # "model" or "gt" (identity evaluation)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.instances < 1:
            raise ValueError("instances must be >= 1")
        if self.inputs < 1:
            raise ValueError("inputs must be >= 1")
        if self.generator not in ("model", "gt"):
            raise ValueError(f"unknown generator {self.generator!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance"] = self.guidance.to_dict()
        return d

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        g = self.guidance
        tag = {"none": "none", "baseline": f"base-s{g.s:g}", "harmony": f"harm-s1{g.s1:g}-s2{g.s2:g}"}[g.mode]
        return f"{tag}-seed{self.seed}"


def schedule_for(params: DenoiserParams) -> NoiseSchedule:
    return make_schedule(params.config.T)


def initial_noise(params: DenoiserParams, seed: int) -> np.ndarray:
    cfg = params.config
    return stream(seed, "x_T").standard_normal((cfg.n_views, cfg.pixels), dtype=np.float32)


def sample_viewset(
    params: DenoiserParams,
    ref: np.ndarray,
    guidance: GuidanceConfig,
    steps: int,
    seed: int,
    sched: NoiseSchedule | None = None,
    elevation: float = 30.0,
) -> ViewSet:
    """Jointly denoise all N views from the noise stream of ``seed``.

    At every DDIM step the four branches of every view are evaluated on the
    same snapshot of x_t, combined under ``guidance`` and all views are
    stepped together. Returns the t=0 views mapped to [0, 1] and clamped.
    """
    sched = sched or schedule_for(params)
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must be in [1, {sched.T}]")
    cfg = params.config
    x = initial_noise(params, seed)
    for t, t_prev in ddim_timesteps(sched.T, steps):
        branches = eval_all_branches(params, x, t, ref)
        eps_hat = combine(guidance, branches)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite values after step t={t}->{t_prev} (seed {seed})")
    img = np.clip(to_image_range(x), 0.0, 1.0).reshape(cfg.n_views, cfg.size, cfg.size, 3)
    return ViewSet(img, elevation)


def instance_seed(run_seed: int, input_id: str, instance: int) -> int:
    return derive_seed(run_seed, input_id, instance)


# -- class prototypes (text-embedding stand-in) --------------------------------

PROTOTYPE_SEED = 7919
PROTOTYPE_EXEMPLARS = 32


@lru_cache(maxsize=16)
def _prototypes_cached(enc_name: str, cfg: SceneConfig, per_class: int, seed: int):
    enc = _ENCODERS[enc_name]
    out = {}
    for label in CLASSES:
        views = []
        for i in range(per_class):
            sc = gen_scene(derive_seed(seed, "prototype", label, i), label, cfg)
            views.extend(render_view(sc, n) for n in range(cfg.n_views))
        out[label] = M.class_prototype(enc, views)
    return out


_ENCODERS = {M.TOY_ENCODER.name: M.TOY_ENCODER}


def class_prototypes(
    enc: M.EncoderSpec = M.TOY_ENCODER,
    cfg: SceneConfig | None = None,
    per_class: int = PROTOTYPE_EXEMPLARS,
    seed: int = PROTOTYPE_SEED,
) -> dict[str, np.ndarray]:
    """Prototype embedding per class from freshly rendered exemplar objects
    (every view of ``per_class`` objects)."""
    _ENCODERS.setdefault(enc.name, enc)
    return _prototypes_cached(enc.name, cfg or SceneConfig(), per_class, seed)


# -- evaluation ----------------------------------------------------------------


@dataclass
class InstanceResult:
    input_id: str
    instance: int
    seed: int
    psnr: float
    ssim: float
    e_flow: float
    d: float
    s_mean: float
    s_var: float
    cd: float | None
    view_psnr: list[float]


@dataclass
class EvalResult:
    report: M.MetricReport
    instances: list[InstanceResult]
    viewsets: dict[tuple[str, int], ViewSet] = field(default_factory=dict, repr=False)


def _evaluate_input(
    gt: ViewSet,
    record: dict,
    instances: Sequence[ViewSet],
    seeds: Sequence[int],
    prototypes: dict,
    enc: M.EncoderSpec,
):
    ref = gt.views[0]
    rows = []
    for k, (vs, sd) in enumerate(zip(instances, seeds)):
        vp = [M.psnr(g, x) for g, x in zip(gt.views, vs.views)]
        vss = [M.ssim(g, x) for g, x in zip(gt.views, vs.views)]
        rows.append(
            InstanceResult(
                record["scene_id"], k, sd, float(np.mean(vp)), float(np.mean(vss)), M.e_flow(gt, vs),
                0.0, 0.0, 0.0, None, vp,
            )
        )
    cdr = M.cd_report(enc, ref, instances, prototypes[record["class"]])
    for row, ic in zip(rows, cdr.instances):
        row.d, row.s_mean, row.s_var, row.cd = ic.D, ic.s_mean, ic.s_var, ic.cd
    best = max(rows, key=lambda r: r.psnr)
    summary = {
        "psnr": best.psnr,
        "ssim": best.ssim,
        "e_flow": float(np.mean([r.e_flow for r in rows])),
        "d": float(np.mean([r.d for r in rows])),
        "s_var": float(np.mean([r.s_var for r in rows])),
        "cd": cdr.cd,
        "excluded": cdr.excluded,
        "psnr_mean": float(np.mean([r.psnr for r in rows])),
        "ssim_mean": float(np.mean([r.ssim for r in rows])),
    }
    return summary, rows


def run_eval(
    cfg: RunConfig,
    params: DenoiserParams | None = None,
    dataset: Dataset | None = None,
    enc: M.EncoderSpec = M.TOY_ENCODER,
    write: bool = True,
    keep_viewsets: bool = False,
) -> EvalResult:
    """Sample ``cfg.instances`` viewsets per input and score them.

    PSNR/SSIM come from the best-matched instance (highest mean PSNR over
    views); E_flow, D and S_Var are instance means; CD is the mean of
    per-instance CD over non-degenerate instances. Inputs are then averaged.
    Writes report.json, report.csv, instances.csv and config.json under
    ``out/<run-id>/`` when ``write`` is set.
    """
    if dataset is None:
        if not cfg.dataset:
            raise ValueError("run_eval needs a dataset path")
        dataset = load_dataset(cfg.dataset, limit=cfg.inputs)
    if cfg.generator == "model" and params is None:
        if not cfg.checkpoint or not Path(cfg.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint!r}")
        params = load_checkpoint(cfg.checkpoint)
    n_inputs = min(cfg.inputs, len(dataset))
    sched = schedule_for(params) if params is not None else None
    prototypes = class_prototypes(enc, dataset.config)

    summaries, all_rows, kept = [], [], {}
    for i in range(n_inputs):
        rec = dataset.records[i]
        gt = dataset.viewset(i)
        seeds = [instance_seed(cfg.seed, rec["scene_id"], k) for k in range(cfg.instances)]
        if cfg.generator == "gt":
            insts = [gt for _ in seeds]
        else:
            insts = [
                sample_viewset(params, gt.views[0], cfg.guidance, cfg.steps, sd, sched, dataset.config.elevation)
                for sd in seeds
            ]
        summary, rows = _evaluate_input(gt, rec, insts, seeds, prototypes, enc)
        summaries.append(summary)
        all_rows.extend(rows)
        if keep_viewsets or (write and cfg.save_images):
            for k, vs in enumerate(insts):
                kept[(rec["scene_id"], k)] = vs

    report = M.MetricReport(
        psnr=float(np.mean([s["psnr"] for s in summaries])),
        ssim=float(np.mean([s["ssim"] for s in summaries])),
        e_flow=float(np.mean([s["e_flow"] for s in summaries])),
        d=float(np.mean([s["d"] for s in summaries])),
        s_var=float(np.mean([s["s_var"] for s in summaries])),
        cd=float(np.mean([s["cd"] for s in summaries])),
        excluded_instances=int(sum(s["excluded"] for s in summaries)),
        inputs=n_inputs,
        instances=cfg.instances,
        config=cfg.to_dict(),
        psnr_mean=float(np.mean([s["psnr_mean"] for s in summaries])),
        ssim_mean=float(np.mean([s["ssim_mean"] for s in summaries])),
    )
    result = EvalResult(report, all_rows, kept if keep_viewsets else {})
    if write:
        _write_eval(cfg, result, kept)
    return result


def instances_csv(rows: Sequence[InstanceResult]) -> str:
    buf = io.StringIO()
    cols = ["input_id", "instance", "seed", "psnr", "ssim", "e_flow", "d", "s_mean", "s_var", "cd"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in sorted(rows, key=lambda r: (r.input_id, r.instance)):
        w.writerow([getattr(r, c) if getattr(r, c) is not None else "" for c in cols])
    return buf.getvalue()


def _write_eval(cfg: RunConfig, result: EvalResult, viewsets: dict) -> Path:
    out = Path(cfg.out) / cfg.resolved_run_id()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    (out / "report.json").write_text(result.report.to_json())
    (out / "report.csv").write_text(result.report.to_csv())
    (out / "instances.csv").write_text(instances_csv(result.instances))
    for (input_id, k), vs in sorted(viewsets.items()):
        d = out / input_id / f"{k}"
        d.mkdir(parents=True, exist_ok=True)
        for n, img in enumerate(vs.views):
            _write_png(d / f"{n:02d}.png", img)
    return out


# -- sweeps --------------------------------------------------------------------

REFERENCE_HARMONY_GRID = (
    [(s1, 1.0) for s1 in (0.0, 1.0, 2.0, 3.0)]
    + [(2.0, s2) for s2 in (0.0, 0.6, 0.8, 1.0, 1.2)]
)
REFERENCE_BASELINE_GRID = (0.5, 1.0, 1.5)


@dataclass(frozen=True)
class SweepGrid:
    baseline: tuple[float, ...] = ()
    harmony: tuple[tuple[float, float], ...] = tuple(dict.fromkeys(REFERENCE_HARMONY_GRID))
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not (self.baseline or self.harmony):
            raise ValueError("sweep grid has no points")
        if not self.seeds:
            raise ValueError("sweep grid needs at least one seed")

    def points(self) -> list[GuidanceConfig]:
        pts = [GuidanceConfig("baseline", s=s, s1=None, s2=None) for s in self.baseline]
        pts += [GuidanceConfig("harmony", s=None, s1=s1, s2=s2) for s1, s2 in self.harmony]
        return pts


SWEEP_METRICS = ("psnr", "ssim", "e_flow", "d", "s_var", "cd", "excluded_instances", "psnr_mean", "ssim_mean")


@dataclass
class SweepResult:
    rows: list[dict]
    summary: list[dict]

    def to_csv(self, which: str = "rows") -> str:
        data = self.rows if which == "rows" else self.summary
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(data[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(data)
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else v


def run_sweep(
    grid: SweepGrid,
    cfg: RunConfig,
    params: DenoiserParams | None = None,
    dataset: Dataset | None = None,
    write: bool = True,
) -> SweepResult:
    """One evaluation per (grid point, seed), plus a seed-averaged summary.

    Summary metrics use the best-instance PSNR/SSIM convention of
    :func:`run_eval`.
    """
    if dataset is None:
        dataset = load_dataset(cfg.dataset, limit=cfg.inputs)
    if params is None and cfg.generator == "model":
        if not cfg.checkpoint or not Path(cfg.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint!r}")
        params = load_checkpoint(cfg.checkpoint)
    rows = []
    for g in grid.points():
        for seed in grid.seeds:
            rc = replace(cfg, guidance=g, seed=seed, run_id="")
            res = run_eval(rc, params, dataset, write=False)
            row = {"mode": g.mode, "s": _fmt(g.s), "s1": _fmt(g.s1), "s2": _fmt(g.s2), "seed": seed}
            row.update({k: getattr(res.report, k) for k in SWEEP_METRICS})
            rows.append(row)
    summary = []
    for g in grid.points():
        sel = [r for r in rows if (r["mode"], r["s"], r["s1"], r["s2"]) == (g.mode, _fmt(g.s), _fmt(g.s1), _fmt(g.s2))]
        s = {"mode": g.mode, "s": _fmt(g.s), "s1": _fmt(g.s1), "s2": _fmt(g.s2), "seeds": len(sel)}
        s.update({k: float(np.mean([r[k] for r in sel])) for k in SWEEP_METRICS})
        summary.append(s)
    result = SweepResult(rows, summary)
    if write:
        out = Path(cfg.out) / (cfg.run_id or "sweep")
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps({"run": cfg.to_dict(), "grid": asdict(grid)}, sort_keys=True, indent=2) + "\n"
        )
        (out / "sweep.csv").write_text(result.to_csv("rows"))
        (out / "summary.csv").write_text(result.to_csv("summary"))
    return result
