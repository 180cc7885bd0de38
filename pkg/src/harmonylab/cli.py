"""Command line entry point: ``harmonylab {gen-data,train,sample,eval,sweep}``.

Every subcommand writes the configuration it actually ran with next to its
outputs, so a run can be repeated from that file alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, TrainConfig, init_denoiser, load_checkpoint, save_checkpoint, train
from .diffusion import make_schedule
from .guidance import GuidanceConfig
from .harness import RunConfig, SweepGrid, REFERENCE_BASELINE_GRID, REFERENCE_HARMONY_GRID, run_eval, instance_seed, run_sweep, sample_viewset
from .scenes import SceneConfig, _read_png, _write_png, load_dataset, make_dataset

log = logging.getLogger("harmonylab")


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _guidance_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("guidance")
    g.add_argument("--mode", choices=("none", "baseline", "harmony"), default="harmony")
    g.add_argument("--s", type=float, default=1.0, help="baseline scale (default 1)")
    g.add_argument("--s1", type=float, default=2.0, help="reference-view scale (default 2)")
    g.add_argument("--s2", type=float, default=1.0, help="multi-view scale (default 1)")


def _guidance(a) -> GuidanceConfig:
    return GuidanceConfig(a.mode, s=a.s, s1=a.s1, s2=a.s2)


def _run_args(p: argparse.ArgumentParser, need_dataset: bool = True) -> None:
    if need_dataset:
        p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default="", help="trained model (not needed with --generator gt)")
    p.add_argument("--steps", type=int, default=50, help="DDIM steps")
    p.add_argument("--instances", type=int, default=4, help="instances per input")
    p.add_argument("--inputs", type=int, default=20, help="number of dataset inputs to evaluate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--run-id", default="")
    p.add_argument("--save-images", action="store_true")
    p.add_argument("--generator", choices=("model", "gt"), default="model")


def _run_config(a, guidance: GuidanceConfig) -> RunConfig:
    return RunConfig(
        dataset=a.dataset,
        checkpoint=a.checkpoint,
        guidance=guidance,
        steps=a.steps,
        instances=a.instances,
        inputs=a.inputs,
        seed=a.seed,
        out=a.out,
        run_id=a.run_id,
        save_images=a.save_images,
        generator=a.generator,
    )


def _require_checkpoint(path: str) -> None:
    if not path:
        raise FileNotFoundError("a checkpoint is required (--checkpoint)")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(a) -> int:
    cfg = SceneConfig(n_views=a.n_views, size=a.size, w_col=a.w_col, elevation=a.elevation)
    manifest = make_dataset(a.count, a.seed, a.out, cfg)
    print(manifest)
    return 0


def cmd_train(a) -> int:
    ds = load_dataset(a.dataset, limit=a.limit)
    mcfg = DenoiserConfig(
        size=ds.config.size, n_views=ds.config.n_views, hidden=a.hidden, layers=a.layers, T=a.T
    )
    tcfg = TrainConfig(
        epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, p_drop=a.p_drop, seed=a.seed, max_steps=a.max_steps
    )
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(a.log) if a.log else out.with_suffix(".log.jsonl")
    _dump(
        out.with_suffix(".config.json"),
        {"dataset": a.dataset, "scenes": len(ds), "model": asdict(mcfg), "train": asdict(tcfg), "log": str(log_path)},
    )
    params = init_denoiser(mcfg, a.seed)
    t0 = time.time()
    with open(log_path, "w") as fh:

        def on_step(step, loss):
            fh.write(json.dumps({"step": step, "loss": loss, "seed": a.seed}) + "\n")
            if step % 500 == 0:
                log.info("step %d loss %.5f (%.0fs)", step, loss, time.time() - t0)

        params, losses = train(params, ds.views, tcfg, make_schedule(mcfg.T), on_step)
    save_checkpoint(params, out)
    print(f"{out}: {len(losses)} steps, final loss {np.mean(losses[-50:]):.5f}")
    return 0


def cmd_sample(a) -> int:
    _require_checkpoint(a.checkpoint)
    params = load_checkpoint(a.checkpoint)
    if a.ref:
        ref = _read_png(Path(a.ref))
        src = {"ref": a.ref}
        elevation = 30.0
    else:
        ds = load_dataset(a.dataset, limit=a.index + 1)
        ref = ds.views[a.index][0]
        src = {"dataset": a.dataset, "index": a.index}
        elevation = ds.config.elevation
    g = _guidance(a)
    run_id = a.run_id or f"sample-seed{a.seed}"
    out = Path(a.out) / run_id
    _dump(
        out / "config.json",
        {"checkpoint": a.checkpoint, "guidance": g.to_dict(), "steps": a.steps, "instances": a.instances,
         "seed": a.seed, **src},
    )
    for k in range(a.instances):
        vs = sample_viewset(params, ref, g, a.steps, instance_seed(a.seed, "sample", k), elevation=elevation)
        d = out / f"{k}"
        d.mkdir(parents=True, exist_ok=True)
        for n, img in enumerate(vs.views):
            _write_png(d / f"{n:02d}.png", img)
    print(out)
    return 0


def cmd_eval(a) -> int:
    if a.generator == "model":
        _require_checkpoint(a.checkpoint)
    cfg = _run_config(a, _guidance(a))
    res = run_eval(cfg)
    print(res.report.to_json(), end="")
    return 0


def _pairs(text: str) -> tuple[float, float]:
    try:
        s1, s2 = text.split(":")
        return float(s1), float(s2)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected S1:S2, got {text!r}") from e


def cmd_sweep(a) -> int:
    if a.generator == "model":
        _require_checkpoint(a.checkpoint)
    harmony = tuple(dict.fromkeys(a.harmony if a.harmony is not None else REFERENCE_HARMONY_GRID))
    baseline = tuple(a.baseline if a.baseline is not None else REFERENCE_BASELINE_GRID)
    grid = SweepGrid(baseline=baseline, harmony=harmony, seeds=tuple(a.seeds))
    cfg = _run_config(a, GuidanceConfig())
    res = run_sweep(grid, cfg)
    print(res.to_csv("summary"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harmonylab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a toy multi-view dataset")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-views", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--w-col", type=int, default=4)
    p.add_argument("--elevation", type=float, default=30.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the four-branch denoiser")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--limit", type=int, default=None, help="use only the first N scenes")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--p-drop", type=float, default=TrainConfig.p_drop)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=DenoiserConfig.hidden)
    p.add_argument("--layers", type=int, default=DenoiserConfig.layers)
    p.add_argument("--T", type=int, default=DenoiserConfig.T)
    p.add_argument("--log", default="", help="JSONL training log (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample viewsets from one reference image")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ref", help="reference PNG")
    src.add_argument("--dataset", help="take view 0 of a dataset scene as the reference")
    p.add_argument("--index", type=int, default=0, help="scene index with --dataset")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--instances", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--run-id", default="")
    _guidance_args(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="sample and score against ground truth")
    _run_args(p)
    _guidance_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="guidance-scale sweep (default: the reference grid)")
    _run_args(p)
    p.add_argument("--harmony", type=_pairs, nargs="*", default=None, metavar="S1:S2")
    p.add_argument("--baseline", type=float, nargs="*", default=None, metavar="S")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.func(a)
    except (FileNotFoundError, ValueError) as e:
        print(f"harmonylab {a.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
