import json

import pytest

from harmonylab.cli import build_parser, main

SUBCOMMANDS = ("gen-data", "train", "sample", "eval", "sweep")


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_top_level_help():
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--dataset", "x", "--frobnicate"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_missing_checkpoint_nonzero(tmp_path, capsys):
    rc = main(["eval", "--dataset", str(tmp_path), "--checkpoint", str(tmp_path / "missing.ckpt")])
    assert rc != 0
    assert "checkpoint not found" in capsys.readouterr().err
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.ckpt"), "--ref", "x.png"]) != 0


def test_sample_defaults_are_reference_settings():
    a = build_parser().parse_args(["sample", "--checkpoint", "m", "--ref", "r.png"])
    assert (a.mode, a.s, a.s1, a.s2, a.steps, a.instances) == ("harmony", 1.0, 2.0, 1.0, 50, 4)
    a = build_parser().parse_args(["sample", "--checkpoint", "m", "--ref", "r.png", "--s1", "2", "--s2", "1"])
    assert (a.s1, a.s2) == (2.0, 1.0)


def test_end_to_end_small(tmp_path, capsys):
    ds, ck, out = tmp_path / "ds", tmp_path / "m.ckpt", tmp_path / "out"
    assert main(["gen-data", "--count", "4", "--seed", "1", "--out", str(ds)]) == 0
    assert main(["train", "--dataset", str(ds), "--out", str(ck), "--max-steps", "3", "--batch-size", "8"]) == 0
    log = [json.loads(line) for line in (tmp_path / "m.log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3] and all(set(r) == {"step", "loss", "seed"} for r in log)
    assert json.loads((tmp_path / "m.config.json").read_text())["train"]["max_steps"] == 3
    capsys.readouterr()
    assert main(["eval", "--dataset", str(ds), "--checkpoint", str(ck), "--inputs", "1", "--instances", "1",
                 "--steps", "2", "--out", str(out), "--run-id", "e"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["config"]["steps"] == 2
    assert json.loads((out / "e" / "config.json").read_text())["guidance"]["s1"] == 2.0
    assert main(["sample", "--checkpoint", str(ck), "--dataset", str(ds), "--instances", "1", "--steps", "2",
                 "--out", str(out), "--run-id", "s"]) == 0
    assert (out / "s" / "config.json").exists() and (out / "s" / "0" / "07.png").exists()
    assert main(["sweep", "--dataset", str(ds), "--checkpoint", str(ck), "--inputs", "1", "--instances", "1",
                 "--steps", "2", "--out", str(out), "--run-id", "w", "--harmony", "0:1", "--baseline"]) == 0
    assert (out / "w" / "summary.csv").exists()
