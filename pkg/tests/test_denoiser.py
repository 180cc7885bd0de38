import struct

import numpy as np
import pytest

from harmonylab.denoiser import (
    FULL,
    MV_ONLY,
    REF_ONLY,
    UNCOND,
    ConditionMask,
    DenoiserConfig,
    TrainConfig,
    TrainingDivergedError,
    AdamState,
    draw_masks,
    denoise,
    eval_all_branches,
    eval_branches,
    grad_check,
    init_denoiser,
    load_checkpoint,
    make_batch,
    make_probe,
    save_checkpoint,
    time_embedding,
    train,
    train_step,
)
from harmonylab.diffusion import make_schedule, to_model_range
from harmonylab.rng import stream

SCHED = make_schedule()
SMALL = DenoiserConfig(size=4, n_views=4, hidden=32, ref_dim=8, mv_dim=8)
SMALL_16 = DenoiserConfig(hidden=32, ref_dim=8, mv_dim=8)


def _inputs(cfg, seed=0):
    rng = np.random.default_rng(seed)
    xt = rng.standard_normal((cfg.n_views, cfg.size, cfg.size, 3)).astype(np.float32)
    ref = rng.random((cfg.size, cfg.size, 3)).astype(np.float32)
    return xt, ref


# -- init / shapes ----------------------------------------------------------------


def test_init_deterministic():
    a, b = init_denoiser(SMALL, 3), init_denoiser(SMALL, 3)
    for k in a.arrays:
        np.testing.assert_array_equal(a[k], b[k])


def test_init_seed_dependent():
    a, b = init_denoiser(SMALL, 3), init_denoiser(SMALL, 4)
    assert max(np.abs(a[k] - b[k]).max() for k in a.arrays) > 0


def test_init_fan_in_bounds():
    p = init_denoiser(SMALL, 0)
    for k, v in p.arrays.items():
        if k.startswith("W"):
            assert np.abs(v).max() <= 1 / np.sqrt(v.shape[0])


def test_default_input_width():
    cfg = DenoiserConfig()
    # x_t + time embedding + pose + ref code + mv code + two presence flags
    assert cfg.in_dim == 16 * 16 * 3 + 16 + 4 + 64 + 64 + 2 == 918
    assert init_denoiser(cfg, 0)["W0"].shape == (918, 256)
    assert cfg.shapes()["W_out"] == (256, 768)


@pytest.mark.parametrize("kw", [{"n_views": 1}, {"hidden": 0}, {"time_dim": 3}, {"layers": -1}])
def test_inconsistent_config(kw):
    with pytest.raises(ValueError):
        DenoiserConfig(**kw)


def test_time_embedding_shape_and_range():
    e = time_embedding(np.arange(1, 101), 16)
    assert e.shape == (100, 16)
    assert np.abs(e).max() <= 1.0


# -- denoise ------------------------------------------------------------------------


def test_denoise_deterministic_and_shaped():
    p = init_denoiser(SMALL, 0)
    xt, ref = _inputs(SMALL)
    a = denoise(p, xt, 1, 40, ref, FULL)
    b = denoise(p, xt, 1, 40, ref, FULL)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (SMALL.pixels,)


@pytest.mark.parametrize("n,t", [(-1, 10), (4, 10), (0, 0), (0, 101)])
def test_denoise_range_errors(n, t):
    p = init_denoiser(SMALL, 0)
    xt, ref = _inputs(SMALL)
    with pytest.raises((IndexError, ValueError)):
        denoise(p, xt, n, t, ref, FULL)


def test_eval_branches_consistency():
    p = init_denoiser(SMALL, 1)
    xt, ref = _inputs(SMALL, 1)
    b = eval_branches(p, xt, 2, 30, ref)
    np.testing.assert_array_equal(b.eps_full, denoise(p, xt, 2, 30, ref, FULL))
    np.testing.assert_array_equal(b.eps_mv, denoise(p, xt, 2, 30, ref, MV_ONLY))
    np.testing.assert_array_equal(b.eps_ref, denoise(p, xt, 2, 30, ref, REF_ONLY))
    np.testing.assert_array_equal(b.eps_uncond, denoise(p, xt, 2, 30, ref, UNCOND))
    assert b.eps_full.shape == b.eps_mv.shape == b.eps_ref.shape == b.eps_uncond.shape


def test_batched_branches_match_per_view():
    p = init_denoiser(SMALL, 2)
    xt, ref = _inputs(SMALL, 2)
    allb = eval_all_branches(p, xt, 55, ref)
    for n in range(SMALL.n_views):
        b = eval_branches(p, xt, n, 55, ref)
        for f in ("eps_full", "eps_mv", "eps_ref", "eps_uncond"):
            np.testing.assert_allclose(getattr(allb, f)[n], getattr(b, f), rtol=1e-5, atol=1e-6)


def _zero_condition_paths(p):
    q = p.copy()
    s = q.config.slices()
    q.arrays["W_r"][:] = 0
    q.arrays["W_m"][:] = 0
    q.arrays["W0"][s["flags"]] = 0
    return q


def test_untrained_branches_differ_only_through_condition_paths():
    p = init_denoiser(SMALL, 5)
    xt, ref = _inputs(SMALL, 5)
    b = eval_branches(p, xt, 0, 20, ref)
    assert not np.array_equal(b.eps_full, b.eps_uncond)
    z = eval_branches(_zero_condition_paths(p), xt, 0, 20, ref)
    np.testing.assert_array_equal(z.eps_full, z.eps_mv)
    np.testing.assert_array_equal(z.eps_full, z.eps_ref)
    np.testing.assert_array_equal(z.eps_full, z.eps_uncond)


def test_null_token_separation():
    p = init_denoiser(SMALL, 6)
    assert np.abs(p["W0"][p.config.slices()["flags"]]).max() > 0
    xt, _ = _inputs(SMALL, 6)
    zero_ref = np.full((SMALL.size, SMALL.size, 3), 0.5, dtype=np.float32)  # 0 in model range
    assert not np.any(to_model_range(zero_ref))
    absent = denoise(p, xt, 1, 10, zero_ref, ConditionMask(False, True))
    present_zero = denoise(p, xt, 1, 10, zero_ref, ConditionMask(True, True))
    assert not np.allclose(absent, present_zero)


def test_trained_model_uses_conditions(dataset_factory):
    ds = dataset_factory(64, 2)
    p = init_denoiser(DenoiserConfig(), 0)
    p, _ = train(p, ds.views, TrainConfig(epochs=100, max_steps=100), SCHED)
    x0 = to_model_range(ds.views[0]).reshape(8, -1)
    xt = np.sqrt(SCHED.alpha_bar[30]) * x0 + np.sqrt(1 - SCHED.alpha_bar[30]) * stream(0, "t").standard_normal(x0.shape)
    on = denoise(p, xt, 0, 30, ds.views[0][0], FULL)
    off = denoise(p, xt, 0, 30, ds.views[0][0], UNCOND)
    assert np.abs(on - off).max() > 1e-3


# -- training -------------------------------------------------------------------------


def test_p_drop_zero_keeps_both_conditions():
    ur, um = draw_masks(stream(0, "dropout"), 10000, 0.0)
    assert ur.all() and um.all()


def test_dropout_rates_independent():
    ur, um = draw_masks(stream(1, "dropout"), 200000, 0.1)
    assert abs((~ur).mean() - 0.1) < 0.005
    assert abs((~um).mean() - 0.1) < 0.005
    assert abs((~ur & ~um).mean() - 0.01) < 0.002


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(p_drop=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_training_bitwise_reproducible(dataset_factory):
    ds = dataset_factory(16, 3)
    cfg = TrainConfig(epochs=10, batch_size=32, max_steps=15, seed=4)
    _, la = train(init_denoiser(SMALL_16, 4), ds.views, cfg, SCHED)
    _, lb = train(init_denoiser(SMALL_16, 4), ds.views, cfg, SCHED)
    assert la == lb


def test_nonfinite_loss_aborts(dataset_factory):
    ds = dataset_factory(16, 3)
    p = init_denoiser(SMALL_16, 0)
    p.arrays["b_out"][0] = np.nan
    views = to_model_range(ds.views).reshape(16, 8, -1)
    items = np.array([[0, 0], [1, 1]])
    batch = make_batch(views, items, stream(0, "batch"), SCHED.T)
    with pytest.raises(TrainingDivergedError):
        train_step(p, batch, TrainConfig(), stream(0, "dropout"), AdamState.zeros_like(p), SCHED)


def test_loss_decreases_in_200_steps(dataset_factory):
    ds = dataset_factory(64, 5)
    ratios = []
    for seed in range(3):
        cfg = TrainConfig(epochs=1000, max_steps=200, seed=seed)
        _, losses = train(init_denoiser(DenoiserConfig(), seed), ds.views, cfg, SCHED)
        ratios.append(losses[199] / losses[0])
    assert np.median(ratios) < 1.0


def test_smoothed_loss_decreases_50_to_500(dataset_factory):
    ds = dataset_factory(512, 0)
    ok = 0
    for seed in range(3):
        cfg = TrainConfig(epochs=1000, max_steps=500, seed=seed)
        _, losses = train(init_denoiser(DenoiserConfig(), seed), ds.views, cfg, SCHED)
        smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")  # smooth[i] ends at step i + 50
        ok += smooth[499 - 49] < smooth[49 - 49]
    assert ok >= 2


# -- gradient check -----------------------------------------------------------------------


def test_grad_check_linear_network_exact():
    cfg = DenoiserConfig(size=4, n_views=4, hidden=32, layers=0, ref_dim=8, mv_dim=8)
    p = init_denoiser(cfg, 0)
    # a linear loss is quadratic in each weight, so a large step is exact up to roundoff
    assert grad_check(p, make_probe(cfg, SCHED), SCHED, n_coords=256, h=1e-3) < 1e-8


def test_grad_check_full_network():
    p = init_denoiser(SMALL, 0)
    p.arrays["w_skip"][:] = stream(0, "skip").normal(0, 0.3, size=SMALL.time_dim)
    err = grad_check(p, make_probe(SMALL, SCHED), SCHED, n_coords=256, h=1e-5)
    assert err < 1e-5


def test_grad_check_step_size_stable():
    p = init_denoiser(SMALL, 1)
    probe = make_probe(SMALL, SCHED, seed=1)
    e4 = grad_check(p, probe, SCHED, n_coords=200, h=1e-4)
    e5 = grad_check(p, probe, SCHED, n_coords=200, h=1e-5)
    assert max(e4, e5) / max(min(e4, e5), 1e-16) <= 10.0
    assert max(e4, e5) < 1e-5


# -- checkpoint -----------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    p = init_denoiser(SMALL, 7)
    f = tmp_path / "m.ckpt"
    save_checkpoint(p, f)
    q = load_checkpoint(f)
    assert q.config == p.config and q.version == p.version
    for k in p.arrays:
        np.testing.assert_array_equal(q[k], p[k])
    raw = f.read_bytes()
    assert raw[:4] == b"HVTD"
    assert struct.unpack_from("<I", raw, 4)[0] == 1


def test_checkpoint_rejects_garbage(tmp_path):
    f = tmp_path / "bad.ckpt"
    f.write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(f)
