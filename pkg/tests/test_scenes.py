import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonylab.metrics import block_flow
from harmonylab.scenes import (
    CLASSES,
    PALETTE,
    PALETTE_NAMES,
    STRIPE_PERIOD,
    SceneConfig,
    _grain,
    back_view_index,
    front_mask,
    gen_scene,
    gt_flow,
    load_dataset,
    make_dataset,
    nearest_palette,
    render_view,
    render_viewset,
    shading,
    unshade,
    view_columns,
)

CFG = SceneConfig()


def test_same_seed_same_texture():
    a, b = gen_scene(123), gen_scene(123)
    np.testing.assert_array_equal(a.texture, b.texture)
    assert (a.label, a.back_color) == (b.label, b.back_color)


def test_texture_in_unit_range():
    for s in range(50):
        tex = gen_scene(s).texture
        assert tex.min() >= 0.0 and tex.max() <= 1.0


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        gen_scene(0, "torus")


def test_back_color_frequencies_uniform():
    counts = np.bincount([gen_scene(s).back_color for s in range(1000)], minlength=4)
    freq = counts / 1000
    assert np.all(np.abs(freq - 0.25) <= 0.05), freq


def test_back_color_independent_of_front():
    # the back stream is separate: forcing a class or changing the front
    # cannot move the back color
    for s in range(100):
        backs = {gen_scene(s, label).back_color for label in CLASSES}
        assert len(backs) == 1


def test_back_half_uses_one_palette_color():
    grain = _grain(CFG.size, CFG.tex_width)
    back = ~front_mask(CFG)
    for s in range(30):
        sc = gen_scene(s)
        base = sc.texture[:, back] - grain[:, back, None]
        np.testing.assert_allclose(base, np.broadcast_to(PALETTE[sc.back_color], base.shape), atol=1e-12)


def test_stripes_alternate_with_fixed_period():
    sc = gen_scene(5, "stripes")
    grain = _grain(CFG.size, CFG.tex_width)
    cols = np.flatnonzero(front_mask(CFG))
    cols = cols[np.argsort((cols + CFG.tex_width // 4) % CFG.tex_width)]
    base = sc.texture[:, cols] - grain[:, cols, None]
    c0, c1 = sc.front_colors
    for u in range(len(cols)):
        want = c0 if (u // (STRIPE_PERIOD // 2)) % 2 == 0 else c1
        np.testing.assert_allclose(base[:, u], np.broadcast_to(want, base[:, u].shape), atol=1e-12)


def test_view_index_out_of_range():
    sc = gen_scene(0)
    with pytest.raises(IndexError):
        render_view(sc, CFG.n_views)
    with pytest.raises(IndexError):
        gt_flow(sc, -1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 7))
def test_render_is_wrapped_crop(seed, n):
    sc = gen_scene(seed)
    cols = (np.arange(CFG.size) - CFG.size // 2 - n * CFG.w_col) % CFG.tex_width
    want = sc.texture[:, cols] * shading(CFG)[None, :, None]
    np.testing.assert_allclose(render_view(sc, n), want, atol=1e-6)


def test_shifting_view_equals_shifting_texture():
    # rolling the strip by w_col turns view n into view n+1
    sc = gen_scene(77)
    rolled = gen_scene(77)
    rolled.texture = np.roll(sc.texture, CFG.w_col, axis=1)
    for n in range(CFG.n_views):
        np.testing.assert_array_equal(render_view(rolled, n), render_view(sc, (n + 1) % CFG.n_views))


def test_adjacent_overlap_columns():
    V, w = CFG.size, CFG.w_col
    for n in range(CFG.n_views):
        a = set(view_columns(CFG, n))
        b = set(view_columns(CFG, (n + 1) % CFG.n_views))
        assert len(a & b) == V - w


def test_overlap_agrees_after_unshading():
    for s in range(20):
        sc = gen_scene(s)
        for n in range(CFG.n_views):
            a = unshade(render_view(sc, n))
            b = unshade(render_view(sc, (n + 1) % CFG.n_views))
            np.testing.assert_allclose(a[:, : CFG.size - CFG.w_col], b[:, CFG.w_col :], atol=1e-6)


def test_back_view_mean_matches_palette():
    nb = back_view_index(CFG)
    for s in range(100):
        sc = gen_scene(s)
        mean = unshade(render_view(sc, nb)).reshape(-1, 3).mean(axis=0)
        assert np.linalg.norm(mean - PALETTE[sc.back_color]) < 0.1
        assert nearest_palette(render_view(sc, nb)) == sc.back_color


def test_gt_flow_constant_on_valid_pixels():
    f = gt_flow(gen_scene(1), 3)
    assert np.all(f.dx[f.valid] == CFG.w_col)
    assert np.all(f.dy == 0)
    assert not f.valid[:, CFG.size - CFG.w_col :].any()


def test_gt_flow_cycle_returns_to_start():
    sc = gen_scene(2)
    total = sum(float(gt_flow(sc, n).dx[0, 0]) for n in range(CFG.n_views))
    assert total % CFG.tex_width == 0


def test_block_matching_agrees_with_gt_flow():
    hit = tot = 0
    for s in range(30):
        sc = gen_scene(s)
        vs = render_viewset(sc).views
        for n in range(CFG.n_views):
            est = block_flow(vs[n], vs[(n + 1) % CFG.n_views])
            gt = gt_flow(sc, n)
            # sample one pixel per 4x4 block
            for y in range(0, CFG.size, 4):
                for x in range(0, CFG.size, 4):
                    if est.valid[y, x] and gt.valid[y, x]:
                        tot += 1
                        hit += est.dx[y, x] == gt.dx[y, x] and est.dy[y, x] == gt.dy[y, x]
    assert tot > 0
    assert hit / tot >= 0.9


def test_dataset_manifest_byte_identical(tmp_path):
    m1 = make_dataset(6, 3, tmp_path / "a")
    m2 = make_dataset(6, 3, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    recs = [json.loads(line) for line in m1.read_text().splitlines()]
    assert [r["scene_id"] for r in recs] == [f"scene_{i:05d}" for i in range(6)]
    for r in recs:
        assert set(r) == {"scene_id", "seed", "class", "back_color", "files"}
        assert r["back_color"] in PALETTE_NAMES and r["class"] in CLASSES
        assert len(r["files"]) == CFG.n_views


def test_dataset_round_trip_within_quantization(tmp_path):
    make_dataset(4, 11, tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.views.shape == (4, 8, 16, 16, 3)
    for i, rec in enumerate(ds.records):
        sc = gen_scene(rec["seed"])
        assert PALETTE_NAMES[sc.back_color] == rec["back_color"]
        want = np.stack([render_view(sc, n) for n in range(CFG.n_views)])
        assert np.abs(ds.views[i] - want).max() <= 1 / 255 + 1e-7


def test_dataset_requires_positive_count(tmp_path):
    with pytest.raises(ValueError):
        make_dataset(0, 0, tmp_path)


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nothing")
