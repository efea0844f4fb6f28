import numpy as np
import pytest

from groundgen import world


def test_sample_scene_max_one_object():
    spec = world.sample_scene(7, 1)
    assert len(spec.objects) == 1


def test_sample_scene_deterministic():
    assert world.sample_scene(7, 3) == world.sample_scene(7, 3)


def test_sample_scene_rejects_bad_max():
    with pytest.raises(ValueError):
        world.sample_scene(0, 0)
    with pytest.raises(ValueError):
        world.sample_scene(0, 5)


def test_no_overlaps_over_500_scenes():
    # brute-force pairwise box check, independent of the sampler's own test
    for seed in range(500):
        spec = world.sample_scene(seed, 4)
        boxes = [o.box for o in spec.objects]
        for i in range(len(boxes)):
            a = boxes[i]
            assert 0 <= a[0] and a[2] <= world.CANVAS
            assert 0 <= a[1] and a[3] <= world.CANVAS
            for j in range(i + 1, len(boxes)):
                b = boxes[j]
                x_gap = max(b[0] - a[2], a[0] - b[2])
                y_gap = max(b[1] - a[3], a[1] - b[3])
                assert max(x_gap, y_gap) >= world.MIN_MARGIN


def test_object_invariants():
    for seed in range(100):
        spec = world.sample_scene(seed, 4)
        world.validate_scene(spec)
        for o in spec.objects:
            if o.shape == "circle":
                assert o.rotation == 0
            if o.shape == "square":
                assert o.rotation in (0, 30, 45, 60)
            side = world.BOX_SIDE[o.size]
            assert (o.box[2] - o.box[0]) * (o.box[3] - o.box[1]) == side * side


def test_render_deterministic():
    spec = world.sample_scene(3, 4)
    assert np.array_equal(world.render(spec), world.render(spec))


def test_render_red_square_pixel_count():
    side = world.BOX_SIDE["large"]
    obj = world.ObjectSpec("square", "red", "solid", "large", 0, (20, 20, 20 + side, 20 + side))
    spec = world.SceneSpec("gray", "normal", (obj,), seed=0)
    img = world.render(spec)
    target = world.lit_color("red", "normal")
    close = np.abs(img - target).max(axis=2) <= 0.02
    assert int(close.sum()) >= 400


def test_render_luminance_ordering():
    base = world.sample_scene(11, 3)
    dim = world.SceneSpec(base.background_color, "dim", base.objects, base.seed)
    bright = world.SceneSpec(base.background_color, "bright", base.objects, base.seed)
    assert world.render(dim).mean() < world.render(bright).mean()


def test_background_pixels_match_palette():
    spec = world.SceneSpec("navy", "bright", world.sample_scene(5, 2).objects, 5)
    img = world.render(spec)
    expected = world.lit_color("navy", "bright", foreground=False)
    corner = img[0, 0]
    assert np.allclose(corner, expected, atol=1e-6)


def test_interior_dominant_color_is_lit_color():
    side = world.BOX_SIDE["large"]
    obj = world.ObjectSpec("square", "blue", "striped", "large", 0, (10, 10, 10 + side, 10 + side))
    spec = world.SceneSpec("gray", "bright", (obj,), seed=0)
    img = world.render(spec)
    mask = world.shape_mask("square", 0, obj.box)
    pix = img[mask]
    lit = world.lit_color("blue", "bright")
    frac_lit = (np.abs(pix - lit).max(axis=1) < 1e-6).mean()
    assert frac_lit > 0.5  # texture shading never dominates


def test_scene_json_round_trip():
    for seed in (0, 17, 99):
        spec = world.sample_scene(seed, 4)
        assert world.scene_from_json(world.scene_to_json(spec)) == spec


def test_foreground_background_separation():
    # every lit (or texture-shaded) object color stays distinguishable from
    # every background at the same light level
    worst = np.inf
    for light in world.LIGHT_LEVELS:
        for bg in world.BACKGROUND_COLORS:
            bg_lit = world.lit_color(bg, light, foreground=False)
            for fg in world.FOREGROUND_COLORS:
                lit = world.lit_color(fg, light)
                for col in (lit, lit * world.TEXTURE_SHADE):
                    worst = min(worst, float(np.linalg.norm(col - bg_lit)))
    assert worst > 0.08


def test_background_combos_distinct():
    combos = [
        tuple(world.lit_color(bg, light, foreground=False))
        for bg in world.BACKGROUND_COLORS
        for light in world.LIGHT_LEVELS
    ]
    assert len(set(combos)) == len(combos)


def test_layout_infeasible_error():
    # force an impossible layout by rigging attributes: four large boxes fit,
    # so instead shrink the canvas indirectly by asking for max objects with a
    # seed known to produce four large boxes is not reliable; use monkey canvas
    with pytest.raises(world.LayoutError):
        _force_infeasible()


def _force_infeasible():
    # patch BOX_SIDE so large that two boxes can never coexist; the first
    # multi-object seed must then exhaust its 1000 layout attempts
    original = dict(world.BOX_SIDE)
    world.BOX_SIDE["small"] = 40
    world.BOX_SIDE["large"] = 40
    try:
        for seed in range(200):
            world.sample_scene(seed, 4)
    finally:
        world.BOX_SIDE.clear()
        world.BOX_SIDE.update(original)
