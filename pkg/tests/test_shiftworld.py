import dataclasses

import numpy as np
import pytest

from quadmix.errors import ConfigError
from quadmix.flow_ops import warp_bilinear, warp_labels
from quadmix.rng import Rng
from quadmix.shiftworld import (BASE_PALETTE, CATEGORIES, STAR, ShiftWorldConfig, generate, hue_rotation,
                                load, render_clip, sample_geometry, save, style_palette)
from quadmix.tensor_io import LabelMap

SMALL = ShiftWorldConfig(height=32, width=32, min_radius=3, max_radius=6, train_clips=20,
                         test_clips=4, seed=3)


@pytest.fixture(scope="module")
def world():
    return generate(SMALL)


def test_zero_shapes_is_blank():
    cfg = dataclasses.replace(SMALL, min_shapes=0, max_shapes=0, star_fraction=0.0)
    w = generate(dataclasses.replace(cfg, train_clips=2, test_clips=1))
    clip = w.source[0]
    assert (clip.labels == 0).all()
    assert not clip.flow(0, 1).any()
    assert np.allclose(clip.frames, BASE_PALETTE[0][None, :, None, None])


def test_generation_is_deterministic(world):
    again = generate(SMALL)
    for a, b in zip(world.source + world.target, again.source + again.target):
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.labels, b.labels)
    other = generate(dataclasses.replace(SMALL, seed=4))
    assert not np.array_equal(other.source[0].frames, world.source[0].frames)


def test_split_sizes_and_dtypes(world):
    assert len(world.source) == len(world.target) == 20
    assert len(world.target_test) == len(world.source_test) == 4
    clip = world.source[0]
    assert clip.frames.shape == (4, 3, 32, 32) and clip.frames.dtype == np.float32
    assert clip.labels.dtype == np.uint16
    assert 0.0 <= clip.frames.min() and clip.frames.max() <= 1.0


def test_flow_equals_velocity_inside_shapes(world):
    for clip in world.source:
        for t in range(1, clip.length):
            f = clip.flow(t - 1, t)
            for i, s in enumerate(clip.shapes):
                sel = clip.surface[t] == i
                assert (f[sel] == (-s.vx, -s.vy)).all()
            assert not f[clip.surface[t] < 0].any()


def test_warped_frames_match_on_consistent_pixels(world):
    worst = 0.0
    for clip in world.source:
        for t in range(1, clip.length):
            warped = warp_bilinear(clip.frames[t - 1], clip.flow(t - 1, t))
            ok = clip.consistency_mask(t - 1, t)
            worst = max(worst, float(np.abs(warped - clip.frames[t])[:, ok].max(initial=0.0)))
    assert worst < 1e-5


def test_label_shift_reproduces_next_labels(world):
    for clip in world.source + world.target:
        for t in range(1, clip.length):
            moved = warp_labels(clip.label(t - 1), clip.flow(t - 1, t))
            ok = clip.consistency_mask(t - 1, t)
            assert np.array_equal(moved.values[ok], clip.labels[t][ok])


def test_multi_step_flow_scales_with_time(world):
    clip = world.source[1]
    assert np.array_equal(clip.flow(1, 3)[clip.surface[3] >= 0],
                          2 * clip.flow(2, 3)[clip.surface[3] >= 0])


def test_domains_differ_only_in_style():
    cfg = SMALL
    rng = Rng(8)
    shapes, phase = sample_geometry(rng, cfg, with_star=False)
    src = render_clip(shapes, phase, cfg, style_palette(cfg, "source"), None, 0.0)
    tgt = render_clip(shapes, phase, cfg, style_palette(cfg, "target"), None, 0.0)
    assert np.array_equal(src.labels, tgt.labels)
    assert np.array_equal(src.flow(0, 1), tgt.flow(0, 1))
    assert not np.allclose(src.frames, tgt.frames)


def test_target_palette_is_rotated_and_darker():
    rot = hue_rotation(SMALL.hue_rotation_deg)
    assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.allclose(rot @ np.ones(3), np.ones(3))
    pal = style_palette(SMALL, "target")
    assert pal.max() <= SMALL.target_brightness + 1e-12


def test_stars_are_rare(world):
    big = generate(dataclasses.replace(SMALL, train_clips=100, test_clips=1))
    with_star = sum(any(s.category == STAR for s in c.shapes) for c in big.source)
    assert 0 < with_star < 10


def test_config_validation():
    with pytest.raises(ConfigError):
        ShiftWorldConfig(num_categories=4)
    with pytest.raises(ConfigError):
        ShiftWorldConfig(height=16, width=16)
    with pytest.raises(ConfigError):
        ShiftWorldConfig(star_fraction=0.2)
    with pytest.raises(ConfigError):
        ShiftWorldConfig.from_dict({"colour": 1})
    assert ShiftWorldConfig.from_dict({"shade_range": [0.7, 0.9]}).shade_range == (0.7, 0.9)
    assert len(CATEGORIES) == 5


def test_save_load_round_trip(tmp_path):
    w = generate(dataclasses.replace(SMALL, train_clips=3, test_clips=2))
    save(w, tmp_path / "ds")
    back = load(tmp_path / "ds")
    assert back.config == w.config
    for split in ("source", "target", "target_test", "source_test"):
        for a, b in zip(getattr(w, split), getattr(back, split)):
            assert np.array_equal(a.frames, b.frames)
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.surface, b.surface)
            assert np.array_equal(a.flow(0, 1), b.flow(0, 1))
    assert isinstance(back.source[0].label(0), LabelMap)
