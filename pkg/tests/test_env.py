import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_ave.env import (CameraConfig, EpisodeFinished, EpisodeRecord, GlimpseAction, GlimpseEnv, SceneImage,
                             VectorGlimpseEnv, capture_glimpse, denormalize_action, pixel_percentage, should_stop)


def scene(h=224, w=224, value=None, seed=0):
    rng = np.random.default_rng(seed)
    px = np.full((h, w, 3), value, np.float32) if value is not None else rng.random((h, w, 3), dtype=np.float32)
    return SceneImage(px)


CAM = CameraConfig(d_cam=32, d_min=32, d_max=224, d_patch=16)


@pytest.mark.parametrize("action, expected", [
    ((0, 0, 1), (0, 0, 224)),
    ((0.5, 0.5, 0), (96, 96, 32)),
    ((1, 1, 0.5), (96, 96, 128)),
])
def test_denormalize_examples(action, expected):
    assert denormalize_action(GlimpseAction(*action), scene(), CAM) == expected


def test_denormalize_rejects_small_scene():
    with pytest.raises(ValueError):
        denormalize_action(GlimpseAction(0, 0, 0), (20, 100), CAM)


def test_rounding_ties_go_up():
    # d = 32 + 0.5 * 1 = 32.5 -> 33
    cfg = CameraConfig(d_cam=32, d_min=32, d_max=33)
    assert denormalize_action(GlimpseAction(0, 0, 0.5), (64, 64), cfg)[2] == 33


def test_default_field_of_view():
    cfg = CameraConfig(d_cam=16)
    assert cfg.field_of_view(64, 80) == (16, 64)
    assert denormalize_action(GlimpseAction(0, 0, 1), (64, 80), cfg) == (0, 0, 64)


@settings(max_examples=10_000, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(16, 300), st.integers(16, 300))
def test_glimpse_always_inside_scene(x, y, z, h, w):
    cfg = CameraConfig(d_cam=16)
    xa, ya, d = denormalize_action(GlimpseAction(x, y, z), (h, w), cfg)
    d_min, d_max = cfg.field_of_view(h, w)
    assert 0 <= xa and xa + d <= w
    assert 0 <= ya and ya + d <= h
    assert d_min <= d <= d_max


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(16, 300))
def test_denormalize_monotone_in_z(z1, z2, side):
    cfg = CameraConfig(d_cam=16)
    lo, hi = sorted((z1, z2))
    d_lo = denormalize_action(GlimpseAction(0.3, 0.3, lo), (side, side), cfg)[2]
    d_hi = denormalize_action(GlimpseAction(0.3, 0.3, hi), (side, side), cfg)[2]
    assert d_lo <= d_hi
    for z in (lo, hi):
        x0, _, d = denormalize_action(GlimpseAction(0.0, 1.0, z), (side, side + 7), cfg)
        x1, y1, d1 = denormalize_action(GlimpseAction(1.0, 1.0, z), (side, side + 7), cfg)
        assert x0 == 0 and x1 == side + 7 - d1 and y1 == side - d1


def test_capture_identity_when_d_equals_dcam():
    s = scene(64, 64)
    cfg = CameraConfig(d_cam=16)
    cap = capture_glimpse(s, GlimpseAction(0.25, 0.75, 0.0), cfg)
    x, y, d = cap.coords
    assert d == 16
    assert np.array_equal(cap.pixels, s.pixels[y:y + d, x:x + d])


def test_capture_constant_scene():
    s = scene(100, 100, value=0.37)
    cfg = CameraConfig(d_cam=16)
    for z in (0.0, 0.3, 1.0):
        cap = capture_glimpse(s, GlimpseAction(0.2, 0.9, z), cfg)
        np.testing.assert_allclose(cap.pixels, 0.37, atol=1e-6)


def naive_bilinear(img, out_size):
    """Half-pixel-centre bilinear resampling with edge clamping, one pixel at a time."""
    h, w, c = img.shape
    out = np.zeros((out_size, out_size, c), dtype=np.float64)
    sy, sx = h / out_size, w / out_size
    for i in range(out_size):
        for j in range(out_size):
            fy = max((i + 0.5) * sy - 0.5, 0.0)
            fx = max((j + 0.5) * sx - 0.5, 0.0)
            y0, x0 = min(int(np.floor(fy)), h - 1), min(int(np.floor(fx)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            wy, wx = fy - y0, fx - x0
            out[i, j] = ((1 - wy) * (1 - wx) * img[y0, x0] + (1 - wy) * wx * img[y0, x1]
                         + wy * (1 - wx) * img[y1, x0] + wy * wx * img[y1, x1])
    return out


def test_capture_upscale_matches_naive_bilinear():
    # 4x4 checkerboard cells of 2 pixels on an 8x8 scene; camera upsamples 4x4 regions to 16x16
    board = (np.indices((8, 8)).sum(0) // 1 % 2).astype(np.float32)
    board = np.kron((np.indices((4, 4)).sum(0) % 2), np.ones((2, 2))).astype(np.float32)
    px = np.stack([board, 1 - board, 0.5 * board], -1)
    s = SceneImage(px)
    cfg = CameraConfig(d_cam=16, d_min=4, d_max=8)
    action = GlimpseAction(1 / 3, 2 / 3, 0.0)
    cap = capture_glimpse(s, action, cfg)
    x, y, d = cap.coords
    assert (x, y, d) == (1, 3, 4)
    expected = naive_bilinear(px[y:y + d, x:x + d].astype(np.float64), 16)
    np.testing.assert_allclose(cap.pixels, expected, atol=1e-6)


@pytest.mark.parametrize("n, d_cam, expected", [
    (14, 32, 28.57), (12, 32, 24.49), (9, 32, 18.36), (3, 32, 6.12), (12, 16, 6.12), (0, 32, 0.0),
])
def test_pixel_percentage_published_values(n, d_cam, expected):
    cfg = CameraConfig(d_cam=d_cam)
    assert pixel_percentage(n, (224, 224), cfg) == pytest.approx(expected, abs=0.01)


def test_pixel_percentage_linear_and_position_free():
    s = scene(224, 224)
    cfg = CameraConfig(d_cam=32)
    caps_a = [capture_glimpse(s, GlimpseAction(0, 0, 1), cfg) for _ in range(5)]
    caps_b = [capture_glimpse(s, GlimpseAction(0.9, 0.1, 0), cfg) for _ in range(5)]
    assert pixel_percentage(caps_a, s, cfg) == pixel_percentage(caps_b, s, cfg)
    assert pixel_percentage(10, s, cfg) == pytest.approx(2 * pixel_percentage(5, s, cfg))


def test_should_stop_examples():
    assert should_stop([0.9, 0.1], 0.85, 2, 12)
    assert not should_stop(np.full(10, 0.1), 0.75, 1, 12)
    assert should_stop(np.full(10, 0.1), 0.75, 12, 12)
    with pytest.raises(ValueError):
        should_stop([0.5, 0.5], 0.0, 1, 12)
    with pytest.raises(ValueError):
        should_stop([0.5, 0.5], 1.5, 1, 12)


def test_reset_clears_history():
    env = GlimpseEnv(CameraConfig(d_cam=16), max_steps=8, scene=scene(64, 64))
    assert env.reset() == []
    assert env.reset() == [] and env.t == 0
    for _ in range(5):
        env.step(GlimpseAction(0.5, 0.5, 0.5))
    env.reset()
    assert len(env.history) == 0 and env.t == 0


def test_step_done_and_error_after_done():
    env = GlimpseEnv(CameraConfig(d_cam=16), max_steps=3, scene=scene(64, 64))
    env.reset()
    dones = [env.step(GlimpseAction(0.1, 0.2, 0.3))[1] for _ in range(3)]
    assert dones == [False, False, True]
    assert env.record.stop_reason == "max_steps"
    with pytest.raises(EpisodeFinished):
        env.step(GlimpseAction(0, 0, 0))


def _toy_evaluator(target_xy, n_classes=10):
    """Confidence grows each time a glimpse lands on the marked corner region."""
    def evaluator(captures):
        hits = sum(1 for c in captures if c.coords[0] == target_xy[0] and c.coords[1] == target_xy[1])
        p_top = min(0.1 + 0.2 * hits, 0.99)
        probs = np.full(n_classes, (1 - p_top) / (n_classes - 1))
        probs[0] = p_top
        return -np.log(p_top), probs
    return evaluator


def test_confidence_stopping_before_budget():
    # Five hits on the corner push the top probability to 0.99 >= 0.85 at t=5 (0.1 + 0.2*4 = 0.9 at t=4).
    env = GlimpseEnv(CameraConfig(d_cam=16), max_steps=12, threshold=0.95, evaluator=_toy_evaluator((0, 0)),
                     scene=scene(64, 64))
    env.reset()
    done, t = False, 0
    while not done:
        _, done = env.step(GlimpseAction(0, 0, 0))
        t += 1
    assert t == 5 and env.record.stop_reason == "confidence"
    env.record.check()


def test_threshold_one_runs_full_budget():
    env = GlimpseEnv(CameraConfig(d_cam=16), max_steps=7, threshold=1.0, evaluator=_toy_evaluator((0, 0)),
                     scene=scene(64, 64))
    env.reset()
    steps = 0
    while not env.done:
        env.step(GlimpseAction(0, 0, 0))
        steps += 1
    assert steps == 7 and env.record.stop_reason == "max_steps"


def test_rewards_telescope_in_env():
    env = GlimpseEnv(CameraConfig(d_cam=16), max_steps=6, evaluator=_toy_evaluator((0, 0)), scene=scene(64, 64))
    env.reset()
    rng = np.random.default_rng(0)
    while not env.done:
        env.step(GlimpseAction(*rng.random(3)) if rng.random() < 0.5 else GlimpseAction(0, 0, 0))
    rec = env.record
    assert len(rec.rewards) == len(rec.captures)
    assert sum(rec.rewards) == pytest.approx(rec.losses[0] - rec.losses[-1], abs=1e-9)


def test_vector_env_lockstep():
    envs = [GlimpseEnv(CameraConfig(d_cam=16), max_steps=m, scene=scene(64, 64, seed=m)) for m in (1, 2, 3)]
    venv = VectorGlimpseEnv(envs)
    venv.reset()
    steps = 0
    while not venv.all_done:
        venv.step([GlimpseAction(0.5, 0.5, 0.5)] * 3)
        steps += 1
    assert steps == 3
    assert [len(e.history) for e in envs] == [1, 2, 3]


def test_episode_record_json_round_trip():
    env = GlimpseEnv(CameraConfig(d_cam=16), max_steps=3, evaluator=_toy_evaluator((0, 0)), scene=scene(64, 64))
    env.reset()
    for a in ((0, 0, 0), (0.5, 0.2, 1.0), (1, 1, 0.3)):
        env.step(GlimpseAction(*a))
    rec = env.record
    plain = json.loads(rec.to_json())
    assert "pixels_b64" not in plain["steps"][0]
    assert plain["steps"][1]["action"] == [0.5, 0.2, 1.0]
    assert plain["steps"][1]["d"] == 64
    back = EpisodeRecord.from_json(rec.to_json(include_pixels=True))
    for a, b in zip(rec.captures, back.captures):
        assert a.coords == b.coords
        np.testing.assert_array_equal(a.pixels, b.pixels)
    assert back.rewards == rec.rewards
    assert rec.to_json() == EpisodeRecord.from_json(rec.to_json()).to_json()


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneImage(np.full((8, 8, 3), 1.5))
    with pytest.raises(ValueError):
        SceneImage(np.full((8, 8, 3), np.nan))
