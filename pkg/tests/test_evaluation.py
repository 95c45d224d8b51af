import hashlib

import numpy as np
import pytest
import torch

from elastic_ave.env import CameraConfig, EpisodeRecord, GlimpseAction, GlimpseCapture, denormalize_action
from elastic_ave.evaluation import (BASELINES, BaselinePolicy, ablation_csv, ablation_table, accumulate_glimpse_map,
                                    baseline_action, draw_overlay, export_trajectory, glimpse_map_json,
                                    visible_composite)
from elastic_ave.training import ExplorerModel

from conftest import micro_config

CAM = CameraConfig(d_cam=32, d_patch=16)


def record(coords, shape=(8, 8)):
    rec = EpisodeRecord(scene_id="r", scene_shape=shape)
    for t, c in enumerate(coords, 1):
        rec.captures.append(GlimpseCapture(None, tuple(c), t))
    return rec


def test_full_then_grid_starts_with_whole_scene():
    pol = BaselinePolicy("full_then_grid", CAM, (224, 224))
    assert baseline_action(pol, 1) == GlimpseAction(0.0, 0.0, 1.0)
    assert denormalize_action(baseline_action(pol, 2), (224, 224), CAM) == (0, 0, 32)


def test_raster_grid_covers_7x7_without_overlap():
    pol = BaselinePolicy("raster_grid", CAM, (224, 224))
    placements = [denormalize_action(pol.action(t), (224, 224), CAM) for t in range(1, 50)]
    assert len(set(placements)) == 49
    cover = np.zeros((224, 224), dtype=int)
    for x, y, d in placements:
        cover[y:y + d, x:x + d] += 1
    assert (cover == 1).all()
    # row-major order, then wrap
    assert placements[1] == (32, 0, 32) and placements[7] == (0, 32, 32)
    assert pol.action(50) == pol.action(1)


def test_random_uniform_reproducible():
    a = [BaselinePolicy("random_uniform", CAM, (224, 224), seed=5).action(t) for t in (1, 2, 3)]
    b = [BaselinePolicy("random_uniform", CAM, (224, 224), seed=5).action(t) for t in (1, 2, 3)]
    assert a == b


def test_baselines_fuzz_in_range():
    rng = np.random.default_rng(0)
    draws = 0
    for kind in BASELINES:
        for _ in range(5):
            H, W = (int(v) for v in rng.integers(32, 300, 2))
            pol = BaselinePolicy(kind, CAM, (H, W), fixed_z=float(rng.random()), seed=int(rng.integers(1 << 30)))
            for t in range(1, 5001):
                a = pol.action(t).as_array()
                assert ((a >= 0) & (a <= 1)).all()
                draws += 1
    assert draws == 100_000


def test_baseline_errors():
    with pytest.raises(ValueError):
        BaselinePolicy("spiral", CAM, (64, 64))
    with pytest.raises(ValueError):
        BaselinePolicy("center", CAM, (64, 64)).action(0)


def test_glimpse_map_full_scene_is_uniform():
    gmap = accumulate_glimpse_map([record([(0, 0, 8)])], (8, 8))
    assert (gmap.overall == 1).all() and len(gmap.per_step) == 1


def test_glimpse_map_mass_matches_area_accounting():
    recs = [record([(0, 0, 4), (4, 4, 4)]), record([(2, 2, 6)])]
    gmap = accumulate_glimpse_map(recs, (8, 8))
    assert gmap.overall.mean() == pytest.approx((16 + 16 + 36) / (64 * 2))


def test_glimpse_map_hand_counted_fixture():
    recs = [
        record([(0, 0, 4), (2, 2, 4)]),
        record([(4, 0, 4)]),
        record([(0, 0, 8), (0, 4, 2)]),
    ]
    gmap = accumulate_glimpse_map(recs, (8, 8))
    hand = np.array([
        [2, 2, 2, 2, 2, 2, 2, 2],
        [2, 2, 2, 2, 2, 2, 2, 2],
        [2, 2, 3, 3, 3, 3, 2, 2],
        [2, 2, 3, 3, 3, 3, 2, 2],
        [2, 2, 2, 2, 2, 2, 1, 1],
        [2, 2, 2, 2, 2, 2, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
    ]) / 3
    np.testing.assert_allclose(gmap.overall, hand)
    step2 = np.zeros((8, 8))
    step2[2:6, 2:6] += 1
    step2[4:6, 0:2] += 1
    np.testing.assert_allclose(gmap.per_step[1], step2 / 3)
    norm = gmap.normalized()
    assert norm.overall.max() == 1.0 and norm.overall.min() >= 0
    assert '"n_records": 3' in glimpse_map_json(gmap)


def test_overlay_outline_matches_coords():
    scene = np.zeros((16, 16, 3), dtype=np.float32)
    out = draw_overlay(scene, [(3, 5, 6)])
    red = np.argwhere(out[..., 0] == 1.0)
    assert red[:, 0].min() == 5 and red[:, 0].max() == 10
    assert red[:, 1].min() == 3 and red[:, 1].max() == 8
    assert out[7, 5, 0] == 0.0  # interior untouched
    assert scene.max() == 0.0


def test_composite_empty_record_is_gray():
    scene = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    assert (visible_composite(scene, record([], (16, 16)), CameraConfig(d_cam=4)) == 0.5).all()
    with pytest.raises(ValueError):
        visible_composite(scene, record([(0, 0, 4)], (16, 16)), CameraConfig(d_cam=4), fill="noise")


def test_composite_zoomed_region_has_higher_fidelity():
    yy, xx = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    scene = np.stack([(np.sin(xx * 1.3) + 1) / 2, (np.cos(yy * 0.9) + 1) / 2, ((xx + yy) % 5) / 4], -1)
    scene = scene.astype(np.float32)
    cfg = CameraConfig(d_cam=16)
    comp = visible_composite(scene, record([(0, 0, 64), (16, 24, 16)], (64, 64)), cfg)
    inside = np.zeros((64, 64), dtype=bool)
    inside[24:40, 16:32] = True
    err = ((comp - scene) ** 2).sum(-1)
    assert err[inside].mean() < err[~inside].mean()
    assert err[inside].max() < 1e-10
    filled = visible_composite(scene, record([(0, 0, 16)], (64, 64)), cfg, fill="interpolate")
    assert (filled != 0.5).any(axis=-1).all()


def test_export_trajectory_files_and_pure_json(tmp_path):
    scene = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    rec = record([(0, 0, 32), (8, 8, 16)], (32, 32))
    rec.losses, rec.rewards, rec.stop_reason = [2.3, 1.0, 0.5], [1.3, 0.5], "max_steps"
    rec.final_prediction = {"label": 2, "probs": [0.1, 0.2, 0.7]}
    cfg = CameraConfig(d_cam=16)
    files_a = export_trajectory(rec, scene, str(tmp_path / "a"), cfg, class_names=["x", "y", "z"])
    files_b = export_trajectory(rec, scene, str(tmp_path / "b"), cfg, class_names=["x", "y", "z"])
    names = sorted(p.rsplit("/", 1)[1] for p in files_a)
    assert names == ["prediction.txt", "record.json", "step01_overlay.png", "step01_visible.png",
                     "step02_overlay.png", "step02_visible.png"]
    for a, b in zip(files_a, files_b):
        assert hashlib.sha256(open(a, "rb").read()).digest() == hashlib.sha256(open(b, "rb").read()).digest()
    caption = (tmp_path / "a" / "prediction.txt").read_text()
    assert "label=z" in caption and "probability=0.7000" in caption
    files = export_trajectory(record([], (32, 32)), scene, str(tmp_path / "empty"), cfg)
    assert any(f.endswith("step00_visible.png") for f in files)


def test_export_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_trajectory(record([], (32, 32)), np.zeros((32, 32, 3)), str(blocker / "sub"), CameraConfig(d_cam=16))


def test_ablation_table_shape(micro_data):
    images, labels = micro_data
    torch.manual_seed(0)
    model = ExplorerModel(micro_config())
    rows = ablation_table(model, images, labels)
    assert len(rows) == 5 and all(rows[0][c] for c in ("patches", "coords", "importances", "latents"))
    assert [sum(not r[c] for c in ("patches", "coords", "importances", "latents")) for r in rows] == [0, 1, 1, 1, 1]
    text = ablation_csv(rows)
    assert text.splitlines()[0] == "patches,coords,importances,latents,accuracy"
    assert model.agent.ablation.components == frozenset()
