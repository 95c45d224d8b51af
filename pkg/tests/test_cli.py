import json
import os

import pytest
import yaml

from elastic_ave import cli
from elastic_ave.config import load_config, parse_key_values
from elastic_ave.env import EpisodeRecord, GlimpseCapture

MICRO = {
    "scale": "toy", "scene_size": 32, "epochs": 2, "warmup_agent_epochs": 1, "pretrain_epochs": 1,
    "pretrain_glimpse_count": 2, "n_glimpses": 2, "batch_size": 16, "agent_updates_per_batch": 1,
    "warmup_transitions": 8,
    "camera": {"d_cam": 16, "d_patch": 8},
    "encoder": {"depth": 1, "embed_dim": 16, "num_heads": 2, "d_patch": 8},
    "sac": {"hidden": 16, "pool_heads": 4, "batch_size": 8, "buffer_capacity": 100},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "micro.yaml"
    cfg.write_text(yaml.safe_dump(MICRO))
    return root, str(cfg)


def test_parse_key_values_dotted():
    got = parse_key_values("epochs = 5\n# comment\nsac.lr = 1e-3\ncamera.d_cam=16\nhflip = false\n")
    assert got == {"epochs": 5, "sac": {"lr": 1e-3}, "camera": {"d_cam": 16}, "hflip": False}
    with pytest.raises(ValueError):
        parse_key_values("nonsense line")


def test_load_config_layers(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs = 7\nsac.hidden = 32\n")
    cfg = load_config(str(path), scale="toy", overrides={"seed": 3})
    assert (cfg.epochs, cfg.sac.hidden, cfg.seed, cfg.scene_size) == (7, 32, 3, 64)
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"scale": "paper", "task": "reconstruction"}))
    assert load_config(str(js)).encoder.depth == 12
    with pytest.raises(ValueError):
        load_config(scale="huge")


def test_full_command_sequence(workspace, capsys):
    root, cfg = workspace
    ckpt, out = str(root / "model.pt"), str(root / "out")
    common = ["--config", cfg, "--data", "synthetic:24", "--seed", "1"]
    assert cli.main(["pretrain", *common, "--checkpoint", ckpt, "--out", out]) == 0
    assert os.path.exists(ckpt) and os.path.exists(os.path.join(out, "pretrain.csv"))

    assert cli.main(["train", *common, "--init", ckpt, "--checkpoint", ckpt, "--out", out,
                     "--val-data", "synthetic:16"]) == 0
    log = json.load(open(os.path.join(out, "runlog.json")))
    assert [e["phase"] for e in log["epochs"]] == ["agent", "backbone"]

    capsys.readouterr()
    assert cli.main(["eval", *common, "--checkpoint", ckpt, "--out", out,
                     "--policy", "agent", "random_uniform"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert {(r["policy"], r["mode"]) for r in rows} == {("agent", "fixed"), ("agent", "stopping"),
                                                          ("random_uniform", "fixed"),
                                                          ("random_uniform", "stopping")}
    assert all(r["pixel_pct"] == 50.0 for r in rows if r["mode"] == "fixed")
    header = open(os.path.join(out, "eval.csv")).readline().strip().split(",")
    assert {"accuracy", "mean_glimpses", "pixel_pct", "policy", "mode"} <= set(header)

    assert cli.main(["ablate", *common, "--checkpoint", ckpt, "--out", out]) == 0
    assert open(os.path.join(out, "ablation.csv")).readline().startswith("patches,coords,importances,latents")

    vis = str(root / "vis")
    assert cli.main(["visualize", *common, "--checkpoint", ckpt, "--out", vis, "-n", "2", "--stopping"]) == 0
    files = set(os.listdir(vis))
    assert {"scene0000", "scene0001", "glimpse_map.json", "glimpse_map_raw_all.png",
            "glimpse_map_normalized_all.png"} <= files
    assert "record.json" in os.listdir(os.path.join(vis, "scene0000"))


def test_invariant_violation_exit_code(workspace, monkeypatch):
    root, cfg = workspace
    ckpt = str(root / "model_iv.pt")
    assert cli.main(["pretrain", "--config", cfg, "--data", "synthetic:8", "--checkpoint", ckpt,
                     "--out", str(root / "iv"), "--pretrain-epochs", "0"]) == 0
    bad = EpisodeRecord(scene_id="0", scene_shape=(32, 32), losses=[1.0, 0.5], rewards=[0.2],
                        captures=[GlimpseCapture(None, (0, 0, 16), 1)])
    monkeypatch.setattr(cli, "rollout_records", lambda *a, **k: [bad])
    assert cli.main(["eval", "--config", cfg, "--data", "synthetic:8", "--checkpoint", ckpt,
                     "--out", str(root / "iv")]) == cli.EXIT_INVARIANT


def test_glimpse_outside_scene_is_invariant_violation():
    cfg = load_config(scale="toy")
    rec = EpisodeRecord(scene_id="0", scene_shape=(64, 64), losses=[1.0, 0.5], rewards=[0.5],
                        captures=[GlimpseCapture(None, (60, 0, 16), 1)])
    with pytest.raises(cli.InvariantViolation):
        cli._check_records([rec], cfg)
