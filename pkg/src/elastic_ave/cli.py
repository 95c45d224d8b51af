"""Command line entry point: ``elastic-ave {pretrain,train,eval,ablate,visualize}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from .config import load_config
from .data import load_scene_dir, make_digit_scenes
from .evaluation import (BASELINES, ablation_csv, ablation_table, accumulate_glimpse_map, export_trajectory,
                         glimpse_map_json, save_png)
from .training import (ExplorerModel, Trainer, evaluate, load_checkpoint, rollout_records, save_checkpoint)

log = logging.getLogger("elastic_ave")

EXIT_INVARIANT = 3


class InvariantViolation(RuntimeError):
    pass


def load_data(source: str, labels: str | None, seed: int, size: int | None):
    """``synthetic:N`` for generated digit scenes, otherwise a directory of images."""
    if source.startswith("synthetic"):
        n = int(source.split(":", 1)[1]) if ":" in source else 1000
        X, y = make_digit_scenes(n, size=size or 64, seed=seed)
        return X, y
    X, y, _ = load_scene_dir(source, labels, size=size)
    return X, y


def _tensors(X, y):
    images = torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))
    labels = None if y is None else torch.as_tensor(y, dtype=torch.long)
    return images, labels


def _write_metrics(rows: list, out: str, stem: str) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, f"{stem}.json"), "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
    keys = sorted({k for r in rows for k in r})
    with open(os.path.join(out, f"{stem}.csv"), "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r.get(k, "")) for k in keys) + "\n")


def _check_records(records, cfg) -> None:
    for rec in records:
        try:
            rec.check(atol=1e-5)
        except ValueError as exc:
            raise InvariantViolation(str(exc)) from exc
        if len(rec.captures) > cfg.n_glimpses:
            raise InvariantViolation("episode longer than the glimpse budget")
        H, W = rec.scene_shape
        for cap in rec.captures:
            x, y, d = cap.coords
            if x < 0 or y < 0 or x + d > W or y + d > H:
                raise InvariantViolation(f"glimpse {cap.coords} leaves the scene")


def _build_model(args) -> ExplorerModel:
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.pretrain_epochs is not None:
        overrides["pretrain_epochs"] = args.pretrain_epochs
    cfg = load_config(args.config, scale=args.scale, task=args.task, overrides=overrides)
    return ExplorerModel(cfg)


def cmd_pretrain(args) -> int:
    torch.manual_seed(args.seed)
    model = _build_model(args)
    X, y = load_data(args.data, args.labels, args.seed, model.cfg.scene_size)
    images, labels = _tensors(X, y)
    trainer = Trainer(model, images, labels)
    history = trainer.pretrain()
    save_checkpoint(model, args.checkpoint)
    _write_metrics([{"epoch": i, "loss": v} for i, v in enumerate(history)], args.out, "pretrain")
    return 0


def cmd_train(args) -> int:
    torch.manual_seed(args.seed)
    if args.init:
        model = load_checkpoint(args.init)
    else:
        model = _build_model(args)
    cfg = model.cfg
    X, y = load_data(args.data, args.labels, args.seed, cfg.scene_size)
    Xv, yv = load_data(args.val_data, args.labels, args.seed + 1, cfg.scene_size) if args.val_data else (None, None)
    images, labels = _tensors(X, y)
    val_images, val_labels = _tensors(Xv, yv) if Xv is not None else (None, None)
    trainer = Trainer(model, images, labels, val_images, val_labels)
    if not args.init:
        trainer.pretrain()
    trainer.fit()
    save_checkpoint(model, args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "runlog.json"), "w") as fh:
        fh.write(trainer.log.to_json())
    with open(os.path.join(args.out, "runlog.csv"), "w") as fh:
        fh.write(trainer.log.to_csv())
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint).eval()
    cfg = model.cfg
    X, y = load_data(args.data, args.labels, args.seed, cfg.scene_size)
    images, labels = _tensors(X, y)
    modes = ["fixed", "stopping"] if args.mode == "both" else [args.mode]
    rows = []
    for policy in args.policy:
        for mode in modes:
            metrics, rollouts = evaluate(model, images, labels, mode=mode, threshold=args.threshold,
                                         policy=policy, seed=args.seed, return_rollouts=True)
            recs = [r for ro in rollouts for r in rollout_records(ro, scene_hw=images.shape[-2:])]
            _check_records(recs, cfg)
            rows.append({"policy": policy, "mode": mode, **metrics})
            print(json.dumps(rows[-1], sort_keys=True))
    _write_metrics(rows, args.out, "eval")
    return 0


def cmd_ablate(args) -> int:
    model = load_checkpoint(args.checkpoint).eval()
    X, y = load_data(args.data, args.labels, args.seed, model.cfg.scene_size)
    images, labels = _tensors(X, y)
    rows = ablation_table(model, images, labels)
    os.makedirs(args.out, exist_ok=True)
    text = ablation_csv(rows)
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_visualize(args) -> int:
    model = load_checkpoint(args.checkpoint).eval()
    cfg = model.cfg
    X, y = load_data(args.data, args.labels, args.seed, cfg.scene_size)
    images, labels = _tensors(X, y)
    mode = "stopping" if args.stopping else "fixed"
    _, rollouts = evaluate(model, images, labels, mode=mode, policy=args.policy, return_rollouts=True)
    records, off = [], 0
    for ro in rollouts:
        n = ro.losses.shape[0]
        records += rollout_records(ro, scene_ids=list(range(off, off + n)), scene_hw=images.shape[-2:],
                                   include_pixels=True, images=images[off:off + n], cfg=cfg.camera)
        off += n
    _check_records(records, cfg)
    os.makedirs(args.out, exist_ok=True)
    for i, rec in enumerate(records[: args.n]):
        export_trajectory(rec, X[i], os.path.join(args.out, f"scene{i:04d}"), cfg.camera,
                          fill="interpolate" if args.interpolate else "gray")
    gmap = accumulate_glimpse_map(records, images.shape[-2:])
    for name, m in (("raw", gmap), ("normalized", gmap.normalized())):
        save_png(m.overall, os.path.join(args.out, f"glimpse_map_{name}_all.png"))
        for t, step_map in enumerate(m.per_step, 1):
            save_png(step_map, os.path.join(args.out, f"glimpse_map_{name}_t{t:02d}.png"))
    with open(os.path.join(args.out, "glimpse_map.json"), "w") as fh:
        fh.write(glimpse_map_json(gmap))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastic-ave", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=False):
        p.add_argument("--config", help="YAML, JSON or key=value config file")
        p.add_argument("--scale", choices=("desk", "paper", "toy"), default="toy")
        p.add_argument("--task", choices=("classification", "reconstruction"))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--device", default="cpu", help="only 'cpu' is supported")
        p.add_argument("--data", default="synthetic:2000", help="'synthetic:N' or an image directory")
        p.add_argument("--labels", help="CSV of filename,label for directory data")
        p.add_argument("--out", default="runs/latest")
        p.add_argument("--checkpoint", required=checkpoint_required, default=None if checkpoint_required
                       else "runs/latest/model.pt")
        p.add_argument("--epochs", type=int)
        p.add_argument("--pretrain-epochs", type=int)

    p = sub.add_parser("pretrain", help="random-glimpse pretraining of the backbone")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="alternating backbone / agent training")
    common(p)
    p.add_argument("--init", help="start from this (pretrained) checkpoint")
    p.add_argument("--val-data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fixed-budget and early-stopping evaluation")
    common(p, checkpoint_required=True)
    p.add_argument("--mode", choices=("fixed", "stopping", "both"), default="both")
    p.add_argument("--threshold", type=float)
    p.add_argument("--policy", nargs="+", default=["agent"], choices=("agent",) + BASELINES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="state-component mean-replacement table")
    common(p, checkpoint_required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="trajectory images and average glimpse maps")
    common(p, checkpoint_required=True)
    p.add_argument("-n", type=int, default=8, help="number of scenes to export")
    p.add_argument("--stopping", action="store_true")
    p.add_argument("--interpolate", action="store_true", help="fill unobserved pixels from nearest glimpse")
    p.add_argument("--policy", default="agent", choices=("agent",) + BASELINES)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.device != "cpu":
        log.warning("device %r requested; running on cpu", args.device)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
