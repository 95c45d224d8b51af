"""Baseline glimpse policies, glimpse maps, trajectory export and the state ablation table."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .agent import COMPONENTS, StateAblation
from .env import CameraConfig, EpisodeRecord, GlimpseAction, denormalize_action

BASELINES = ("random_uniform", "raster_grid", "full_then_grid", "center")


class BaselinePolicy:
    """Fixed glimpse regimes used for comparison with the learned agent.

    ``raster_grid`` tiles the scene row-major with glimpses of scale
    ``fixed_z``; ``full_then_grid`` starts with one view of the whole scene.
    Steps past the grid wrap around.
    """

    def __init__(self, kind: str, cfg: CameraConfig, scene_hw, fixed_z: float = 0.0,
                 seed: Optional[int] = None):
        if kind not in BASELINES:
            raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
        if not 0.0 <= fixed_z <= 1.0:
            raise ValueError("fixed_z must lie in [0, 1]")
        self.kind = kind
        self.cfg = cfg
        self.scene_hw = tuple(scene_hw)
        self.fixed_z = fixed_z
        self.rng = np.random.default_rng(seed)
        H, W = self.scene_hw
        _, _, d = denormalize_action(GlimpseAction(0.0, 0.0, fixed_z), (H, W), cfg)
        self.grid = (math.ceil(H / d), math.ceil(W / d))

    def _grid_action(self, i: int) -> GlimpseAction:
        rows, cols = self.grid
        i %= rows * cols
        r, c = divmod(i, cols)
        x = c / (cols - 1) if cols > 1 else 0.0
        y = r / (rows - 1) if rows > 1 else 0.0
        return GlimpseAction(x, y, self.fixed_z)

    def action(self, t: int) -> GlimpseAction:
        if t < 1:
            raise ValueError("steps are numbered from 1")
        if self.kind == "random_uniform":
            return GlimpseAction(*(float(v) for v in self.rng.uniform(0.0, 1.0, 3)))
        if self.kind == "center":
            return GlimpseAction(0.5, 0.5, self.fixed_z)
        if self.kind == "full_then_grid":
            return GlimpseAction(0.0, 0.0, 1.0) if t == 1 else self._grid_action(t - 2)
        return self._grid_action(t - 1)


def baseline_action(policy: BaselinePolicy, t: int) -> GlimpseAction:
    return policy.action(t)


@dataclass
class GlimpseMap:
    """Per-pixel coverage counts averaged over episodes, overall and per step."""

    overall: np.ndarray
    per_step: list
    n_records: int

    @staticmethod
    def _normalize(a: np.ndarray) -> np.ndarray:
        m = a.max()
        return a / m if m > 0 else a.copy()

    def normalized(self) -> "GlimpseMap":
        return GlimpseMap(self._normalize(self.overall), [self._normalize(m) for m in self.per_step],
                          self.n_records)


def accumulate_glimpse_map(records: Sequence[EpisodeRecord], scene_shape) -> GlimpseMap:
    H, W = scene_shape
    overall = np.zeros((H, W), dtype=np.float64)
    per_step: list = []
    for rec in records:
        if tuple(rec.scene_shape) not in ((H, W), (0, 0)):
            raise ValueError(f"record shape {rec.scene_shape} differs from {(H, W)}")
        for t, cap in enumerate(rec.captures):
            x, y, d = cap.coords
            while len(per_step) <= t:
                per_step.append(np.zeros((H, W), dtype=np.float64))
            per_step[t][y:y + d, x:x + d] += 1.0
            overall[y:y + d, x:x + d] += 1.0
    n = max(len(records), 1)
    return GlimpseMap(overall / n, [m / n for m in per_step], len(records))


def draw_overlay(scene: np.ndarray, coords: Sequence, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Scene copy with a one-pixel rectangle outline for each ``(x, y, d)``."""
    out = np.array(scene, dtype=np.float32, copy=True)
    col = np.asarray(color, dtype=np.float32)[: out.shape[2]]
    for x, y, d in coords:
        x1, y1 = x + d - 1, y + d - 1
        out[y, x:x1 + 1] = col
        out[y1, x:x1 + 1] = col
        out[y:y1 + 1, x] = col
        out[y:y1 + 1, x1] = col
    return out


def visible_composite(scene: np.ndarray, record: EpisodeRecord, cfg: CameraConfig,
                      upto: Optional[int] = None, fill: str = "gray") -> np.ndarray:
    """Paste captures back at their scene location; unobserved pixels are mid-gray.

    Captures are resampled from ``d_cam`` back to ``d`` so fidelity matches
    what the model saw.  Finer glimpses are pasted last.
    """
    import torch
    import torch.nn.functional as F

    from .env import crop_resize

    H, W, C = scene.shape
    out = np.full((H, W, C), 0.5, dtype=np.float32)
    seen = np.zeros((H, W), dtype=bool)
    caps = record.captures[:upto] if upto is not None else record.captures
    img = torch.from_numpy(np.ascontiguousarray(scene.transpose(2, 0, 1), dtype=np.float32))
    for cap in sorted(caps, key=lambda c: -c.coords[2]):
        x, y, d = cap.coords
        if cap.pixels is not None:
            px = torch.from_numpy(np.ascontiguousarray(cap.pixels.transpose(2, 0, 1), dtype=np.float32))
        else:
            px = crop_resize(img, x, y, d, cfg.d_cam)
        if px.shape[-1] != d:
            px = F.interpolate(px[None], size=(d, d), mode="bilinear", align_corners=False,
                               antialias=px.shape[-1] > d)[0]
        out[y:y + d, x:x + d] = px.numpy().transpose(1, 2, 0)
        seen[y:y + d, x:x + d] = True
    if fill == "interpolate" and seen.any() and not seen.all():
        from scipy import ndimage

        _, (iy, ix) = ndimage.distance_transform_edt(~seen, return_indices=True)
        out = out[iy, ix]
    elif fill not in ("gray", "interpolate"):
        raise ValueError(f"unknown fill {fill!r}")
    return out


def save_png(array: np.ndarray, path: str) -> None:
    from PIL import Image

    a = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    a = (a * 255.0 + 0.5).astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    Image.fromarray(a).save(path, format="PNG", optimize=False)


def export_trajectory(record: EpisodeRecord, scene: np.ndarray, path: str, cfg: CameraConfig,
                      class_names: Optional[Sequence[str]] = None, fill: str = "gray",
                      include_pixels: bool = False) -> list:
    """Write per-step overlays and visible-pixel composites, plus a caption file beside the JSON record."""
    os.makedirs(path, exist_ok=True)
    written = []
    coords = [c.coords for c in record.captures]
    for t in range(len(record.captures) + 1):
        if t == 0 and record.captures:
            continue
        ov = os.path.join(path, f"step{t:02d}_overlay.png")
        save_png(draw_overlay(scene, coords[:t]), ov)
        vis = os.path.join(path, f"step{t:02d}_visible.png")
        save_png(visible_composite(scene, record, cfg, upto=t, fill=fill), vis)
        written += [ov, vis]
    caption = os.path.join(path, "prediction.txt")
    with open(caption, "w") as fh:
        pred = record.final_prediction or {}
        if "label" in pred:
            name = class_names[pred["label"]] if class_names else str(pred["label"])
            prob = max(pred.get("probs", [float("nan")]))
            fh.write(f"label={name} probability={prob:.4f} steps={len(record.captures)} "
                     f"stop={record.stop_reason}\n")
        else:
            fh.write(f"steps={len(record.captures)} stop={record.stop_reason}\n")
    js = os.path.join(path, "record.json")
    with open(js, "w") as fh:
        fh.write(record.to_json(include_pixels=include_pixels))
    return written + [caption, js]


def ablation_table(model, images, labels, components: Sequence = COMPONENTS, batch_size: int = 256,
                   means: Optional[dict] = None) -> list:
    """Accuracy with each state component replaced by its dataset mean.

    Returns rows shaped like the state-importance table: one flag per
    component (``True`` = kept) plus the accuracy.
    """
    from .training import agent_policy, evaluate, rollout

    if means is None:
        states = []
        for i in range(0, len(images), batch_size):
            imgs = images[i:i + batch_size]
            ro = rollout(model, imgs, labels[i:i + batch_size], agent_policy(model.agent, True),
                         model.cfg.n_glimpses, keep_states=True)
            states += ro.states
        means = StateAblation.estimate_means(states)
    saved = model.agent.ablation
    rows = []
    try:
        for drop in [None, *components]:
            model.agent.ablation = StateAblation(frozenset() if drop is None else {drop}, means)
            acc = evaluate(model, images, labels, mode="fixed", batch_size=batch_size)["accuracy"]
            row = {c: c != drop for c in COMPONENTS}
            row["accuracy"] = acc
            rows.append(row)
    finally:
        model.agent.ablation = saved
    return rows


def ablation_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(list(COMPONENTS) + ["accuracy"])
    for r in rows:
        writer.writerow(["1" if r[c] else "0" for c in COMPONENTS] + [f"{r['accuracy']:.2f}"])
    return buf.getvalue()


def glimpse_map_json(gmap: GlimpseMap) -> str:
    return json.dumps({"n_records": gmap.n_records, "overall": gmap.overall.tolist(),
                       "per_step": [m.tolist() for m in gmap.per_step]})
