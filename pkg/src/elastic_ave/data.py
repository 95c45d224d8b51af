"""Scene datasets: synthetic digit canvases, image folders, simple augmentation."""

from __future__ import annotations

import csv
import os
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .env import SceneImage

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")


def make_digit_scenes(n: int, size: int = 64, digit_size=None, seed: int = 0,
                      colored: bool = True):
    """Paste an 8x8 handwritten digit, upscaled, at a random spot on a dark canvas.

    Returns ``(scenes, labels)`` with scenes shaped ``n x size x size x 3`` in
    [0, 1].  Fully determined by ``seed``.  ``digit_size`` defaults to 3/8 to
    9/16 of the canvas side, which is 24 to 36 pixels on a 64 canvas.
    """
    from sklearn.datasets import load_digits

    if digit_size is None:
        digit_size = (size * 3 // 8, size * 9 // 16)
    if not 1 <= digit_size[0] <= digit_size[1] <= size:
        raise ValueError(f"digit_size {digit_size} does not fit a {size} canvas")
    digits = load_digits()
    images = torch.from_numpy(digits.images.astype(np.float32) / 16.0)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(images), size=n)
    sides = rng.integers(digit_size[0], digit_size[1] + 1, size=n)
    scenes = np.zeros((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        s = int(sides[i])
        glyph = F.interpolate(images[idx[i]][None, None], size=(s, s), mode="bilinear",
                              align_corners=False)[0, 0].clamp(0, 1).numpy()
        y0 = rng.integers(0, size - s + 1)
        x0 = rng.integers(0, size - s + 1)
        tint = rng.uniform(0.6, 1.0, size=3) if colored else np.ones(3)
        bg = rng.uniform(0.0, 0.15, size=3) if colored else np.zeros(3)
        scenes[i] = bg.astype(np.float32)
        patch = glyph[:, :, None] * tint[None, None, :] + (1 - glyph[:, :, None]) * bg[None, None, :]
        scenes[i, y0:y0 + s, x0:x0 + s] = patch.astype(np.float32)
    return np.clip(scenes, 0.0, 1.0), digits.target[idx].astype(np.int64)


def load_scene_dir(path: str, labels_csv: Optional[str] = None, size: Optional[int] = None):
    """Load every image under ``path`` as RGB in [0, 1].

    ``labels_csv`` has ``filename,label`` rows.  ``size`` resizes to a square;
    otherwise all images must already share one shape.
    """
    from PIL import Image

    names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_EXTENSIONS))
    if not names:
        raise FileNotFoundError(f"no images found in {path}")
    labels = None
    if labels_csv is not None:
        with open(labels_csv, newline="") as fh:
            table = {row[0]: int(row[1]) for row in csv.reader(fh)
                     if row and not row[0].startswith("#") and row[1].strip().lstrip("-").isdigit()}
        labels = np.array([table[n] for n in names], dtype=np.int64)
    arrays = []
    for name in names:
        img = Image.open(os.path.join(path, name)).convert("RGB")
        if size is not None:
            img = img.resize((size, size), Image.BILINEAR)
        arrays.append(np.asarray(img, dtype=np.float32) / 255.0)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"images have differing shapes {sorted(shapes)}; pass size=")
    return np.stack(arrays), labels, names


def to_scene_images(X: np.ndarray, y=None, ids=None) -> list[SceneImage]:
    out = []
    for i in range(len(X)):
        out.append(SceneImage(X[i], label=None if y is None else int(y[i]),
                              scene_id=str(i) if ids is None else str(ids[i])))
    return out


def augment(images: torch.Tensor, generator: torch.Generator, scale=(0.7, 1.0),
            hflip: bool = True) -> torch.Tensor:
    """Random horizontal flip plus random resized crop on a BxCxHxW batch."""
    B, _, H, W = images.shape
    out = torch.empty_like(images)
    flips = (torch.rand(B, generator=generator) < 0.5) & hflip
    scales = torch.empty(B).uniform_(scale[0], scale[1], generator=generator)
    offs = torch.rand(B, 2, generator=generator)
    for i in range(B):
        h = max(1, int(round(H * scales[i].sqrt().item())))
        w = max(1, int(round(W * scales[i].sqrt().item())))
        y0 = int(offs[i, 0] * (H - h))
        x0 = int(offs[i, 1] * (W - w))
        crop = images[i:i + 1, :, y0:y0 + h, x0:x0 + w]
        img = F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)[0]
        out[i] = img.flip(-1) if flips[i] else img
    return out.clamp(0.0, 1.0)
