"""Simulated zoom camera over a stored scene, exposed as an episodic environment.

A glimpse is a square scene region given by its top-left corner and side
length ``d``.  The camera always returns ``d_cam x d_cam`` pixels, so wide
glimpses are downsampled and narrow ones keep full detail.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class SceneImage:
    pixels: np.ndarray
    label: Optional[int] = None
    dense_target: Optional[np.ndarray] = None
    scene_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3:
            raise ValueError(f"scene must be HxWxC, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("scene contains non-finite pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("scene pixels must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class CameraConfig:
    """Camera geometry.

    ``d_min`` defaults to ``d_cam`` (no digital upscaling) and ``d_max`` to
    the short side of whatever scene the camera is pointed at.
    """

    d_cam: int = 32
    d_min: Optional[int] = None
    d_max: Optional[int] = None
    d_patch: int = 16

    def __post_init__(self):
        if self.d_cam < 1 or self.d_patch < 1:
            raise ValueError("d_cam and d_patch must be positive")
        lo = self.d_cam if self.d_min is None else self.d_min
        if lo < 1:
            raise ValueError("d_min must be >= 1")
        if self.d_max is not None and lo > self.d_max:
            raise ValueError(f"d_min={lo} exceeds d_max={self.d_max}")

    def field_of_view(self, height: int, width: int) -> tuple[int, int]:
        """Resolve ``(d_min, d_max)`` for a scene of the given size."""
        d_min = self.d_cam if self.d_min is None else self.d_min
        d_max = min(height, width) if self.d_max is None else self.d_max
        if min(height, width) < d_min:
            raise ValueError(f"scene {height}x{width} is smaller than d_min={d_min}")
        if d_max > min(height, width):
            raise ValueError(f"d_max={d_max} exceeds scene size {height}x{width}")
        if d_min > d_max:
            raise ValueError(f"d_min={d_min} exceeds d_max={d_max}")
        return d_min, d_max

    @property
    def patches_per_side(self) -> int:
        return math.ceil(self.d_cam / self.d_patch)

    @property
    def patches_per_glimpse(self) -> int:
        return self.patches_per_side ** 2


@dataclass(frozen=True)
class GlimpseAction:
    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, a) -> "GlimpseAction":
        a = np.clip(np.asarray(a, dtype=np.float64).reshape(3), 0.0, 1.0)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def clamped(self) -> "GlimpseAction":
        return GlimpseAction.from_array(self.as_array())

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass
class GlimpseCapture:
    pixels: np.ndarray
    coords: tuple[int, int, int]
    step_index: int


@dataclass
class EpisodeRecord:
    scene_id: str = ""
    scene_shape: tuple[int, int] = (0, 0)
    captures: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    stop_reason: Optional[str] = None
    final_prediction: Optional[dict] = None

    @property
    def initial_loss(self) -> Optional[float]:
        return self.losses[0] if self.losses else None

    def check(self, atol: float = 1e-6) -> None:
        """Raise if rewards are not the successive loss differences."""
        if self.losses and len(self.rewards) != len(self.losses) - 1:
            raise ValueError("expected one reward per step plus the initial loss")
        if self.rewards and len(self.rewards) != len(self.captures):
            raise ValueError("rewards and captures have different lengths")
        for t, r in enumerate(self.rewards, start=1):
            if abs(r - (self.losses[t - 1] - self.losses[t])) > atol:
                raise ValueError(f"reward at step {t} is not L_(t-1) - L_t")

    def to_dict(self, include_pixels: bool = False) -> dict:
        steps = []
        for cap, act in zip(self.captures, self.actions):
            x, y, d = cap.coords
            entry = {
                "step": cap.step_index,
                "action": [act.x, act.y, act.z],
                "x_abs": int(x),
                "y_abs": int(y),
                "d": int(d),
            }
            if include_pixels:
                px = np.ascontiguousarray(cap.pixels, dtype=np.float32)
                entry["pixels_shape"] = list(px.shape)
                entry["pixels_b64"] = base64.b64encode(px.tobytes()).decode("ascii")
            steps.append(entry)
        return {
            "scene_id": self.scene_id,
            "scene_shape": list(self.scene_shape),
            "steps": steps,
            "losses": [float(v) for v in self.losses],
            "rewards": [float(v) for v in self.rewards],
            "stop_reason": self.stop_reason,
            "final_prediction": self.final_prediction,
        }

    def to_json(self, include_pixels: bool = False) -> str:
        return json.dumps(self.to_dict(include_pixels), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeRecord":
        rec = cls(
            scene_id=data.get("scene_id", ""),
            scene_shape=tuple(data.get("scene_shape", (0, 0))),
            losses=list(data.get("losses", [])),
            rewards=list(data.get("rewards", [])),
            stop_reason=data.get("stop_reason"),
            final_prediction=data.get("final_prediction"),
        )
        for s in data.get("steps", []):
            if "pixels_b64" in s:
                raw = base64.b64decode(s["pixels_b64"])
                px = np.frombuffer(raw, dtype=np.float32).reshape(s["pixels_shape"]).copy()
            else:
                px = None
            rec.captures.append(GlimpseCapture(px, (s["x_abs"], s["y_abs"], s["d"]), s["step"]))
            rec.actions.append(GlimpseAction(*s["action"]))
        return rec

    @classmethod
    def from_json(cls, text: str) -> "EpisodeRecord":
        return cls.from_dict(json.loads(text))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _scene_hw(scene) -> tuple[int, int]:
    if isinstance(scene, SceneImage):
        return scene.height, scene.width
    if isinstance(scene, (tuple, list)) and len(scene) == 2:
        return int(scene[0]), int(scene[1])
    return np.shape(scene)[0], np.shape(scene)[1]


def denormalize_action(action: GlimpseAction, scene, cfg: CameraConfig) -> tuple[int, int, int]:
    """Map a normalized ``(x, y, z)`` action to ``(x_abs, y_abs, d)`` in scene pixels.

    ``x`` and ``y`` are normalized by the valid placement range ``W - d`` and
    ``H - d`` so that every action yields a glimpse inside the scene.
    """
    height, width = _scene_hw(scene)
    d_min, d_max = cfg.field_of_view(height, width)
    a = action.clamped()
    d = _round_half_up(d_min + a.z * (d_max - d_min))
    d = min(max(d, d_min), d_max)
    x_abs = _round_half_up(a.x * (width - d))
    y_abs = _round_half_up(a.y * (height - d))
    return x_abs, y_abs, d


def crop_resize(image: torch.Tensor, x: int, y: int, d: int, d_cam: int) -> torch.Tensor:
    """Crop ``image[:, y:y+d, x:x+d]`` (CxHxW) and resample it to ``d_cam``.

    Bilinear with half-pixel centres; antialiased when shrinking.
    """
    crop = image[:, y:y + d, x:x + d]
    if d == d_cam:
        return crop.clone()
    out = F.interpolate(crop[None], size=(d_cam, d_cam), mode="bilinear",
                        align_corners=False, antialias=d > d_cam)
    return out[0]


def capture_glimpse(scene: SceneImage, action: GlimpseAction, cfg: CameraConfig,
                    step_index: int = 1) -> GlimpseCapture:
    x, y, d = denormalize_action(action, scene, cfg)
    img = torch.from_numpy(np.ascontiguousarray(scene.pixels.transpose(2, 0, 1)))
    px = crop_resize(img, x, y, d, cfg.d_cam).numpy().transpose(1, 2, 0)
    return GlimpseCapture(np.ascontiguousarray(px), (x, y, d), step_index)


def capture_batch(images: torch.Tensor, actions: torch.Tensor, cfg: CameraConfig):
    """Batched capture used by the training loops.

    ``images`` is BxCxHxW, ``actions`` Bx3 in [0, 1].  Returns the
    ``B x C x d_cam x d_cam`` captures and a ``B x 3`` long tensor of
    ``(x_abs, y_abs, d)``.
    """
    B, _, H, W = images.shape
    acts = actions.detach().double().clamp(0.0, 1.0).cpu().numpy()
    out = images.new_empty((B, images.shape[1], cfg.d_cam, cfg.d_cam))
    coords = torch.empty((B, 3), dtype=torch.long)
    for i in range(B):
        x, y, d = denormalize_action(GlimpseAction(*acts[i]), (H, W), cfg)
        out[i] = crop_resize(images[i], x, y, d, cfg.d_cam)
        coords[i, 0], coords[i, 1], coords[i, 2] = x, y, d
    return out, coords


def pixel_percentage(captures, scene, cfg: CameraConfig) -> float:
    """Sensor pixels gathered so far as a percentage of the scene area.

    ``captures`` may be a list of captures or a plain count.
    """
    n = captures if isinstance(captures, (int, np.integer)) else len(captures)
    height, width = _scene_hw(scene)
    return n * cfg.d_cam ** 2 / (height * width) * 100.0


def should_stop(class_probs, threshold: float, t: int, T: int) -> bool:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if t >= T:
        return True
    p = np.asarray(class_probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-5:
        raise ValueError("class probabilities must sum to 1")
    return bool(p.max() >= threshold)


class EpisodeFinished(RuntimeError):
    pass


class GlimpseEnv:
    """One scene, one episode at a time.

    ``evaluator`` is an optional callable mapping the list of captures so far
    to ``(loss, class_probs)``.  When given, the environment records per-step
    losses and rewards and applies the confidence stopping rule.
    """

    def __init__(self, cfg: CameraConfig, max_steps: int = 12, threshold: float = 1.0,
                 evaluator: Optional[Callable] = None, scene: Optional[SceneImage] = None):
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 < threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
        self.cfg = cfg
        self.max_steps = max_steps
        self.threshold = threshold
        self.evaluator = evaluator
        self.scene = scene
        self.record = EpisodeRecord()
        self.t = 0
        self.done = False
        self._probs = None

    @property
    def history(self) -> list:
        return self.record.captures

    def reset(self, scene: Optional[SceneImage] = None) -> list:
        if scene is not None:
            self.scene = scene
        if self.scene is None:
            raise ValueError("no scene to explore")
        self.cfg.field_of_view(self.scene.height, self.scene.width)
        self.record = EpisodeRecord(scene_id=self.scene.scene_id,
                                    scene_shape=(self.scene.height, self.scene.width))
        self.t = 0
        self.done = False
        self._probs = None
        if self.evaluator is not None:
            loss, self._probs = self.evaluator([])
            self.record.losses.append(float(loss))
        return self.history

    def step(self, action: GlimpseAction) -> tuple[GlimpseCapture, bool]:
        if self.done:
            raise EpisodeFinished("episode is finished; call reset()")
        if self.scene is None:
            raise ValueError("call reset() before step()")
        action = action.clamped()
        self.t += 1
        cap = capture_glimpse(self.scene, action, self.cfg, step_index=self.t)
        self.record.captures.append(cap)
        self.record.actions.append(action)
        if self.evaluator is not None:
            loss, self._probs = self.evaluator(self.history)
            self.record.losses.append(float(loss))
            self.record.rewards.append(self.record.losses[-2] - self.record.losses[-1])
        if self.t >= self.max_steps:
            self.done, self.record.stop_reason = True, "max_steps"
        elif self._probs is not None and should_stop(self._probs, self.threshold, self.t, self.max_steps):
            self.done, self.record.stop_reason = True, "confidence"
        if self.done and self._probs is not None:
            p = np.asarray(self._probs, dtype=np.float64)
            self.record.final_prediction = {"label": int(p.argmax()), "probs": p.tolist()}
        return cap, self.done


class VectorGlimpseEnv:
    """Lockstep wrapper over independent environments."""

    def __init__(self, envs: Sequence[GlimpseEnv]):
        self.envs = list(envs)

    def reset(self, scenes: Optional[Sequence[SceneImage]] = None):
        if scenes is None:
            return [e.reset() for e in self.envs]
        return [e.reset(s) for e, s in zip(self.envs, scenes)]

    def step(self, actions: Sequence[GlimpseAction]):
        results = []
        for env, act in zip(self.envs, actions):
            results.append(None if env.done else env.step(act))
        return results

    @property
    def all_done(self) -> bool:
        return all(e.done for e in self.envs)
