"""scikit-learn style front end.

``GlimpseClassifier`` and ``GlimpseReconstructor`` wrap the full pipeline
(random-glimpse pretraining, then alternating backbone/agent training) behind
``fit`` / ``predict`` / ``transform`` so they compose with sklearn tooling.
Scenes are ``n x H x W x C`` arrays in [0, 1] (``uint8`` is rescaled).
"""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .backbone import EncoderConfig
from .env import CameraConfig
from .training import (ExplorerModel, Trainer, TrainConfig, evaluate, load_checkpoint, rollout_records,
                       save_checkpoint)

log = logging.getLogger(__name__)


def check_scenes(X, ensure_square: bool = True) -> np.ndarray:
    """Validate scenes and return a float32 ``n x H x W x C`` array in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected scenes shaped (n, H, W[, C]), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no scenes given")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("scenes contain NaN or inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("scene pixels must lie in [0, 1]")
    if X.shape[-1] == 1:
        X = np.repeat(X, 3, axis=-1)
    if ensure_square and X.shape[1] != X.shape[2]:
        raise ValueError(f"scenes must be square, got {X.shape[1]}x{X.shape[2]}")
    return X


def _to_tensor(X: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))


class _GlimpseBase(BaseEstimator):
    _task = "classification"

    def __init__(self, n_glimpses=3, d_cam=16, d_patch=8, d_min=None, d_max=None, depth=2, embed_dim=64,
                 num_heads=4, agent_hidden=64, agent_heads=8, epochs=24, warmup_agent_epochs=4,
                 pretrain_epochs=40, pretrain_glimpses=6, lr=1e-3, agent_lr=1e-3, batch_size=128,
                 stop_threshold=0.85, validation_fraction=0.1, random_state=0, verbose=False):
        self.n_glimpses = n_glimpses
        self.d_cam = d_cam
        self.d_patch = d_patch
        self.d_min = d_min
        self.d_max = d_max
        self.depth = depth
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.agent_hidden = agent_hidden
        self.agent_heads = agent_heads
        self.epochs = epochs
        self.warmup_agent_epochs = warmup_agent_epochs
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_glimpses = pretrain_glimpses
        self.lr = lr
        self.agent_lr = agent_lr
        self.batch_size = batch_size
        self.stop_threshold = stop_threshold
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _make_config(self, scene_size: int, **extra) -> TrainConfig:
        # Unexposed settings (replay size, update counts, ...) follow the toy preset.
        base = TrainConfig.toy(task=self._task)
        return replace(
            base, scene_size=scene_size, epochs=self.epochs,
            warmup_agent_epochs=self.warmup_agent_epochs, pretrain_epochs=self.pretrain_epochs,
            pretrain_glimpse_count=self.pretrain_glimpses, pretrain_min_glimpses=1,
            lr_backbone=self.lr, n_glimpses=self.n_glimpses, stop_threshold=self.stop_threshold,
            seed=self.random_state, batch_size=self.batch_size,
            camera=CameraConfig(d_cam=self.d_cam, d_min=self.d_min, d_max=self.d_max, d_patch=self.d_patch),
            encoder=EncoderConfig(depth=self.depth, embed_dim=self.embed_dim, num_heads=self.num_heads,
                                  d_patch=self.d_patch),
            sac=replace(base.sac, hidden=self.agent_hidden, pool_heads=self.agent_heads, lr=self.agent_lr),
            **extra)

    def _split(self, n: int):
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(n)
        n_val = int(round(n * self.validation_fraction))
        return order[n_val:], order[:n_val]

    def _fit_model(self, X: np.ndarray, y: Optional[np.ndarray], **extra):
        torch.manual_seed(self.random_state)
        cfg = self._make_config(X.shape[1], **extra)
        model = ExplorerModel(cfg)
        train_idx, val_idx = self._split(len(X))
        images = _to_tensor(X)
        labels = None if y is None else torch.as_tensor(y, dtype=torch.long)
        val_images = images[val_idx] if len(val_idx) else None
        val_labels = labels[val_idx] if (labels is not None and len(val_idx)) else None
        trainer = Trainer(model, images[train_idx], None if labels is None else labels[train_idx],
                          val_images, val_labels)
        if self.verbose:
            logging.getLogger("elastic_ave").setLevel(logging.INFO)
        self.pretrain_history_ = trainer.pretrain()
        trainer.fit()
        model.eval()
        self.model_ = model
        self.run_log_ = trainer.log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.scene_shape_ = X.shape[1:]
        return self

    def _check_input(self, X) -> torch.Tensor:
        check_is_fitted(self, "model_")
        X = check_scenes(X)
        if X.shape[1:] != tuple(self.scene_shape_):
            raise ValueError(f"scenes shaped {X.shape[1:]}, model was fit on {self.scene_shape_}")
        return _to_tensor(X)

    def explore(self, X, y=None, stopping: bool = False, policy: str = "agent", include_pixels=False):
        """Run exploration episodes and return one ``EpisodeRecord`` per scene."""
        images = self._check_input(X)
        labels = None if y is None else torch.as_tensor(y, dtype=torch.long)
        if labels is None and self._task == "classification":
            labels = torch.zeros(len(images), dtype=torch.long)
        _, rollouts = evaluate(self.model_, images, labels, mode="stopping" if stopping else "fixed",
                               policy=policy, return_rollouts=True, seed=self.random_state)
        records, offset = [], 0
        for ro in rollouts:
            n = ro.losses.shape[0]
            records += rollout_records(ro, scene_ids=list(range(offset, offset + n)),
                                       scene_hw=images.shape[-2:], include_pixels=include_pixels,
                                       images=images[offset:offset + n], cfg=self.model_.camera)
            offset += n
        return records

    def save(self, path: str) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path, extra={"params": self.get_params(),
                                                  "scene_shape": list(self.scene_shape_),
                                                  "classes": getattr(self, "classes_", None)})

    @classmethod
    def load(cls, path: str):
        model = load_checkpoint(path)
        extra = torch.load(path, map_location="cpu", weights_only=False)["extra"]
        est = cls(**extra.get("params", {}))
        est.model_ = model.eval()
        est.scene_shape_ = tuple(extra["scene_shape"])
        est.n_features_in_ = int(np.prod(est.scene_shape_))
        if extra.get("classes") is not None:
            est.classes_ = np.asarray(extra["classes"])
        return est


class GlimpseClassifier(_GlimpseBase, ClassifierMixin):
    """Classify scenes from a few actively chosen glimpses."""

    _task = "classification"

    def fit(self, X, y):
        X = check_scenes(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        self.classes_ = unique_labels(y)
        encoded = np.searchsorted(self.classes_, y)
        return self._fit_model(X, encoded, num_classes=len(self.classes_))

    def predict_proba(self, X, stopping: bool = False):
        images = self._check_input(X)
        _, rollouts = evaluate(self.model_, images, torch.zeros(len(images), dtype=torch.long),
                               mode="stopping" if stopping else "fixed", return_rollouts=True)
        return torch.cat([ro.output.softmax(-1) for ro in rollouts]).numpy()

    def predict(self, X, stopping: bool = False):
        check_is_fitted(self, "classes_")
        return self.classes_[self.predict_proba(X, stopping).argmax(1)]

    def transform(self, X):
        """CLS latent after the final glimpse, one row per scene."""
        images = self._check_input(X)
        _, rollouts = evaluate(self.model_, images, torch.zeros(len(images), dtype=torch.long),
                               return_rollouts=True)
        with torch.no_grad():
            return torch.cat([self.model_.backbone(ro.bundle).cls for ro in rollouts]).numpy()


class GlimpseReconstructor(_GlimpseBase, TransformerMixin):
    """Reconstruct whole scenes from a few actively chosen glimpses."""

    _task = "reconstruction"

    def __init__(self, n_glimpses=3, d_cam=16, d_patch=8, d_min=None, d_max=None, depth=2, embed_dim=64,
                 num_heads=4, agent_hidden=64, agent_heads=8, epochs=24, warmup_agent_epochs=4,
                 pretrain_epochs=20, pretrain_glimpses=12, lr=2e-3, agent_lr=1e-3, batch_size=64,
                 stop_threshold=0.85, validation_fraction=0.1, random_state=0, verbose=False,
                 decoder_dim=64, decoder_depth=2):
        super().__init__(n_glimpses, d_cam, d_patch, d_min, d_max, depth, embed_dim, num_heads, agent_hidden,
                         agent_heads, epochs, warmup_agent_epochs, pretrain_epochs, pretrain_glimpses, lr,
                         agent_lr, batch_size, stop_threshold, validation_fraction, random_state, verbose)
        self.decoder_dim = decoder_dim
        self.decoder_depth = decoder_depth

    def fit(self, X, y=None):
        X = check_scenes(X)
        return self._fit_model(X, None, decoder_dim=self.decoder_dim, decoder_depth=self.decoder_depth)

    def transform(self, X):
        """Reconstructed scenes, ``n x H x W x C`` clamped to [0, 1]."""
        images = self._check_input(X)
        _, rollouts = evaluate(self.model_, images, None, return_rollouts=True)
        out = torch.cat([ro.output for ro in rollouts]).clamp(0.0, 1.0)
        return out.permute(0, 2, 3, 1).numpy()

    def score(self, X, y=None):
        """Negative mean per-scene RMSE (higher is better)."""
        images = self._check_input(X)
        return -evaluate(self.model_, images, None)["rmse"]
