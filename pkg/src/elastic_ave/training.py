"""Pretraining, the alternating backbone/agent schedule, evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .agent import AgentState, ReplayBuffer, SACAgent, SACConfig, Transition
from .backbone import ElasticViT, EncoderConfig, PatchBundle, attention_rollout, split_glimpse
from .data import augment
from .env import CameraConfig, EpisodeRecord, GlimpseAction, GlimpseCapture, capture_batch, pixel_percentage
from .heads import ClassifierHead, DenseDecoder, DenseQueryGrid, ce_loss, distill_kl_loss, rmse_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 3
TASKS = ("classification", "reconstruction")


@dataclass
class TrainConfig:
    task: str = "classification"
    num_classes: int = 10
    scene_size: int = 224
    epochs: int = 30
    warmup_agent_epochs: int = 3
    pretrain_epochs: int = 20
    pretrain_glimpse_count: int = 16
    pretrain_min_glimpses: Optional[int] = None
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    lr_floor: float = 1e-8
    n_glimpses: int = 12
    stop_threshold: float = 0.85
    seed: int = 0
    batch_size: int = 64
    agent_updates_per_batch: int = 16
    warmup_transitions: int = 256
    patience: int = 10
    augment: bool = False
    hflip: bool = True
    grad_clip: float = 1.0
    stochastic_backbone_rollouts: bool = True
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    camera: CameraConfig = field(default_factory=CameraConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sac: SACConfig = field(default_factory=SACConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not self.warmup_agent_epochs < self.epochs:
            raise ValueError("warmup_agent_epochs must be smaller than epochs")
        if min(self.lr_backbone, self.sac.lr, self.lr_floor) <= 0:
            raise ValueError("learning rates must be positive")
        if self.camera.d_patch != self.encoder.d_patch:
            raise ValueError("camera and encoder disagree on d_patch")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, task: str = "classification", **kw) -> "TrainConfig":
        base = dict(task=task, epochs=100, warmup_agent_epochs=30, pretrain_epochs=600,
                    pretrain_glimpse_count=196, lr_backbone=1e-5 if task == "classification" else 1e-4,
                    n_glimpses=12, camera=CameraConfig(d_cam=32, d_patch=16),
                    encoder=EncoderConfig.paper_scale(d_patch=16), decoder_dim=512, decoder_depth=8,
                    decoder_heads=16)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, task: str = "classification", **kw) -> "TrainConfig":
        """The 64x64 digit setting: 3 glimpses of 16x16 pixels."""
        base = dict(task=task, scene_size=64, epochs=24, warmup_agent_epochs=4, pretrain_epochs=40,
                    pretrain_glimpse_count=6, pretrain_min_glimpses=1, lr_backbone=1e-3, n_glimpses=3,
                    batch_size=128, agent_updates_per_batch=8, hflip=False, patience=10,
                    camera=CameraConfig(d_cam=16, d_patch=8),
                    encoder=EncoderConfig(depth=2, embed_dim=64, num_heads=4, d_patch=8),
                    sac=SACConfig(hidden=64, pool_heads=8, buffer_capacity=30_000, batch_size=64, lr=1e-3),
                    decoder_dim=64, decoder_depth=2)
        if task == "reconstruction":
            # Pixel regression wants more, smaller steps and denser random coverage.
            base.update(pretrain_epochs=20, pretrain_glimpse_count=12, batch_size=64, lr_backbone=2e-3)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        nested = {"camera": CameraConfig, "encoder": EncoderConfig, "sac": SACConfig}
        for key, typ in nested.items():
            if isinstance(data.get(key), dict):
                data[key] = typ(**data[key])
        return cls(**data)

    def config_hash(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def schedule(epoch: int, cfg: TrainConfig) -> str:
    """``'agent'`` during warmup, then alternate starting with ``'backbone'``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_agent_epochs:
        return "agent"
    return "backbone" if (epoch - cfg.warmup_agent_epochs) % 2 == 0 else "agent"


def cosine_lr(step: int, total_steps: int, base: float, floor: float) -> float:
    """Half-cycle cosine decay from ``base`` to ``floor`` over ``total_steps``."""
    if total_steps <= 0:
        return base
    progress = min(max(step / total_steps, 0.0), 1.0)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class ExplorerModel(nn.Module):
    """Backbone with its task head next to the SAC agent, plus the batched exploration loop."""

    def __init__(self, cfg: TrainConfig, teacher: Optional[Callable] = None):
        super().__init__()
        self.cfg = cfg
        self.teacher = teacher
        enc = cfg.encoder
        self.backbone = ElasticViT(enc)
        if cfg.task == "classification":
            self.head = ClassifierHead(enc.embed_dim, cfg.num_classes)
        else:
            grid = DenseQueryGrid(cfg.scene_size, cfg.scene_size, enc.d_patch)
            self.head = DenseDecoder(enc.embed_dim, grid, cfg.decoder_dim, cfg.decoder_depth,
                                     cfg.decoder_heads, enc.in_chans, enc.num_freqs)
        self.agent = SACAgent(enc.in_chans, enc.embed_dim, cfg.sac)

    @property
    def camera(self) -> CameraConfig:
        return self.cfg.camera

    def backbone_parameters(self):
        return list(self.backbone.parameters()) + list(self.head.parameters())

    def predict_bundle(self, bundle: PatchBundle):
        latents = self.backbone(bundle)
        return latents, self.head(latents)

    def task_loss(self, output, target, images=None, reduction="none"):
        if self.cfg.task == "reconstruction":
            return rmse_loss(output, target, reduction=reduction)
        if self.teacher is not None:
            return distill_kl_loss(output, self.teacher(images), reduction=reduction)
        return ce_loss(output, target, reduction=reduction)

    @torch.no_grad()
    def observe(self, bundle: PatchBundle, targets, images):
        """Gradient-free forward giving per-sample loss, probabilities, importances, latents."""
        latents, out = self.predict_bundle(bundle)
        loss = self.task_loss(out, targets, images)
        probs = out.softmax(-1) if self.cfg.task == "classification" else None
        imp = attention_rollout(latents.attentions) if len(bundle) else latents.tokens.new_zeros(latents.tokens.shape[:2])
        return loss, probs, imp, latents.tokens, out


@dataclass
class Rollout:
    losses: torch.Tensor        # B x (T+1), float64
    actions: torch.Tensor       # B x T x 3
    coords: torch.Tensor        # B x T x 3 (x_abs, y_abs, d)
    steps: torch.Tensor         # B, glimpses actually used
    output: torch.Tensor        # final prediction
    bundle: PatchBundle
    stop_reason: list
    states: list = field(default_factory=list)

    @property
    def rewards(self) -> torch.Tensor:
        return self.losses[:, :-1] - self.losses[:, 1:]


def agent_policy(agent: SACAgent, deterministic: bool, generator=None):
    def policy(state: AgentState, t: int) -> torch.Tensor:
        return agent.act(state, deterministic=deterministic, generator=generator).action
    return policy


def rollout(model: ExplorerModel, images: torch.Tensor, targets, policy: Callable, T: int,
            threshold: Optional[float] = None, replay: Optional[ReplayBuffer] = None,
            keep_states: bool = False) -> Rollout:
    """Run ``T`` exploration steps on a batch of scenes.

    ``policy(state, t)`` returns ``B x 3`` actions.  With ``threshold`` set,
    a scene stops once its top class probability reaches it; later glimpses
    for that scene are captured but masked out, so they change nothing.
    """
    cfg = model.camera
    B, C, H, W = images.shape
    p = cfg.d_patch
    k = cfg.patches_per_glimpse
    bundle = PatchBundle.empty(B, p, C)
    loss, probs, imp, lat, out = model.observe(bundle, targets, images)
    losses = [loss.double()]
    active = torch.ones(B, dtype=torch.bool)
    steps = torch.zeros(B, dtype=torch.long)
    stop_reason = ["max_steps"] * B
    actions, coords, states = [], [], []
    state = AgentState(bundle.patches, bundle.coords, imp, lat, bundle.mask)
    for t in range(1, T + 1):
        action = policy(state, t).detach().float().clamp(0.0, 1.0)
        pixels, abs_coords = capture_batch(images, action, cfg)
        patches, pcoords = split_glimpse(pixels, abs_coords, (H, W), p)
        new_mask = active[:, None].expand(B, k).clone()
        bundle = bundle.extend(PatchBundle(patches, pcoords, new_mask))
        steps += active.long()
        loss, probs, imp, lat, out = model.observe(bundle, targets, images)
        # Stopped scenes keep their last loss so their reward is zero from then on.
        loss = torch.where(active, loss.double(), losses[-1])
        losses.append(loss)
        next_state = AgentState(bundle.patches, bundle.coords, imp, lat, bundle.mask)
        if replay is not None:
            done = torch.full((B,), t == T)
            rew = (losses[-2] - losses[-1]).float()
            rows = active
            if rows.any():
                replay.add(state.index(rows), action[rows], rew[rows], next_state.index(rows), done[rows])
        if keep_states:
            states.append(state)
        actions.append(action)
        coords.append(abs_coords)
        state = next_state
        if threshold is not None and threshold < 1.0 and probs is not None and t < T:
            confident = active & (probs.max(-1).values >= threshold)
            for b in torch.nonzero(confident).flatten().tolist():
                stop_reason[b] = "confidence"
            active = active & ~confident
    if keep_states:
        states.append(state)
    # With masking, the final forward equals the prediction at each scene's stop step.
    return Rollout(torch.stack(losses, 1), torch.stack(actions, 1), torch.stack(coords, 1), steps,
                   out, bundle, stop_reason, states)


def random_glimpse_bundle(images: torch.Tensor, count: int, cfg: CameraConfig,
                          generator: torch.Generator) -> PatchBundle:
    B, C, H, W = images.shape
    bundle = PatchBundle.empty(B, cfg.d_patch, C)
    for _ in range(count):
        act = torch.rand(B, 3, generator=generator)
        pixels, coords = capture_batch(images, act, cfg)
        patches, pcoords = split_glimpse(pixels, coords, (H, W), cfg.d_patch)
        bundle = bundle.extend(PatchBundle(patches, pcoords, torch.ones(patches.shape[:2], dtype=torch.bool)))
    return bundle


@dataclass
class RunLog:
    config_hash: str = ""
    epochs: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def append(self, metrics: dict) -> None:
        entry = dict(metrics)
        entry["wall_clock"] = time.time() - self.started
        self.epochs.append(entry)

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "epochs": self.epochs,
                           "episodes": self.episodes}, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        keys = sorted({k for e in self.epochs for k in e})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=keys)
        writer.writeheader()
        for e in self.epochs:
            writer.writerow(e)
        return buf.getvalue()


def _targets_for(model: ExplorerModel, images, labels):
    return images if model.cfg.task == "reconstruction" else labels


def _batches(n: int, batch_size: int, generator: Optional[torch.Generator] = None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


class Trainer:
    """Holds optimizers, replay, RNG and counters for one training run."""

    def __init__(self, model: ExplorerModel, images: torch.Tensor, labels: Optional[torch.Tensor] = None,
                 val_images: Optional[torch.Tensor] = None, val_labels: Optional[torch.Tensor] = None):
        self.model = model
        self.cfg = cfg = model.cfg
        self.images = images
        self.labels = labels
        self.val_images = val_images
        self.val_labels = val_labels
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.optimizer = torch.optim.AdamW(model.backbone_parameters(), lr=cfg.lr_backbone,
                                           weight_decay=cfg.weight_decay)
        max_tokens = cfg.n_glimpses * cfg.camera.patches_per_glimpse
        self.replay = ReplayBuffer(cfg.sac.buffer_capacity, max_tokens)
        n_batches = math.ceil(len(images) / cfg.batch_size)
        backbone_epochs = sum(schedule(e, cfg) == "backbone" for e in range(cfg.epochs))
        self.total_backbone_steps = max(1, backbone_epochs * n_batches)
        self.backbone_step = 0
        self.log = RunLog(cfg.config_hash())

    def _batch(self, idx):
        imgs = self.images[idx]
        if self.cfg.augment:
            imgs = augment(imgs, self.generator, hflip=self.cfg.hflip)
        labels = None if self.labels is None else self.labels[idx]
        return imgs, _targets_for(self.model, imgs, labels)

    def pretrain(self) -> list:
        """Train backbone and head on the task loss from random-uniform glimpses."""
        cfg, model = self.cfg, self.model
        opt = torch.optim.AdamW(model.backbone_parameters(), lr=cfg.lr_backbone, weight_decay=cfg.weight_decay)
        n_batches = math.ceil(len(self.images) / cfg.batch_size)
        total = cfg.pretrain_epochs * n_batches
        lo = cfg.pretrain_min_glimpses or cfg.pretrain_glimpse_count
        history, step = [], 0
        model.backbone.train()
        for epoch in range(cfg.pretrain_epochs):
            losses = []
            for idx in _batches(len(self.images), cfg.batch_size, self.generator):
                imgs, targets = self._batch(idx)
                count = int(torch.randint(lo, cfg.pretrain_glimpse_count + 1, (1,), generator=self.generator))
                bundle = random_glimpse_bundle(imgs, count, cfg.camera, self.generator)
                _, out = model.predict_bundle(bundle)
                loss = model.task_loss(out, targets, imgs, reduction="mean")
                for g in opt.param_groups:
                    g["lr"] = cosine_lr(step, total, cfg.lr_backbone, cfg.lr_floor)
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(model.backbone_parameters(), cfg.grad_clip)
                opt.step()
                step += 1
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
        return history

    def train_epoch(self, phase: str) -> dict:
        if phase == "backbone":
            return self._backbone_epoch()
        if phase == "agent":
            return self._agent_epoch()
        raise ValueError(f"unknown phase {phase!r}")

    def _backbone_epoch(self) -> dict:
        cfg, model = self.cfg, self.model
        policy = agent_policy(model.agent, not cfg.stochastic_backbone_rollouts, self.generator)
        losses = []
        for idx in _batches(len(self.images), cfg.batch_size, self.generator):
            imgs, targets = self._batch(idx)
            ro = rollout(model, imgs, targets, policy, cfg.n_glimpses)
            # Gradients only at the final exploration step, over all glimpses.
            _, out = model.predict_bundle(ro.bundle)
            loss = model.task_loss(out, targets, imgs, reduction="mean")
            lr = cosine_lr(self.backbone_step, self.total_backbone_steps, cfg.lr_backbone, cfg.lr_floor)
            for g in self.optimizer.param_groups:
                g["lr"] = lr
            self.optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.backbone_parameters(), cfg.grad_clip)
            self.optimizer.step()
            self.backbone_step += 1
            losses.append(loss.item())
        return {"phase": "backbone", "train_loss": float(np.mean(losses))}

    def _agent_epoch(self) -> dict:
        cfg, model = self.cfg, self.model
        policy = agent_policy(model.agent, False, self.generator)
        stats, final_losses, returns = [], [], []
        for idx in _batches(len(self.images), cfg.batch_size, self.generator):
            imgs, targets = self._batch(idx)
            ro = rollout(model, imgs, targets, policy, cfg.n_glimpses, replay=self.replay)
            final_losses.append(ro.losses[:, -1].mean().item())
            returns.append(ro.rewards.sum(1).mean().item())
            if len(self.replay) < cfg.warmup_transitions:
                continue
            for _ in range(cfg.agent_updates_per_batch):
                batch = self.replay.sample(cfg.sac.batch_size, self.generator)
                stats.append(model.agent.update(batch, self.generator))
        out = {"phase": "agent", "train_loss": float(np.mean(final_losses)),
               "episode_return": float(np.mean(returns))}
        for key in ("critic_loss", "actor_loss", "alpha_loss", "alpha"):
            if stats:
                out[key] = float(np.mean([s[key] for s in stats]))
        return out

    def fit(self, callback: Optional[Callable] = None) -> RunLog:
        cfg = self.cfg
        best, since_best, best_state = -math.inf, 0, None
        for epoch in range(cfg.epochs):
            phase = schedule(epoch, cfg)
            metrics = {"epoch": epoch, **self.train_epoch(phase)}
            if self.val_images is not None:
                val = evaluate(self.model, self.val_images, self.val_labels, mode="fixed")
                metrics.update({f"val_{k}": v for k, v in val.items()})
                score = val["accuracy"] if cfg.task == "classification" else -val["rmse"]
                if epoch >= cfg.warmup_agent_epochs:
                    if score > best:
                        best, since_best = score, 0
                        best_state = {k: v.clone() for k, v in self.model.state_dict().items()}
                    else:
                        since_best += 1
            self.log.append(metrics)
            log.info("epoch %d %s", epoch, metrics)
            if callback is not None:
                callback(epoch, metrics)
            if since_best >= cfg.patience:
                log.info("early stopping at epoch %d", epoch)
                break
        if best_state is not None:
            self.model.load_state_dict(best_state)
        return self.log


def pretrain_random(model: ExplorerModel, images, labels=None, **kw) -> list:
    return Trainer(model, images, labels, **kw).pretrain()


def baseline_policy(kind: str, cfg: CameraConfig, scene_hw, generator: Optional[torch.Generator] = None,
                    fixed_z: float = 0.0):
    from .evaluation import BaselinePolicy

    pol = BaselinePolicy(kind, cfg, scene_hw, fixed_z=fixed_z)

    def policy(state: AgentState, t: int) -> torch.Tensor:
        B = state.batch_size
        if kind == "random_uniform":
            return torch.rand(B, 3, generator=generator)
        return torch.as_tensor(pol.action(t).as_array(), dtype=torch.float32).expand(B, 3).clone()
    return policy


@torch.no_grad()
def evaluate(model: ExplorerModel, images: torch.Tensor, labels=None, mode: str = "fixed",
             threshold: Optional[float] = None, policy: str = "agent", T: Optional[int] = None,
             batch_size: int = 256, seed: int = 0, return_rollouts: bool = False):
    """Task metric (accuracy or RMSE) plus the mean episode length in glimpses and pixel percent.

    ``mode`` is ``'fixed'`` (always ``T`` glimpses) or ``'stopping'``
    (confidence threshold, default from the config).
    """
    cfg = model.cfg
    T = cfg.n_glimpses if T is None else T
    if mode == "stopping":
        threshold = cfg.stop_threshold if threshold is None else threshold
    elif mode == "fixed":
        threshold = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gen = torch.Generator().manual_seed(seed)
    H, W = images.shape[-2:]
    if policy == "agent":
        pol = agent_policy(model.agent, True)
    else:
        pol = baseline_policy(policy, cfg.camera, (H, W), gen)
    was_training = model.training
    model.eval()
    correct, sq_err, n_pix, steps, rollouts = 0, [], 0, [], []
    for idx in _batches(len(images), batch_size):
        imgs = images[idx]
        targets = _targets_for(model, imgs, None if labels is None else labels[idx])
        ro = rollout(model, imgs, targets, pol, T, threshold=threshold)
        if cfg.task == "classification":
            correct += int((ro.output.argmax(-1) == targets).sum())
        else:
            sq_err.append(rmse_loss(ro.output, targets, reduction="none"))
        steps.append(ro.steps)
        if return_rollouts:
            rollouts.append(ro)
    model.train(was_training)
    steps = torch.cat(steps).double()
    metrics = {
        "mean_glimpses": steps.mean().item(),
        "pixel_pct": float(np.mean([pixel_percentage(int(s), (H, W), cfg.camera) for s in steps])),
        "n": len(images),
    }
    if cfg.task == "classification":
        metrics["accuracy"] = 100.0 * correct / len(images)
    else:
        metrics["rmse"] = torch.cat(sq_err).mean().item()
    return (metrics, rollouts) if return_rollouts else metrics


def rollout_records(ro: Rollout, scene_ids=None, scene_hw=(0, 0), include_pixels: bool = False,
                    images: Optional[torch.Tensor] = None, cfg: Optional[CameraConfig] = None) -> list:
    """Turn a batched rollout into per-scene ``EpisodeRecord`` objects."""
    from .env import crop_resize

    records = []
    B = ro.losses.shape[0]
    for b in range(B):
        n = int(ro.steps[b])
        rec = EpisodeRecord(scene_id=str(b if scene_ids is None else scene_ids[b]), scene_shape=tuple(scene_hw),
                            stop_reason=ro.stop_reason[b])
        for t in range(n):
            x, y, d = (int(v) for v in ro.coords[b, t])
            px = None
            if include_pixels and images is not None and cfg is not None:
                px = crop_resize(images[b], x, y, d, cfg.d_cam).numpy().transpose(1, 2, 0)
            rec.captures.append(GlimpseCapture(px, (x, y, d), t + 1))
            rec.actions.append(GlimpseAction(*(float(v) for v in ro.actions[b, t])))
        rec.losses = [float(v) for v in ro.losses[b, :n + 1]]
        rec.rewards = [rec.losses[t] - rec.losses[t + 1] for t in range(n)]
        if ro.output.dim() == 2:
            probs = ro.output[b].softmax(-1).double()
            rec.final_prediction = {"label": int(probs.argmax()), "probs": probs.tolist(),
                                    "logits": ro.output[b].double().tolist()}
        records.append(rec)
    return records


def save_checkpoint(model: ExplorerModel, path: str, extra: Optional[dict] = None) -> None:
    torch.save({"version": CHECKPOINT_VERSION, "train_config": model.cfg.to_dict(),
                "backbone": model.backbone.state_dict(), "head": model.head.state_dict(),
                "agent": model.agent.full_state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path: str, expected: Optional[TrainConfig] = None) -> ExplorerModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    cfg = TrainConfig.from_dict(ckpt["train_config"])
    if expected is not None and cfg.encoder != expected.encoder:
        raise ValueError("checkpoint encoder config does not match")
    model = ExplorerModel(cfg)
    model.backbone.load_state_dict(ckpt["backbone"])
    model.head.load_state_dict(ckpt["head"])
    model.agent = SACAgent.from_full_state_dict(ckpt["agent"])
    return model
