"""Active visual exploration with glimpses of arbitrary position and scale."""

from .agent import AgentState, ReplayBuffer, SACAgent, SACConfig, StateAblation, compute_reward, sac_update
from .backbone import ElasticViT, EncoderConfig, PatchBundle, attention_rollout, split_glimpse
from .env import (CameraConfig, EpisodeRecord, GlimpseAction, GlimpseCapture, GlimpseEnv, SceneImage,
                  capture_glimpse, denormalize_action, pixel_percentage, should_stop)
from .estimator import GlimpseClassifier, GlimpseReconstructor, check_scenes
from .heads import ClassifierHead, DenseDecoder, DenseQueryGrid, ce_loss, distill_kl_loss, rmse_loss
from .training import ExplorerModel, Trainer, TrainConfig, evaluate, schedule

__version__ = "0.1.0"
