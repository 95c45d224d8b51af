import numpy as np
import pytest
import torch

from elastic_ave.agent import SACConfig
from elastic_ave.backbone import EncoderConfig
from elastic_ave.data import make_digit_scenes
from elastic_ave.env import CameraConfig
from elastic_ave.training import TrainConfig


def micro_config(**kw) -> TrainConfig:
    """Smallest configuration that exercises every code path in seconds."""
    base = dict(scene_size=32, epochs=3, warmup_agent_epochs=1, pretrain_epochs=1, pretrain_glimpse_count=2,
                n_glimpses=2, batch_size=16, agent_updates_per_batch=2, warmup_transitions=8, lr_backbone=1e-3,
                camera=CameraConfig(d_cam=16, d_patch=8),
                encoder=EncoderConfig(depth=1, embed_dim=16, num_heads=2, d_patch=8),
                sac=SACConfig(hidden=16, pool_heads=4, batch_size=8, buffer_capacity=200),
                decoder_dim=16, decoder_depth=1, decoder_heads=2)
    base.update(kw)
    return TrainConfig(**base)


def as_tensors(X, y):
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2))), torch.from_numpy(y)


@pytest.fixture(scope="session")
def micro_data():
    X, y = make_digit_scenes(48, size=32, digit_size=(12, 20), seed=3)
    return as_tensors(X, y)


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
