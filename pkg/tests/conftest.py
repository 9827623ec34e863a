import numpy as np
import pytest
import torch

from ragstereo.arch import build_base_topology
from ragstereo.config import (GrowthConfig, RegimeConfig, RouterConfig, RunConfig,
                              SearchConfig)
from ragstereo.scenes import SceneSpec


@pytest.fixture
def tiny_topology():
    return build_base_topology(feature_layers=2, matching_layers=2, feature_channels=4,
                               matching_channels=2, max_disparity=12)


def tiny_config(scenes, seed=0, mode="supervised", **regime):
    """Smallest config that still exercises every stage of the continual loop."""
    reg = dict(mode=mode, epochs=2, pretrain_epochs=1, adapt_epochs=1, batch_size=4)
    reg.update(regime)
    return RunConfig(scenes=scenes, search=SearchConfig(trials=2), growth=GrowthConfig(trials=2),
                     router=RouterConfig(epochs=20), regime=RegimeConfig(**reg),
                     model=tiny_model(), seed=seed)


def tiny_model():
    from ragstereo.config import ModelConfig
    return ModelConfig(feature_layers=2, matching_layers=2, feature_channels=4,
                       matching_channels=2, max_disparity=12)


def tiny_scene(name, seed, tint=(1.0, 1.0, 1.0), **kw):
    base = dict(disp_min=2, disp_max=8, height=18, width=24, pairs=8, test_pairs=2,
                max_disparity=12, layers=2)
    base.update(kw)
    return SceneSpec(name, tint=tint, seed=seed, **base)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
