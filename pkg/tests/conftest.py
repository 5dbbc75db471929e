import numpy as np
import pytest
import torch

from promptkpt.config import Config
from promptkpt.data.synth import synth_dataset
from promptkpt.pipeline import SceneSet, build_model

torch.set_num_threads(1)


def tiny_config(**model) -> Config:
    cfg = Config.from_dict({
        "model": {"dim": 16, "heads": 2, "ffn_hidden": 32, "num_queries": 8, "enhancer_layers": 2,
                  "keypoint_decoder_layers": 2, "prompt_resolution": 32, "patch_size": 16, "vit_layers": 1,
                  **model},
        "train": {"lr": 1e-3, "batch_size": 1, "log_every": 0},
    })
    return cfg


@pytest.fixture(scope="session")
def tiny_data():
    ds, pixels = synth_dataset(0, 4)
    return SceneSet(ds, pixels)


@pytest.fixture
def tiny_model(tiny_data):
    cfg = tiny_config()
    return build_model(cfg.model, tiny_data.prompt_texts(), 0), cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0)
