import numpy as np
import pytest

from runet.config import ModelConfig, TrainConfig
from runet.data import synth_generate
from runet.training import train


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A small trained model shared by checkpoint/CLI tests."""
    out = tmp_path_factory.mktemp("tiny_run")
    samples = synth_generate(3, 12, 32, 32, "curves")
    model_cfg = ModelConfig(variant="dru", level=4, in_channels=1, iterations=2)
    train_cfg = TrainConfig(epochs=2, batch_size=4, seed=1, alpha=0.4)
    result = train(model_cfg, train_cfg, samples[:8], samples[8:], out)
    return {
        "out": out,
        "model_cfg": model_cfg,
        "train_cfg": train_cfg,
        "result": result,
        "train_samples": samples[:8],
        "val_samples": samples[8:],
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
