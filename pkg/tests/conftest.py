import numpy as np
import pytest

from hpac import corpus, model, train


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture(scope="session")
def tiny_weights():
    """Random-init tiny model, 8-bit grayscale."""
    return model.init_weights(model.tiny_config(), np.random.default_rng(7))


@pytest.fixture(scope="session")
def warm_weights():
    """Tiny model with a short training run on smooth gradients.

    Not a good model, but good enough that its predictions are informative
    (escape rates, rate maps, fine-tuning baselines).
    """
    weights = model.init_weights(model.tiny_config(), np.random.default_rng(1))
    images = corpus.make_corpus(11, 8, (64, 64), families=("gradient",))
    cfg = train.TrainConfig(steps=150, batch=4, crop=32, lr_peak=2e-3,
                            warmup=30, seed=3, log_every=150)
    train.train(weights, cfg, images)
    return weights
