import numpy as np
import pytest

from models.editing.keyspace import estimate_second_moment
from models.transformer.config import ModelConfig
from models.transformer.tiny_lm import TinyLM


def scaled(model: TinyLM, factor: float) -> TinyLM:
    """Scale every non-LayerNorm tensor so a fresh model has non-trivial activations."""
    updates = {k: v * factor for k, v in model.params.items() if not (k.endswith(".g") or k.endswith(".b"))}
    return model.with_params(updates)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_mlp=32, max_seq=24)


@pytest.fixture
def tiny_model(tiny_config):
    return scaled(TinyLM.initialize(tiny_config, seed=0), 10.0)


@pytest.fixture
def bos_model(tiny_config):
    config = ModelConfig(**{**tiny_config.model_dump(), "bos_mode": "prepend"})
    return scaled(TinyLM.initialize(config, seed=1), 10.0)


@pytest.fixture
def byte_corpus():
    text = b"the cat sat on the mat. a dog ran in the park. birds sing at dawn. " * 12
    return tuple(text)


@pytest.fixture
def second_moment(tiny_model, byte_corpus):
    return estimate_second_moment(tiny_model, byte_corpus, max_samples=400)


@pytest.fixture
def make_spd(rng):
    def _make(n: int, ridge: float = 1.0) -> np.ndarray:
        A = rng.normal(size=(n, 2 * n))
        C = A @ A.T / (2 * n) + ridge * np.eye(n)
        return 0.5 * (C + C.T)

    return _make


@pytest.fixture
def scale_model():
    return scaled
