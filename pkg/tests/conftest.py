import sys
from pathlib import Path
from typing import List

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.cache import clear_encoding_cache  # noqa: E402
from app.core.config import get_env_bool  # noqa: E402
from app.schemas.config import EncoderConfig, ObjectiveConfig, TrainConfig  # noqa: E402
from app.schemas.records import TrainPair  # noqa: E402
from app.services.encoder import LayerEmbeddings  # noqa: E402
from app.services.autodiff import leaf  # noqa: E402
from app.services.ingest import build_vocab  # noqa: E402
from app.services.synthetic import make_retrieval_task  # noqa: E402
from app.services.trainer import train  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end trend checks, run with RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if get_env_bool("RUN_SLOW"):
        return
    skip_slow = pytest.mark.skip(reason="set RUN_SLOW=1 to run slow tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _fresh_cache():
    clear_encoding_cache()
    yield
    clear_encoding_cache()


@pytest.fixture
def tiny_encoder() -> EncoderConfig:
    return EncoderConfig(vocab_size=64, d_model=16, n_layers=3, n_heads=2, d_ff=24, max_seq_len=16)


@pytest.fixture
def retrieval_task():
    return make_retrieval_task(n_docs=60, n_train=24, n_eval=12, vocab_size=64, seed=3, n_topics=4)


@pytest.fixture
def tiny_vocab(retrieval_task):
    texts = [d.text for d in retrieval_task.corpus] + [p.query for p in retrieval_task.train]
    return build_vocab(texts, 64)


@pytest.fixture
def tiny_pairs(retrieval_task) -> List[TrainPair]:
    return retrieval_task.train


@pytest.fixture
def tiny_train_config(tiny_encoder) -> TrainConfig:
    return TrainConfig(
        objective=ObjectiveConfig(kind="v2", dims=[4, 8, 16], target_dim=4),
        encoder=tiny_encoder,
        steps=3,
        batch_size=8,
        seed=0,
    )


@pytest.fixture
def tiny_checkpoint(tiny_train_config, tiny_pairs, tiny_vocab):
    return train(tiny_train_config, tiny_pairs, tiny_vocab)


def random_layers(rng: np.random.Generator, n_layers: int, rows: int, dim: int) -> LayerEmbeddings:
    return LayerEmbeddings([leaf(rng.normal(size=(rows, dim))) for _ in range(n_layers)])
