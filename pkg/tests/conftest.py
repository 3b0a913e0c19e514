"""Fixtures shared by the model and pipeline tests."""

import pytest

from model import pretrain_backbone
from taskgen import build_vocabulary, make_pretraining_corpus, make_suite, word_frequency
from tiny_configs import TINY_TASKGEN, tiny_backbone


@pytest.fixture
def vocab():
    return build_vocabulary()


@pytest.fixture
def state():
    """Untrained frozen backbone with an empty adapter store."""
    config = tiny_backbone()
    corpus = make_pretraining_corpus(8, 0, config.max_sequence_length)
    return pretrain_backbone(corpus, 0, 0, config)


@pytest.fixture(scope="session")
def small_suite():
    return make_suite("similar", 0, TINY_TASKGEN)


@pytest.fixture(scope="session")
def random_suite():
    return make_suite("random", 0, TINY_TASKGEN)


@pytest.fixture(scope="session")
def freq_store(small_suite):
    return {t.task_id: word_frequency(t) for t in small_suite.tasks}
