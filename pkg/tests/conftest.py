import numpy as np
import pytest

from lagdecode.toy_models import generate_corpus, train_classifier, train_lm


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(6, 2, 2000, seed=0)


@pytest.fixture(scope="session")
def small_lm(small_corpus):
    return train_lm(small_corpus, epochs=15, seed=0)


@pytest.fixture(scope="session")
def small_clf(small_corpus):
    return train_classifier(small_corpus, epochs=15, seed=0)


@pytest.fixture(scope="session")
def corpus32():
    return generate_corpus(32, 2, 2000, seed=0)


@pytest.fixture(scope="session")
def lm32(corpus32):
    return train_lm(corpus32, epochs=8, seed=0)


@pytest.fixture(scope="session")
def clf32(corpus32):
    return train_classifier(corpus32, epochs=8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
