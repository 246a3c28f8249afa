import os

import numpy as np
import pytest

from swat.data import CORPUS_VERSION, generate_digit_corpus, load_dataset

# one shared synthetic corpus per machine; regeneration is deterministic
_CORPUS_DIR = os.environ.get(
    "SWAT_DIGITS_DIR", os.path.join("/tmp", "swat-digit-corpus"))
_CORPUS_TRAIN = 60000
_CORPUS_TEST = 10000


@pytest.fixture(scope="session")
def digits_dir():
    marker = os.path.join(_CORPUS_DIR, ".complete")
    tag = f"v{CORPUS_VERSION} n{_CORPUS_TRAIN}/{_CORPUS_TEST}"
    if not (os.path.exists(marker) and open(marker).read().strip() == tag):
        generate_digit_corpus(_CORPUS_DIR, train=_CORPUS_TRAIN, test=_CORPUS_TEST)
        with open(marker, "w") as f:
            f.write(tag + "\n")
    return _CORPUS_DIR


@pytest.fixture(scope="session")
def digits(digits_dir):
    return load_dataset("mnist", digits_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
