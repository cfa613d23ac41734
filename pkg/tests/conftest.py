from pathlib import Path

import numpy as np
import pytest

import ivq
from ivq import checkpoint as cio

FIXTURES = Path(__file__).parent / "fixtures" / "tiny"

TOY_HYPER = ivq.HyperParams(layers=2, d_model=64, d_ff=128, vocab=40, heads=4, context=64)


@pytest.fixture(scope="session")
def toy_params():
    return ivq.random_params(TOY_HYPER, seed=11)


@pytest.fixture(scope="session")
def toy_calib():
    rng = np.random.default_rng(5)
    return [rng.integers(0, TOY_HYPER.vocab, 48) for _ in range(3)]


@pytest.fixture(scope="session")
def trained_params():
    return ivq.from_checkpoint(cio.read_checkpoint(FIXTURES / "model.ivq"))


@pytest.fixture(scope="session")
def trained_calib(trained_params):
    return ivq.load_sequences(
        FIXTURES / "train_tokens.txt", 4, 128, vocab=trained_params.hyper.vocab
    )


@pytest.fixture(scope="session")
def trained_heldout(trained_params):
    return ivq.load_sequences(
        FIXTURES / "eval_tokens.txt", 16, 128, vocab=trained_params.hyper.vocab
    )
