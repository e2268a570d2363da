import pytest

from parcot.model import ModelConfig, init_weights
from parcot.positional import init_thought_table
from parcot.tokenizer import Vocab


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig(
        n_layers=2, d_model=64, n_heads=4, d_k=16, d_ff=256, vocab_size=292
    )


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(
        n_layers=2, d_model=32, n_heads=2, d_k=16, d_ff=64, vocab_size=292
    )


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_weights(small_config, seed=3)


@pytest.fixture(scope="session")
def small_table(small_config, vocab):
    return init_thought_table(
        vocab.p_max, small_config.n_layers, small_config.n_heads, small_config.d_k, seed=4
    )
