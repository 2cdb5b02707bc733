import pytest
import torch

from lexbridge.model import EncoderConfig, init_random
from lexbridge.tokenizer import SPECIAL_TOKENS, Vocabulary

torch.set_num_threads(1)


def make_vocab(*tokens):
    return Vocabulary(SPECIAL_TOKENS + tuple(tokens))


@pytest.fixture
def tiny_config():
    return EncoderConfig(vocab_size=32, n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq_len=12, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_config):
    return init_random(tiny_config, seed=0)
