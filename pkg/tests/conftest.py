import numpy as np
import pytest

from vlpretrain.data import SynthConfig, generate_synthetic, synthetic_vocabulary, tokenize_records
from vlpretrain.encoder import EncoderConfig
from vlpretrain.model import ModelConfig, init_params


@pytest.fixture(scope="session")
def synth_cfg():
    return SynthConfig(pairs=12, num_concepts=8, d_vis=6, vocab_size=40, seed=5)


@pytest.fixture(scope="session")
def vocab(synth_cfg):
    return synthetic_vocabulary(synth_cfg)


@pytest.fixture(scope="session")
def examples(synth_cfg, vocab):
    return tokenize_records(generate_synthetic(synth_cfg), vocab)


@pytest.fixture
def tiny_model(synth_cfg, vocab):
    enc = EncoderConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, max_seq_len=24, dropout_rate=0.0)
    return ModelConfig(vocab_size=len(vocab), d_vis=synth_cfg.d_vis, num_labels=synth_cfg.num_concepts, encoder=enc)


@pytest.fixture
def tiny_params(tiny_model):
    return init_params(tiny_model, seed=0, head_std=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
