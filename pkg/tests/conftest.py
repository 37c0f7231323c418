# tests/conftest.py

import numpy as np
import pytest

from stotrans.engine.attention import AttentionMode, StochasticConfig
from stotrans.engine.model import ModelConfig
from stotrans.engine.sampling import RngStream
from stotrans.text.datasets import Batch, DataSplits
from stotrans.text.synthetic import SyntheticConfig, split_synthetic, synthetic_id_ood

TINY_SYNTHETIC = SyntheticConfig(n_train=64, n_eval=32, vocab_size=40, seq_len=8, seed=7, cues_per_example=3)


@pytest.fixture
def rng():
    return RngStream(1234)


def tiny_model_config(mode: AttentionMode = AttentionMode.DETERMINISTIC, **overrides) -> ModelConfig:
    values = dict(
        vocab_size=40, num_classes=2, num_layers=1, num_heads=2, emb_dim=8, ffn_hidden_dim=8,
        max_seq_len=8, dropout_rate=0.0, centroid_count=4,
        attention=StochasticConfig(mode, tau=1.0, tau1=1.0, tau2=1.0),
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_splits():
    in_domain, out_of_domain = synthetic_id_ood(TINY_SYNTHETIC)
    train, valid, test = split_synthetic(in_domain, TINY_SYNTHETIC)
    return DataSplits(train, valid, test, out_of_domain)


def make_batch(ids, lengths=None) -> Batch:
    ids = np.asarray(ids, dtype=np.int64)
    if lengths is None:
        mask = np.zeros(ids.shape, dtype=bool)
    else:
        mask = np.arange(ids.shape[1])[None, :] >= np.asarray(lengths)[:, None]
    return Batch(ids, mask, np.zeros(ids.shape[0], dtype=np.int64), np.arange(ids.shape[0]))


TINY_RUN_CONFIG = """\
# small synthetic run used by the command-line tests
data_source = synthetic
synthetic_n_train = 48
synthetic_n_eval = 16
synthetic_vocab_size = 40
synthetic_seq_len = 8
synthetic_cues = 3
num_heads = 2
emb_dim = 8
ffn_hidden_dim = 8
max_seq_len = 8
centroids = 4
batch_size = 16
max_epochs = 2
runs = 3
"""


@pytest.fixture
def run_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_RUN_CONFIG, encoding="utf-8")
    return path
