# tests/test_checkpoint.py

import hashlib
import re
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_batch, tiny_model_config
from stotrans.engine.attention import AttentionMode
from stotrans.engine.checkpoint import load_checkpoint, save_checkpoint
from stotrans.engine.model import forward, init_model
from stotrans.engine.sampling import RngStream
from stotrans.errors import CheckpointError


@pytest.fixture
def hierarchical_model():
    return init_model(tiny_model_config(AttentionMode.HIERARCHICAL, alpha=2.5), RngStream(8))


def _rewrite(path, transform):
    """Apply ``transform`` to the payload and re-seal it with a valid digest."""
    blob = path.read_bytes()
    payload = transform(blob[:blob.rfind(b"sha256 ")])
    path.write_bytes(payload + f"sha256 {hashlib.sha256(payload).hexdigest()}\n".encode("utf-8"))


class TestRoundTrip:

    def test_forward_is_identical(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        loaded = load_checkpoint(path)
        batch = make_batch([[2, 3, 4, 5], [6, 7, 0, 0]], lengths=[4, 2])
        np.testing.assert_array_equal(forward(loaded, batch, rng=RngStream(1)).data,
                                      forward(hierarchical_model, batch, rng=RngStream(1)).data)
        assert loaded.config == hierarchical_model.config

    def test_saving_twice_is_byte_identical(self, tmp_path, hierarchical_model):
        a = save_checkpoint(hierarchical_model, tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(hierarchical_model, tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def test_expected_config_accepted(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        load_checkpoint(path, expected=hierarchical_model.config)


class TestLoadErrors:

    def test_wrong_vocab_size(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        with pytest.raises(CheckpointError, match="vocab_size"):
            load_checkpoint(path, expected=replace(hierarchical_model.config, vocab_size=41))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_flipped_byte(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        path.write_bytes(path.read_bytes()[:200])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        _rewrite(path, lambda p: p.replace(b"STOTRANS-CHECKPOINT 1\n", b"STOTRANS-CHECKPOINT 2\n", 1))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_shape_disagreement(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        _rewrite(path, lambda p: p.replace(b"centroid_count=4\n", b"centroid_count=5\n", 1))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"")
        _rewrite(path, lambda p: b"hello world\n")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_malformed_shape_is_a_checkpoint_error(self, tmp_path, hierarchical_model):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        _rewrite(path, lambda p: re.sub(rb"(\nparam \S+ )\S+\n", rb"\g<1>4xq\n", p, count=1))
        with pytest.raises(CheckpointError, match="malformed shape"):
            load_checkpoint(path)

    @pytest.mark.parametrize("field", [b"tau", b"tau2"])
    @pytest.mark.parametrize("value", [b"0.0", b"-1.0"])
    def test_non_positive_temperature_is_rejected(self, tmp_path, hierarchical_model, field, value):
        path = save_checkpoint(hierarchical_model, tmp_path / "model.ckpt")
        _rewrite(path, lambda p: re.sub(rb"\n" + field + rb"=[^\n]*\n", b"\n" + field + b"=" + value + b"\n", p, count=1))
        with pytest.raises(CheckpointError, match=field.decode() + " must be a positive real"):
            load_checkpoint(path)
