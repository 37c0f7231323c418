# tests/test_training.py

import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_model_config
from stotrans.engine.attention import AttentionMode
from stotrans.engine.model import EnsemblePredictor, ModelPredictor, init_model
from stotrans.engine.sampling import RngStream
from stotrans.engine.tensor import Tape, Tensor, mul, sub, sum_all
from stotrans.errors import ConfigError, ContractError, DataError, NumericalError, ParameterError, TrainingDivergence
from stotrans.services import training_service
from stotrans.services.training_service import (
    AdamState,
    TrainConfig,
    TrainHistory,
    adam_step,
    clip_gradients,
    fit,
    mc_dropout_model,
    nll_loss,
    train,
    train_ensemble,
)
from stotrans.services.uncertainty_service import example_report, multi_run_predict, summarize
from stotrans.text.datasets import DataSplits
from stotrans.text.synthetic import SyntheticConfig, split_synthetic, synthetic_id_ood

FAST = TrainConfig(lr=3e-3, batch_size=16, max_epochs=2, dropout_rate=0.0, seed=5)


class TestNllLoss:

    def test_uniform_logits(self):
        assert nll_loss(Tensor(np.zeros((4, 2))), [0, 1, 1, 0]).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_confident_correct_prediction(self):
        assert nll_loss(Tensor([[20.0, -20.0]]), [0]).item() < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            nll_loss(Tensor(np.zeros((2, 2))), [0, 2])

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor.parameter([[1.0, 2.0, 0.5]])
        with Tape() as tape:
            loss = nll_loss(logits, [1])
        tape.backward(loss)
        p = np.exp([1.0, 2.0, 0.5]) / np.exp([1.0, 2.0, 0.5]).sum()
        np.testing.assert_allclose(logits.grad[0], p - np.array([0.0, 1.0, 0.0]), atol=1e-12)


class TestAdam:

    def test_zero_gradient_is_a_fixed_point(self):
        params = {"w": Tensor.parameter([1.5, -2.0])}
        adam_step(params, {"w": np.zeros(2)}, AdamState(lr=0.1))
        np.testing.assert_array_equal(params["w"].data, [1.5, -2.0])

    def test_converges_on_quadratic(self):
        w = Tensor.parameter([0.0])
        params, state = {"w": w}, AdamState(lr=0.1)
        for _ in range(200):
            w.zero_grad()
            with Tape() as tape:
                diff = sub(w, 3.0)
                loss = sum_all(mul(diff, diff))
            tape.backward(loss)
            adam_step(params, {"w": w.grad}, state)
        assert abs(w.data[0] - 3.0) < 0.05

    def test_nan_gradient_names_the_parameter(self):
        params = {"layers.0.ffn.w1": Tensor.parameter([1.0])}
        with pytest.raises(NumericalError, match="layers.0.ffn.w1"):
            adam_step(params, {"layers.0.ffn.w1": np.array([np.nan])}, AdamState())
        np.testing.assert_array_equal(params["layers.0.ffn.w1"].data, [1.0])

    def test_clip_gradients(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])


class TestTrainConfig:

    def test_defaults_are_valid(self):
        assert TrainConfig().validate() == (True, [])

    def test_collects_every_error(self):
        ok, errors = TrainConfig(lr=0.0, batch_size=0, selection_metric="f1").validate()
        assert not ok and len(errors) == 3


class TestTrain:

    def test_same_seed_same_history_and_weights(self, tiny_splits):
        config = tiny_model_config(AttentionMode.HIERARCHICAL)
        model_a, history_a = fit(config, tiny_splits, FAST)
        model_b, history_b = fit(config, tiny_splits, FAST)
        assert history_a.records == history_b.records
        for name in model_a.params:
            np.testing.assert_array_equal(model_a.params[name].data, model_b.params[name].data)

    def test_history_has_one_record_per_evaluation(self, tiny_splits):
        _, history = fit(tiny_model_config(), tiny_splits, FAST)
        assert [r["epoch"] for r in history.records] == [1, 2]
        assert history.best_epoch in (1, 2)
        assert history.best_metric == max(r["valid_metric"] for r in history.records)

    def test_dropout_mismatch(self, tiny_splits):
        model = init_model(tiny_model_config(dropout_rate=0.1), RngStream(0))
        with pytest.raises(ConfigError):
            train(model, tiny_splits, FAST, RngStream(1))

    def test_empty_split(self, tiny_splits):
        splits = DataSplits(tiny_splits.train, tiny_splits.valid.subset([]), tiny_splits.test)
        with pytest.raises(DataError):
            fit(tiny_model_config(), splits, FAST)

    def test_divergence_carries_history(self, tiny_splits, monkeypatch):
        calls = {"n": 0}
        real_step = training_service.adam_step

        def failing_step(params, grads, state):
            calls["n"] += 1
            if calls["n"] > 4:
                raise NumericalError("non-finite gradient for parameter classifier.weight")
            return real_step(params, grads, state)

        monkeypatch.setattr(training_service, "adam_step", failing_step)
        with pytest.raises(TrainingDivergence) as excinfo:
            fit(tiny_model_config(), tiny_splits, FAST)
        history = excinfo.value.history
        assert isinstance(history, TrainHistory)
        assert len(history.records) == 1
        assert "classifier.weight" in str(excinfo.value)

    def test_history_csv(self, tiny_splits, tmp_path):
        _, history = fit(tiny_model_config(), tiny_splits, FAST)
        path = history.to_csv(tmp_path / "history.csv")
        assert path.read_text().splitlines()[0] == "epoch,train_loss,valid_metric"

    @pytest.mark.slow
    def test_learns_separable_task(self):
        config = SyntheticConfig(n_train=600, n_eval=200, vocab_size=100, seq_len=16, seed=3)
        in_domain, _ = synthetic_id_ood(config)
        train_ds, valid_ds, test_ds = split_synthetic(in_domain, config)
        splits = DataSplits(train_ds, valid_ds, test_ds)
        model_config = tiny_model_config(vocab_size=100, max_seq_len=16, num_heads=4, emb_dim=32, ffn_hidden_dim=32)
        _, history = fit(model_config, splits, TrainConfig(lr=3e-3, batch_size=32, max_epochs=20, dropout_rate=0.0, seed=1))
        assert history.best_metric >= 0.95

    @pytest.mark.slow
    @pytest.mark.parametrize("mode", list(AttentionMode))
    def test_training_loss_does_not_increase(self, mode):
        config = SyntheticConfig(n_train=600, n_eval=200, vocab_size=100, seq_len=16, seed=3)
        in_domain, _ = synthetic_id_ood(config)
        splits = DataSplits(*split_synthetic(in_domain, config))
        model_config = tiny_model_config(mode, vocab_size=100, max_seq_len=16, num_heads=4, emb_dim=32, ffn_hidden_dim=32)
        _, history = fit(model_config, splits, TrainConfig(lr=3e-3, batch_size=32, max_epochs=8, dropout_rate=0.0, seed=1))
        losses = [r["train_loss"] for r in history.records]
        assert all(np.isfinite(losses))
        assert all(later <= earlier + 0.05 for earlier, later in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]


class TestEnsemble:

    def test_members_differ(self, tiny_splits):
        members = train_ensemble(tiny_model_config(), tiny_splits, FAST, n=2, base_seed=10)
        assert np.abs(members[0].params["classifier.weight"].data - members[1].params["classifier.weight"].data).max() > 0

    def test_same_base_seed_same_ensemble(self, tiny_splits):
        a = train_ensemble(tiny_model_config(), tiny_splits, FAST, n=2, base_seed=10)
        b = train_ensemble(tiny_model_config(), tiny_splits, FAST, n=2, base_seed=10)
        for left, right in zip(a, b):
            for name in left.params:
                np.testing.assert_array_equal(left.params[name].data, right.params[name].data)

    def test_members_use_deterministic_attention(self, tiny_splits):
        members = train_ensemble(tiny_model_config(AttentionMode.STOCHASTIC), tiny_splits, FAST, n=2)
        assert all(m.config.attention.mode is AttentionMode.DETERMINISTIC for m in members)

    def test_member_matches_a_single_training_run(self, tiny_splits):
        members = train_ensemble(tiny_model_config(), tiny_splits, FAST, n=2, base_seed=10)
        single, _ = fit(tiny_model_config(), tiny_splits, replace(FAST, seed=11))
        for name in single.params:
            np.testing.assert_array_equal(members[1].params[name].data, single.params[name].data)

    def test_ensemble_of_one_reports_like_the_single_model(self, tiny_splits):
        model, _ = fit(tiny_model_config(), tiny_splits, FAST)
        test = tiny_splits.test
        ensemble_runs = multi_run_predict(EnsemblePredictor([model]), test, runs=10, rng=RngStream(2))
        single_runs = multi_run_predict(ModelPredictor(model), test, runs=1, rng=RngStream(2))
        np.testing.assert_array_equal(ensemble_runs.probabilities, single_runs.probabilities)
        assert summarize(ensemble_runs, test.labels).to_record() == summarize(single_runs, test.labels).to_record()
        assert example_report(ensemble_runs, test.labels) == example_report(single_runs, test.labels)

    def test_needs_two_members(self, tiny_splits):
        with pytest.raises(ConfigError):
            train_ensemble(tiny_model_config(), tiny_splits, FAST, n=1)


class TestMcDropoutModel:

    def test_rejects_bad_rate(self):
        model = init_model(tiny_model_config(dropout_rate=0.1), RngStream(0))
        with pytest.raises(ParameterError):
            mc_dropout_model(model, 1.0)

    @pytest.mark.parametrize("rate", [0.1, 0.5])
    def test_standard_rates_accepted(self, rate, tiny_splits):
        model = init_model(tiny_model_config(dropout_rate=0.1), RngStream(0))
        batch = tiny_splits.test.batch(np.arange(4))
        probabilities = mc_dropout_model(model, rate).predict_proba(batch, RngStream(1))
        np.testing.assert_allclose(probabilities.sum(axis=-1), 1.0, atol=1e-12)
