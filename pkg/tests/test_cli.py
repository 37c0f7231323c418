# tests/test_cli.py

import json

import pytest

import stotrans.main as cli
from stotrans.errors import TrainingDivergence
from stotrans.services.training_service import TrainHistory
from stotrans.services.verification_service import PropertyResult


def _train(run_config_file, out, *extra):
    return cli.main(["train", "--config", str(run_config_file), "--out", str(out), *extra])


class TestVerify:

    def test_subset_passes(self, tmp_path, capsys):
        code = cli.main(["verify", "--only", "matmul_oracle", "mode_collapse", "--out", str(tmp_path)])
        assert code == 0
        assert "All 2 properties passed" in capsys.readouterr().out
        assert (tmp_path / "verify.txt").read_text(encoding="utf-8").count("[PASS]") == 2

    def test_failure_exit_code(self, monkeypatch):
        monkeypatch.setattr(cli, "run_battery", lambda *args: [PropertyResult("matmul_oracle", 1.0, "<= 1e-12", False)])
        assert cli.main(["verify"]) == 4

    def test_unknown_property_is_rejected(self):
        with pytest.raises(SystemExit):
            cli.main(["verify", "--only", "nonexistent"])


class TestTrain:

    def test_writes_artifacts(self, tmp_path, run_config_file, capsys):
        out = tmp_path / "run"
        assert _train(run_config_file, out) == 0
        for name in ("model.ckpt", "vocab.json", "run_config.json", "history.csv", "run.log"):
            assert (out / name).is_file(), name
        assert "Best epoch" in capsys.readouterr().out
        assert json.loads((out / "run_config.json").read_text(encoding="utf-8"))["max_epochs"] == 2

    def test_same_seed_byte_identical(self, tmp_path, run_config_file):
        _train(run_config_file, tmp_path / "a", "--seed", "3")
        _train(run_config_file, tmp_path / "b", "--seed", "3")
        for name in ("history.csv", "model.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_data_file(self, tmp_path, run_config_file, capsys):
        missing = tmp_path / "nope.tsv"
        code = _train(run_config_file, tmp_path / "run", "--set", "data_source=tsv", "--set", f"train_path={missing}")
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, run_config_file, capsys):
        code = _train(run_config_file, tmp_path / "run", "--set", "max_epoch=3")
        assert code == 1
        assert "max_epochs" in capsys.readouterr().err

    def test_malformed_override(self, tmp_path, run_config_file):
        assert _train(run_config_file, tmp_path / "run", "--set", "max_epochs") == 1

    def test_divergence_keeps_history(self, tmp_path, run_config_file, monkeypatch):
        history = TrainHistory()
        history.add(1, 0.69, 0.5)

        def diverge(cfg, splits, attention=None):
            raise TrainingDivergence("non-finite loss at epoch 2 step 1", history)

        monkeypatch.setattr(cli, "train_run", diverge)
        out = tmp_path / "run"
        assert _train(run_config_file, out) == 3
        assert (out / "history.csv").read_text(encoding="utf-8").splitlines()[1].startswith("1,")
        assert not (out / "model.ckpt").exists()


class TestEval:

    def test_deterministic_checkpoint_has_zero_spread(self, tmp_path, run_config_file, capsys):
        out = tmp_path / "run"
        _train(run_config_file, out)
        capsys.readouterr()
        assert cli.main(["eval", "--checkpoint", str(out / "model.ckpt")]) == 0
        assert "metric: accuracy, T = 3" in capsys.readouterr().out
        records = [json.loads(line) for line in (out / "report.jsonl").read_text(encoding="utf-8").splitlines()]
        assert [r["dataset"] for r in records] == ["ID", "OOD"]
        assert all(r["std"] == 0.0 and r["T"] == 3 for r in records)
        assert (out / "examples.csv").is_file()

    def test_tsv_data_uses_the_saved_vocabulary(self, tmp_path, run_config_file):
        out = tmp_path / "run"
        _train(run_config_file, out)
        data = tmp_path / "test.tsv"
        data.write_text("1\tfiller20 apos0 apos1\n0\taneg4 filler21\n", encoding="utf-8")
        code = cli.main(["eval", "--checkpoint", str(out / "model.ckpt"), "--data", str(data),
                         "--runs", "2", "--mc-dropout", "0.1", "--out", str(tmp_path / "eval")])
        assert code == 0
        records = [json.loads(line) for line in (tmp_path / "eval" / "report.jsonl").read_text(encoding="utf-8").splitlines()]
        assert records[0]["method"] == "MC-dropout (η=0.1)"
        assert records[0]["T"] == 2

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "absent.ckpt")]) == 2


class TestCompare:

    def test_two_methods(self, tmp_path, run_config_file, capsys):
        out = tmp_path / "cmp"
        code = cli.main(["compare", "--config", str(run_config_file), "--out", str(out),
                         "--set", "methods=trans, h-sto"])
        assert code == 0
        text = capsys.readouterr().out
        assert "h-sto-trans (τ1=1, τ2=1)" in text
        records = [json.loads(line) for line in (out / "report.jsonl").read_text(encoding="utf-8").splitlines()]
        assert len(records) == 4
        trans_line = next(line for line in text.splitlines() if line.lstrip().startswith("trans"))
        assert trans_line.rstrip().endswith("0.00")
        assert (out / "history_trans.csv").is_file() and (out / "history_h-sto.csv").is_file()
