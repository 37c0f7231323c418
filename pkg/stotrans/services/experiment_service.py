# stotrans/services/experiment_service.py
"""
Turns a run config into datasets, models, training runs and uncertainty
evaluations. Every random choice derives from the config's top-level seed.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from stotrans.engine.attention import AttentionMode, StochasticConfig
from stotrans.engine.model import EnsemblePredictor, ModelConfig, ModelPredictor, TransformerClassifier
from stotrans.engine.sampling import RngStream
from stotrans.errors import ConfigError, DataError
from stotrans.json_validators import load_run_config
from stotrans.services.training_service import (
    TrainConfig,
    TrainHistory,
    fit,
    mc_dropout_model,
    train_ensemble,
)
from stotrans.services.uncertainty_service import (
    ExampleRecord,
    UncertaintyReport,
    attention_kl_by_layer,
    bias_variance_probe,
    example_report,
    mean_example_std,
    multi_run_predict,
    summarize,
)
from stotrans.text.datasets import DataSplits, LabeledDataset, TextRows, carve_validation, load_tsv, read_tsv, split
from stotrans.text.synthetic import SyntheticConfig, split_synthetic, synthetic_id_ood
from stotrans.text.tokenizer import build_vocab
from stotrans.utils import derive_seed

logger = logging.getLogger(__name__)

MODE_METHODS = {
    AttentionMode.DETERMINISTIC: "trans",
    AttentionMode.STOCHASTIC: "sto",
    AttentionMode.HIERARCHICAL: "h-sto",
}


def _num(value: float) -> str:
    return f"{value:g}"


class RunConfig:
    """Validated, merged run configuration with typed views for each subsystem."""

    def __init__(self, values: Mapping[str, Any]):
        self.values = dict(values)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None,
             overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        return cls(load_run_config(path, overrides))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def attention(self, mode: Optional[AttentionMode] = None) -> StochasticConfig:
        return StochasticConfig(
            mode=mode or self.values["mode"],
            tau=self.values["tau"],
            tau1=self.values["tau1"],
            tau2=self.values["tau2"],
        )

    def model_config(self, vocab_size: int, num_classes: int,
                     attention: Optional[StochasticConfig] = None) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            num_classes=num_classes,
            num_layers=self.values["num_layers"],
            num_heads=self.values["num_heads"],
            emb_dim=self.values["emb_dim"],
            ffn_hidden_dim=self.values["ffn_hidden_dim"],
            max_seq_len=self.values["max_seq_len"],
            dropout_rate=self.values["dropout_rate"],
            attention=attention or self.attention(),
            centroid_count=self.values["centroids"],
            alpha=self.values["alpha"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.values["lr"],
            batch_size=self.values["batch_size"],
            max_epochs=self.values["max_epochs"],
            eval_every=self.values["eval_every"],
            dropout_rate=self.values["dropout_rate"],
            seed=derive_seed(self.seed, "train"),
            selection_metric=self.values["metric"],
            grad_clip=self.values["grad_clip"],
        )

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_train=self.values["synthetic_n_train"],
            n_eval=self.values["synthetic_n_eval"],
            vocab_size=self.values["synthetic_vocab_size"],
            seq_len=self.values["synthetic_seq_len"],
            seed=derive_seed(self.seed, "synthetic"),
            cues_per_example=self.values["synthetic_cues"],
        )

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.values, indent=4, sort_keys=True), encoding="utf-8")
        return path


# --- data ---

def _tsv_splits(cfg: RunConfig) -> DataSplits:
    max_len = cfg["max_seq_len"]
    texts, labels, malformed = read_tsv(cfg["train_path"])
    rows = TextRows(texts, labels)
    rng = RngStream(derive_seed(cfg.seed, "split"))

    if cfg["test_path"]:
        test_rows = TextRows(*read_tsv(cfg["test_path"])[:2], split="test")
        if cfg["valid_path"]:
            train_rows, valid_rows = rows, TextRows(*read_tsv(cfg["valid_path"])[:2], split="valid")
        else:
            train_rows, valid_rows = carve_validation(rows, cfg["valid_fraction"], rng)
    else:
        if cfg["valid_path"]:
            raise ConfigError(["valid_path needs test_path; without a test file the train file is split three ways"])
        train_rows, valid_rows, test_rows = split(rows, cfg["split_fractions"], rng)

    for part in (train_rows, valid_rows, test_rows):
        if not len(part):
            raise DataError(f"the {part.split} split is empty")

    vocab = build_vocab(train_rows.texts, min_freq=cfg["min_freq"], max_size=cfg["max_vocab"])
    num_classes = max(2, max(train_rows.labels + valid_rows.labels + test_rows.labels) + 1)
    train, valid, test = (part.encode(vocab, max_len, num_classes) for part in (train_rows, valid_rows, test_rows))
    train.malformed_count = malformed
    ood = None
    if cfg["ood_path"]:
        ood = load_tsv(cfg["ood_path"], vocab, "ood", max_len, num_classes=num_classes)
    logger.info(f"TSV splits: {len(train)} train / {len(valid)} valid / {len(test)} test"
                + (f" / {len(ood)} ood" if ood is not None else "") + f", vocab {len(vocab)}")
    return DataSplits(train, valid, test, ood)


def build_splits(cfg: RunConfig) -> DataSplits:
    if cfg["data_source"] == "synthetic":
        synthetic = cfg.synthetic_config()
        in_domain, out_of_domain = synthetic_id_ood(synthetic)
        train, valid, test = split_synthetic(in_domain, synthetic)
        return DataSplits(train, valid, test, out_of_domain)
    return _tsv_splits(cfg)


# --- training ---

def train_run(cfg: RunConfig, splits: DataSplits,
              attention: Optional[StochasticConfig] = None) -> Tuple[TransformerClassifier, TrainHistory]:
    model_config = cfg.model_config(len(splits.vocab), splits.train.num_classes, attention)
    return fit(model_config, splits, cfg.train_config())


# --- evaluation ---

@dataclass
class Evaluation:
    method: str
    id_report: UncertaintyReport
    id_examples: List[ExampleRecord]
    ood_report: Optional[UncertaintyReport] = None
    ood_examples: Optional[List[ExampleRecord]] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    key: str = ""


def _evaluate_split(predictor, dataset: LabeledDataset, runs: int, rng: RngStream, metric: str,
                    tag: str, method: str, seed: int, diagnostics: Dict[str, Any]):
    matrix = multi_run_predict(predictor, dataset, runs, rng)
    report = summarize(matrix, dataset.labels, metric, tag, method, seed)
    examples = example_report(matrix, dataset.labels)
    prefix = tag.lower()
    diagnostics[f"{prefix}_mean_example_std"] = mean_example_std(examples)
    if dataset.has_ground_truth and matrix.probabilities.shape[2] == 2:
        probe = bias_variance_probe(matrix, dataset)
        diagnostics[f"{prefix}_bias_sq"] = probe.bias_sq
        diagnostics[f"{prefix}_variance"] = probe.variance
    return report, examples


def evaluate(predictor, test: LabeledDataset, ood: Optional[LabeledDataset] = None, runs: int = 10,
             seed: int = 0, metric: str = "accuracy", method: str = "") -> Evaluation:
    """T-run uncertainty evaluation on the in-domain test split and, if given, the OOD split."""
    rng = RngStream(derive_seed(seed, "eval"))
    diagnostics: Dict[str, Any] = {}
    id_report, id_examples = _evaluate_split(predictor, test, runs, rng.split(0), metric, "ID", method, seed, diagnostics)
    evaluation = Evaluation(method, id_report, id_examples, diagnostics=diagnostics)
    if ood is not None:
        evaluation.ood_report, evaluation.ood_examples = _evaluate_split(
            predictor, ood, runs, rng.split(1), metric, "OOD", method, seed, diagnostics)
    logger.info(
        f"{method or 'model'}: ID {id_report.render()}"
        + (f", OOD {evaluation.ood_report.render()}" if evaluation.ood_report else "")
    )
    return evaluation


def method_label(key: str, attention: Optional[StochasticConfig] = None, dropout_rate: Optional[float] = None,
                 rate: Optional[float] = None, members: Optional[int] = None) -> str:
    """Table label such as "h-sto-trans (τ1=1, τ2=20)"."""
    attention = attention or StochasticConfig()
    if key == "trans":
        return f"trans (η={_num(dropout_rate)})" if dropout_rate is not None else "trans"
    if key == "sto":
        return f"sto-trans (τ={_num(attention.tau)})"
    if key == "h-sto":
        return f"h-sto-trans (τ1={_num(attention.tau1)}, τ2={_num(attention.tau2)})"
    if key == "mc-dropout":
        return f"MC-dropout (η={_num(rate)})"
    return f"ensemble (N={members})"


def _diagnose_attention(model: TransformerClassifier, test: LabeledDataset, cfg: RunConfig,
                        evaluation: Evaluation) -> None:
    if model.config.attention.is_stochastic:
        evaluation.diagnostics["attention_kl"] = attention_kl_by_layer(
            model, test, RngStream(derive_seed(cfg.seed, "attention-kl")))


def compare(cfg: RunConfig, splits: DataSplits) -> Tuple[List[Evaluation], Dict[str, TrainHistory]]:
    """
    Train and evaluate every configured method on the same data and seeds.

    MC-dropout rows reuse the deterministic model; one row is produced per
    configured dropout rate.
    """
    runs, metric, seed = cfg["runs"], cfg["metric"], cfg.seed
    rows: List[Evaluation] = []
    histories: Dict[str, TrainHistory] = {}
    trained: Dict[AttentionMode, TransformerClassifier] = {}

    def _model(mode: AttentionMode) -> TransformerClassifier:
        if mode not in trained:
            model, history = train_run(cfg, splits, cfg.attention(mode))
            trained[mode] = model
            histories[MODE_METHODS[mode]] = history
        return trained[mode]

    for key in cfg["methods"]:
        if key in ("trans", "sto", "h-sto"):
            mode = next(m for m, k in MODE_METHODS.items() if k == key)
            model = _model(mode)
            label = method_label(key, cfg.attention(mode), cfg["dropout_rate"])
            row = evaluate(ModelPredictor(model), splits.test, splits.ood, runs, seed, metric, label)
            _diagnose_attention(model, splits.test, cfg, row)
            row.key = key
            rows.append(row)
        elif key == "mc-dropout":
            model = _model(AttentionMode.DETERMINISTIC)
            for rate in cfg["mc_dropout_rates"]:
                label = method_label(key, rate=rate)
                row = evaluate(mc_dropout_model(model, rate), splits.test, splits.ood, runs, seed, metric, label)
                row.key = key
                rows.append(row)
        else:
            model_config = cfg.model_config(len(splits.vocab), splits.train.num_classes)
            members = train_ensemble(model_config, splits, cfg.train_config(), cfg["ensemble_size"],
                                     base_seed=derive_seed(seed, "ensemble") % (2 ** 32), workers=cfg["workers"])
            row = evaluate(EnsemblePredictor(members), splits.test, splits.ood, runs, seed, metric,
                           method_label(key, members=cfg["ensemble_size"]))
            row.key = key
            rows.append(row)
    return rows, histories


def sweep(cfg: RunConfig, splits: DataSplits) -> List[Dict[str, Any]]:
    """
    Temperature sweep: sto-trans over ``sweep_taus`` and h-sto-trans over the
    ``sweep_tau1s`` x ``sweep_tau2s`` grid. Returns plot-ready rows.
    """
    grid: List[Tuple[str, StochasticConfig]] = [
        ("sto", StochasticConfig(AttentionMode.STOCHASTIC, tau=tau)) for tau in cfg["sweep_taus"]
    ]
    grid += [
        ("h-sto", StochasticConfig(AttentionMode.HIERARCHICAL, tau1=tau1, tau2=tau2))
        for tau1 in cfg["sweep_tau1s"] for tau2 in cfg["sweep_tau2s"]
    ]
    rows = []
    for key, attention in grid:
        model, _ = train_run(cfg, splits, attention)
        label = method_label(key, attention)
        result = evaluate(ModelPredictor(model), splits.test, splits.ood, cfg["runs"], cfg.seed, cfg["metric"], label)
        rows.append({
            "method": key,
            "tau": attention.tau if key == "sto" else None,
            "tau1": attention.tau1 if key == "h-sto" else None,
            "tau2": attention.tau2 if key == "h-sto" else None,
            "id_mean": result.id_report.mean,
            "id_std": result.id_report.std,
            "ood_mean": result.ood_report.mean if result.ood_report else None,
            "ood_std": result.ood_report.std if result.ood_report else None,
        })
    return rows
