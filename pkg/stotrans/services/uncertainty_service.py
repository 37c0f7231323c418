# stotrans/services/uncertainty_service.py
"""
Multi-run predictive inference and the uncertainty reports built from it.

A RunMatrix holds T runs of class probabilities for every example. Metric
uncertainty is the sample standard deviation of the per-run metric; the
per-example view reports the spread of the probability of the true label.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from stotrans.engine.attention import AttentionMode, StochasticConfig
from stotrans.engine.model import TransformerClassifier, forward
from stotrans.engine.sampling import RngStream
from stotrans.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_RUNS = 10
KL_MAX_ROWS = 64
PROBABILITY_TOLERANCE = 1e-9
INFERENCE_BATCH_SIZE = 256


# --- metrics ---

def _label_vectors(predictions, truth):
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if predictions.shape != truth.shape:
        raise ShapeError(f"{predictions.size} predictions but {truth.size} labels")
    if truth.size == 0:
        raise ContractError("metrics need at least one example")
    return predictions, truth


def accuracy(predictions, truth) -> float:
    predictions, truth = _label_vectors(predictions, truth)
    return float(np.mean(predictions == truth))


def confusion_counts(predictions, truth):
    """(TP, TN, FP, FN) with class 1 as positive."""
    predictions, truth = _label_vectors(predictions, truth)
    if not np.isin(np.concatenate([predictions, truth]), (0, 1)).all():
        raise ContractError("MCC needs binary labels in {0, 1}")
    matrix = np.zeros((2, 2), dtype=np.int64)
    np.add.at(matrix, (truth, predictions), 1)
    return int(matrix[1, 1]), int(matrix[0, 0]), int(matrix[0, 1]), int(matrix[1, 0])


def mcc_from_counts(tp: int, tn: int, fp: int, fn: int) -> float:
    """Matthews correlation; 0 whenever a denominator factor is 0."""
    denominator = float(tp + fp) * float(tp + fn) * float(tn + fp) * float(tn + fn)
    if denominator == 0.0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(denominator))


def mcc(predictions, truth) -> float:
    return mcc_from_counts(*confusion_counts(predictions, truth))


METRICS: Dict[str, Callable[..., float]] = {"accuracy": accuracy, "mcc": mcc}


# --- multi-run inference ---

@dataclass
class RunMatrix:
    probabilities: np.ndarray  # (T, N, M)
    run_seeds: List[tuple] = field(default_factory=list)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.probabilities.ndim != 3 or self.probabilities.shape[0] < 1:
            raise ShapeError(f"run matrix must be (T >= 1, examples, classes), got {self.probabilities.shape}")
        sums = self.probabilities.sum(axis=-1)
        if np.abs(sums - 1.0).max(initial=0.0) > PROBABILITY_TOLERANCE:
            raise ContractError("every run probability vector must sum to 1")

    @property
    def runs(self) -> int:
        return int(self.probabilities.shape[0])

    @property
    def num_examples(self) -> int:
        return int(self.probabilities.shape[1])

    def labels(self) -> np.ndarray:
        """Argmax label per run and example, shape (T, N)."""
        return np.argmax(self.probabilities, axis=-1)

    def mean_prediction(self) -> np.ndarray:
        """Average of the T probability vectors per example."""
        return self.probabilities.mean(axis=0)


def multi_run_predict(predictor, dataset, runs: int = DEFAULT_RUNS, rng: Optional[RngStream] = None,
                      batch_size: int = INFERENCE_BATCH_SIZE) -> RunMatrix:
    """
    T independent passes over ``dataset``; run t draws from ``rng.split(t)``.

    An ensemble predictor always contributes exactly one run per member.
    """
    members = getattr(predictor, "num_members", None)
    if members:
        if runs != members:
            logger.debug(f"Ensemble evaluation uses its {members} members as runs (requested {runs})")
        runs = members
    if runs < 1:
        raise ContractError(f"need at least one inference run, got {runs}")
    if len(dataset) == 0:
        raise ContractError("cannot run inference on an empty dataset")

    rng = rng if rng is not None else RngStream(0)
    probabilities = []
    for t in range(runs):
        run_rng = rng.split(t)
        rows = [
            predictor.predict_proba(batch, run_rng.split(step), run=t)
            for step, batch in enumerate(dataset.batches(batch_size))
        ]
        probabilities.append(np.concatenate(rows, axis=0))
    logger.debug(f"Collected {runs} inference run(s) over {len(dataset)} {dataset.split} examples")
    return RunMatrix(np.stack(probabilities), [rng.split(t).path for t in range(runs)])


# --- reports ---

@dataclass
class UncertaintyReport:
    per_run: List[float]
    mean: float
    std: float
    metric: str = "accuracy"
    tag: str = "ID"
    method: str = ""
    runs: int = 1
    seed: Optional[int] = None

    def render(self) -> str:
        return f"{self.mean * 100:.2f} ± {self.std * 100:.3f}"

    def to_record(self) -> Dict[str, object]:
        return {
            "method": self.method, "dataset": self.tag, "metric": self.metric,
            "mean": self.mean, "std": self.std, "T": self.runs, "seed": self.seed,
        }


def sample_std(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1); 0 for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2 or np.all(values == values[0]):
        return 0.0
    return float(values.std(ddof=1))


def summarize(run_matrix: RunMatrix, truth, metric: str = "accuracy", tag: str = "ID",
              method: str = "", seed: Optional[int] = None) -> UncertaintyReport:
    """Per-run metric on argmax labels, then mean and sample std across runs."""
    if metric not in METRICS:
        raise ContractError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)}")
    scorer = METRICS[metric]
    per_run = [scorer(labels, truth) for labels in run_matrix.labels()]
    return UncertaintyReport(per_run, float(np.mean(per_run)), sample_std(per_run), metric, tag, method,
                             run_matrix.runs, seed)


@dataclass
class ExampleRecord:
    example_id: int
    label: int
    prob_corr_mean: float
    prob_corr_std: float
    correct: int
    total: int

    def render(self) -> str:
        return f"{self.prob_corr_mean:.2f} ± {self.prob_corr_std:.3f}, {self.correct}/{self.total}"

    def to_row(self) -> Dict[str, object]:
        return {
            "id": self.example_id, "label": self.label, "prob_corr_mean": self.prob_corr_mean,
            "prob_corr_std": self.prob_corr_std, "correct": self.correct, "total": self.total,
        }


def example_report(run_matrix: RunMatrix, truth) -> List[ExampleRecord]:
    """Per example: mean and sample std of p(true label) across runs and the correct-run count."""
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != (run_matrix.num_examples,):
        raise ShapeError(f"{truth.size} labels for {run_matrix.num_examples} examples")
    prob_correct = run_matrix.probabilities[:, np.arange(truth.size), truth]  # (T, N)
    correct = (run_matrix.labels() == truth[None, :]).sum(axis=0)
    stds = np.zeros(truth.size)
    if run_matrix.runs > 1:
        varying = (prob_correct != prob_correct[0]).any(axis=0)
        stds[varying] = prob_correct[:, varying].std(axis=0, ddof=1)
    return [
        ExampleRecord(i, int(truth[i]), float(prob_correct[:, i].mean()), float(stds[i]),
                      int(correct[i]), run_matrix.runs)
        for i in range(truth.size)
    ]


def mean_example_std(records: Sequence[ExampleRecord]) -> float:
    return float(np.mean([r.prob_corr_std for r in records])) if records else 0.0


# --- diagnostics ---

def kl_diagnostic(a, a_hat) -> float:
    """
    KL(a || a_hat) after renormalising both rows; 0 log 0 = 0.

    Returns +inf when a_hat puts zero mass where a does not.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    a_hat = np.asarray(a_hat, dtype=np.float64).ravel()
    if a.shape != a_hat.shape:
        raise ShapeError(f"KL needs rows of equal length, got {a.size} and {a_hat.size}")
    if (a < 0).any() or (a_hat < 0).any() or a.sum() <= 0 or a_hat.sum() <= 0:
        raise ContractError("KL needs non-negative rows with positive mass")
    a = a / a.sum()
    a_hat = a_hat / a_hat.sum()
    support = a > 0
    if (a_hat[support] == 0).any():
        return float("inf")
    return float(max(0.0, np.sum(a[support] * np.log(a[support] / a_hat[support]))))


def attention_kl_by_layer(model: TransformerClassifier, dataset, rng: RngStream,
                          max_rows: int = KL_MAX_ROWS) -> List[float]:
    """
    Mean KL between deterministic and stochastic attention rows per layer.

    Uses the first batch of ``dataset``; at most ``max_rows`` non-padding
    query rows per layer are sampled.
    """
    batch = dataset.batch(np.arange(min(len(dataset), max_rows)))
    reference: List[Dict[str, np.ndarray]] = []
    sampled: List[Dict[str, np.ndarray]] = []
    forward(model.with_attention(StochasticConfig(AttentionMode.DETERMINISTIC)), batch, capture=reference)
    forward(model, batch, stochastic=True, rng=rng.split(0), capture=sampled)

    keep = ~batch.pad_mask
    pick = rng.split(1)
    means = []
    for layer, (det, sto) in enumerate(zip(reference, sampled)):
        a, a_hat = det["values"], sto["values"]  # (B, H, L, L)
        rows = [(b, h, i) for b in range(a.shape[0]) for h in range(a.shape[1]) for i in range(a.shape[2]) if keep[b, i]]
        if len(rows) > max_rows:
            rows = [rows[j] for j in sorted(pick.choice(len(rows), size=max_rows, replace=False))]
        values = [kl_diagnostic(a[b, h, i], a_hat[b, h, i]) for b, h, i in rows]
        means.append(float(np.mean(values)))
        logger.debug(f"layer {layer}: mean attention KL {means[-1]:.6f} over {len(values)} rows")
    return means


@dataclass
class BiasVariance:
    bias_sq: float
    variance: float


def bias_variance(phi, f) -> BiasVariance:
    """
    ``phi`` is (runs, examples) predicted P(class 1); ``f`` the true function.

    bias^2 = mean_x (E[phi] - f)^2, variance = mean_x E[(phi - E[phi])^2].
    """
    phi = np.asarray(phi, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[1] != f.size:
        raise ShapeError(f"phi must be (runs, {f.size}), got {phi.shape}")
    expected = phi.mean(axis=0)
    return BiasVariance(float(np.mean((expected - f) ** 2)), float(np.mean(((phi - expected) ** 2).mean(axis=0))))


def bias_variance_probe(run_matrix: RunMatrix, dataset) -> BiasVariance:
    if getattr(dataset, "true_prob", None) is None:
        raise ContractError("the bias-variance probe needs a synthetic dataset with known class probabilities")
    if run_matrix.probabilities.shape[2] != 2:
        raise ContractError("the bias-variance probe is defined for binary tasks")
    return bias_variance(run_matrix.probabilities[:, :, 1], dataset.true_prob)
