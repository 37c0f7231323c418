# stotrans/services/verification_service.py
"""
Property battery behind the ``verify`` command.

Each check takes its own random stream and returns a PropertyResult with
the measured statistic and whether it met its threshold.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from stotrans.engine.attention import (
    AttentionMode,
    AttentionParams,
    CentroidSet,
    StochasticConfig,
    attend,
    centroid_bound_check,
    deterministic_mhsa,
    stochastic_mhsa,
)
from stotrans.engine.model import ModelConfig, init_model, predict_proba
from stotrans.engine.sampling import FrozenNoise, RngStream, gumbel_softmax, sample_categorical_batch
from stotrans.engine.tensor import Tape, Tensor, dropout, matmul, mul, softmax, sum_all
from stotrans.text.datasets import Batch

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
DEFAULT_TRIALS = 1000
DEFAULT_FORWARDS = 10000
GRADIENT_TOLERANCE = 1e-4
FINITE_DIFFERENCE_STEP = 1e-6
SWEEP_TAUS = (0.1, 1.0, 10.0, 100.0)
BOUND_TAUS = (0.5, 1.0, 2.0)


@dataclass
class PropertyResult:
    name: str
    statistic: float
    threshold: str
    passed: bool
    seconds: float = 0.0

    def render(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<32} {self.statistic:.6g} ({self.threshold}) {self.seconds:.2f}s"


# --- sampling properties ---

def check_gumbel_mean(rng: RngStream, samples: int = 1_000_000) -> PropertyResult:
    mean = float(rng.gumbel(samples).mean())
    error = abs(mean - EULER_GAMMA)
    return PropertyResult("gumbel_mean", mean, f"|mean - {EULER_GAMMA:.4f}| <= 0.01", error <= 0.01)


def check_gumbel_max_law(rng: RngStream, samples: int = 100_000) -> PropertyResult:
    draws = sample_categorical_batch([math.log(2.0), 0.0], samples, rng)
    frequency = float(np.mean(draws == 0))
    return PropertyResult("gumbel_max_law", frequency, "|freq - 2/3| <= 0.01", abs(frequency - 2.0 / 3.0) <= 0.01)


def check_softmax_stability(rng: RngStream) -> PropertyResult:
    logits = rng.normal((16, 9), 10.0)
    shifted = softmax(Tensor(logits + 1000.0), temperature=0.5).data
    plain = softmax(Tensor(logits), temperature=0.5).data
    error = float(np.abs(shifted - plain).max())
    error = max(error, float(np.abs(shifted.sum(axis=-1) - 1.0).max()))
    return PropertyResult("softmax_stability", error, "<= 1e-12", error <= 1e-12)


def check_matmul_oracle(rng: RngStream) -> PropertyResult:
    a, b = rng.normal((2, 3, 4)), rng.normal((4, 5))
    naive = np.zeros((2, 3, 5))
    for n in range(2):
        for i in range(3):
            for j in range(5):
                naive[n, i, j] = sum(a[n, i, k] * b[k, j] for k in range(4))
    error = float(np.abs(matmul(Tensor(a), Tensor(b)).data - naive).max())
    return PropertyResult("matmul_oracle", error, "<= 1e-12", error <= 1e-12)


def check_dropout_expectation(rng: RngStream, rate: float = 0.5) -> PropertyResult:
    kept = dropout(Tensor(np.ones((1000, 100))), rate, True, rng).data
    mean = float(kept.mean())
    return PropertyResult("dropout_expectation", mean, "|mean - 1| <= 0.02", abs(mean - 1.0) <= 0.02)


def _entropy(p: np.ndarray) -> np.ndarray:
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def check_temperature_monotonicity(rng: RngStream, draws: int = 1000, length: int = 8) -> PropertyResult:
    """Mean entropy of Gumbel-Softmax samples must not decrease as tau grows (common noise)."""
    scores = Tensor(np.broadcast_to(rng.split(0).normal(length, 2.0), (draws, length)))
    noise = FrozenNoise.replaying(rng.split(1))
    entropies = []
    for tau in SWEEP_TAUS:
        noise.rewind()
        entropies.append(float(_entropy(gumbel_softmax(scores, tau, noise).data).mean()))
    steps = np.diff(entropies)
    worst = float(steps.min())
    logger.debug(f"entropy by tau {dict(zip(SWEEP_TAUS, entropies))}")
    return PropertyResult("temperature_monotonicity", worst, "min entropy step >= -1e-12", worst >= -1e-12)


# --- attention properties ---

def _attention_instance(rng: RngStream, emb_dim: int = 8, num_heads: int = 2, centroids: int = 4):
    params = AttentionParams.initialize(emb_dim, num_heads, rng.split(0), std=0.5)
    centroid_set = CentroidSet.initialize(emb_dim // num_heads, centroids, rng.split(1))
    return params, centroid_set


def check_normalization_sweep(rng: RngStream, forwards: int = DEFAULT_FORWARDS, chunk: int = 100) -> PropertyResult:
    """Attention rows and class-probability vectors sum to 1 in every mode."""
    worst = 0.0
    modes = (
        StochasticConfig(AttentionMode.DETERMINISTIC),
        StochasticConfig(AttentionMode.STOCHASTIC, tau=1.0),
        StochasticConfig(AttentionMode.HIERARCHICAL, tau1=1.0, tau2=1.0),
    )
    for m, config in enumerate(modes):
        mode_rng = rng.split(m)
        for step in range(max(1, math.ceil(forwards / chunk))):
            step_rng = mode_rng.split(step)
            params, centroids = _attention_instance(step_rng.split(0))
            x = Tensor(step_rng.split(1).normal((chunk, 4, 8)))
            lengths = step_rng.split(2).integers(1, 5, size=chunk)
            mask = np.arange(4)[None, :] >= lengths[:, None]
            _, weights = attend(x, params, config, step_rng.split(3), centroids, mask, return_weights=True)
            for rows in weights.values():
                if (rows < 0).any():
                    return PropertyResult("normalization_sweep", float(rows.min()), "rows non-negative", False)
                worst = max(worst, float(np.abs(rows.sum(axis=-1) - 1.0).max()))

        model = init_model(ModelConfig(vocab_size=20, num_heads=2, emb_dim=8, ffn_hidden_dim=8, max_seq_len=4,
                                       attention=config, centroid_count=4), mode_rng.split(10_000))
        ids = mode_rng.split(10_001).integers(2, 20, size=(chunk, 4))
        batch = Batch(ids, np.zeros_like(ids, dtype=bool), np.zeros(chunk, dtype=np.int64), np.arange(chunk))
        probabilities = predict_proba(model, batch, rng=mode_rng.split(10_002))
        worst = max(worst, float(np.abs(probabilities.sum(axis=-1) - 1.0).max()))
    return PropertyResult("normalization_sweep", worst, "max |row sum - 1| <= 1e-9", worst <= 1e-9)


def check_mode_collapse(rng: RngStream) -> PropertyResult:
    """Zero-noise stochastic attention at tau = alpha equals deterministic attention."""
    params, _ = _attention_instance(rng.split(0))
    x = Tensor(rng.split(1).normal((3, 4, 8)))
    mask = np.array([[False] * 4, [False, False, False, True], [False, True, True, True]])
    reference = deterministic_mhsa(x, params, mask).data
    collapsed = stochastic_mhsa(x, params, params.scale, FrozenNoise(), mask).data
    error = float(np.abs(reference - collapsed).max())
    return PropertyResult("mode_collapse", error, "<= 1e-12", error <= 1e-12)


def check_centroid_bound(rng: RngStream, trials: int = DEFAULT_TRIALS, head_dim: int = 16,
                         centroids: int = 16) -> PropertyResult:
    """Shared-noise centroid attention rows of nearby keys differ by at most eps ||C|| / tau."""
    worst_margin = -math.inf
    failures = 0
    for trial in range(trials):
        trial_rng = rng.split(trial)
        c = trial_rng.split(0).normal((head_dim, centroids))
        k_i = trial_rng.split(1).normal(head_dim)
        k_j = k_i + trial_rng.split(2).normal(head_dim, 10.0 ** trial_rng.split(3).uniform(1)[0] - 1.0)
        g = trial_rng.split(4).gumbel(centroids)
        tau = BOUND_TAUS[trial % len(BOUND_TAUS)]
        result = centroid_bound_check(k_i, k_j, c, tau, g)
        worst_margin = max(worst_margin, result.lhs - result.rhs)
        failures += not result.holds
    return PropertyResult("centroid_bound", worst_margin, f"lhs - rhs <= 1e-9 in {trials} trials", failures == 0)


# --- gradient checks ---

def attention_gradient_error(mode: AttentionMode, rng: RngStream, emb_dim: int = 8, num_heads: int = 2,
                             length: int = 4, centroids: int = 4) -> float:
    """
    Worst relative error between tape gradients and central differences of
    sum(attention(x) * R) over every weight matrix and the centroid set.
    Stochastic modes replay one frozen noise realisation for every evaluation.
    """
    params, centroid_set = _attention_instance(rng.split(0), emb_dim, num_heads, centroids)
    config = StochasticConfig(mode, tau=1.0, tau1=1.0, tau2=1.0)
    x = Tensor(rng.split(1).normal((length, emb_dim)))
    projection = Tensor(rng.split(2).normal((length, emb_dim)))
    noise = FrozenNoise.replaying(rng.split(3))
    tensors: Dict[str, Tensor] = dict(params.tensors(), centroids=centroid_set.centroids)

    def _loss() -> Tensor:
        noise.rewind()
        return sum_all(mul(attend(x, params, config, noise, centroid_set), projection))

    for tensor in tensors.values():
        tensor.zero_grad()
    with Tape() as tape:
        loss = _loss()
    tape.backward(loss)

    worst = 0.0
    for name, tensor in tensors.items():
        if mode is not AttentionMode.HIERARCHICAL and name == "centroids":
            continue
        analytic = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        numeric = np.zeros(tensor.shape)
        for index in np.ndindex(*tensor.shape):
            original = tensor.data[index]
            tensor.data[index] = original + FINITE_DIFFERENCE_STEP
            upper = _loss().item()
            tensor.data[index] = original - FINITE_DIFFERENCE_STEP
            lower = _loss().item()
            tensor.data[index] = original
            numeric[index] = (upper - lower) / (2.0 * FINITE_DIFFERENCE_STEP)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        error = float(np.linalg.norm(analytic - numeric) / scale)
        logger.debug(f"{mode.value} gradient check {name}: relative error {error:.3e}")
        worst = max(worst, error)
        tensor.zero_grad()
    return worst


def _gradient_check(mode: AttentionMode) -> Callable[[RngStream], PropertyResult]:
    def _check(rng: RngStream) -> PropertyResult:
        error = attention_gradient_error(mode, rng)
        return PropertyResult(f"gradient_check_{mode.value}", error, f"relative error <= {GRADIENT_TOLERANCE:g}",
                              error <= GRADIENT_TOLERANCE)
    return _check


# --- battery ---

def run_battery(seed: int = 0, trials: int = DEFAULT_TRIALS, forwards: int = DEFAULT_FORWARDS,
                only: Optional[List[str]] = None) -> List[PropertyResult]:
    """Run every property check on child streams of ``seed``; ``only`` restricts by name."""
    checks: Dict[str, Callable[[RngStream], PropertyResult]] = {
        "gumbel_mean": check_gumbel_mean,
        "gumbel_max_law": check_gumbel_max_law,
        "softmax_stability": check_softmax_stability,
        "matmul_oracle": check_matmul_oracle,
        "dropout_expectation": check_dropout_expectation,
        "temperature_monotonicity": check_temperature_monotonicity,
        "normalization_sweep": lambda r: check_normalization_sweep(r, forwards),
        "mode_collapse": check_mode_collapse,
        "centroid_bound": lambda r: check_centroid_bound(r, trials),
        "gradient_check_deterministic": _gradient_check(AttentionMode.DETERMINISTIC),
        "gradient_check_stochastic": _gradient_check(AttentionMode.STOCHASTIC),
        "gradient_check_hierarchical": _gradient_check(AttentionMode.HIERARCHICAL),
    }
    root = RngStream(seed)
    results = []
    for key, (name, check) in enumerate(checks.items()):
        if only and name not in only:
            continue
        started = time.perf_counter()
        result = check(root.split(key))
        result.seconds = time.perf_counter() - started
        log = logger.info if result.passed else logger.error
        log(result.render())
        results.append(result)
    return results


PROPERTY_NAMES = (
    "gumbel_mean", "gumbel_max_law", "softmax_stability", "matmul_oracle", "dropout_expectation",
    "temperature_monotonicity", "normalization_sweep", "mode_collapse", "centroid_bound",
    "gradient_check_deterministic", "gradient_check_stochastic", "gradient_check_hierarchical",
)
