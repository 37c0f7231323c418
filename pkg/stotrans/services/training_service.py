# stotrans/services/training_service.py
"""
Training: negative log-likelihood, Adam, the epoch loop with validation-based
model selection, and construction of the MC-dropout and ensemble baselines.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from stotrans.engine.attention import AttentionMode, StochasticConfig
from stotrans.engine.model import (
    MCDropoutPredictor,
    ModelConfig,
    TransformerClassifier,
    forward,
    init_model,
    predict_proba,
)
from stotrans.engine.sampling import RngStream
from stotrans.engine.tensor import Tape, Tensor, log_softmax, mean_all, select
from stotrans.errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericalError,
    ParameterError,
    ShapeError,
    TrainingDivergence,
)
from stotrans.services.uncertainty_service import METRICS

logger = logging.getLogger(__name__)

DEFAULT_ENSEMBLE_SIZE = 10
EVAL_BATCH_SIZE = 256

# stream keys under a training seed
_INIT_STREAM = 0
_TRAIN_STREAM = 1
_VALID_STREAM = 0


def nll_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"nll_loss needs (batch, classes) logits and one label per row, got {logits.shape} and {labels.shape}")
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return -mean_all(select(log_softmax(logits, axis=-1), labels))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update, applied in place to ``params``.

    Only parameters present in ``grads`` move. A non-finite gradient aborts
    the step before any parameter changes.
    """
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name}")
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for parameter {name} at step {state.t + 1}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, grad in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * grad if m is None else state.beta1 * m + (1.0 - state.beta1) * grad
        v = (1.0 - state.beta2) * grad * grad if v is None else state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        params[name].data = params[name].data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the original norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 50
    eval_every: int = 1
    dropout_rate: float = 0.1
    seed: int = 0
    selection_metric: str = "accuracy"
    grad_clip: Optional[float] = None

    def validate(self) -> Tuple[bool, List[str]]:
        errors = []
        if not self.lr > 0:
            errors.append(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            errors.append(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.eval_every < 1:
            errors.append(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 <= self.dropout_rate < 1.0:
            errors.append(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.selection_metric not in METRICS:
            errors.append(f"selection_metric must be one of {sorted(METRICS)}, got {self.selection_metric!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            errors.append(f"grad_clip must be positive when set, got {self.grad_clip}")
        return len(errors) == 0, errors


@dataclass
class TrainHistory:
    records: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_metric: Optional[float] = None
    metric_name: str = "accuracy"

    def add(self, epoch: int, train_loss: float, valid_metric: float) -> bool:
        """Append a record; True when it becomes the selected model."""
        self.records.append({"epoch": epoch, "train_loss": train_loss, "valid_metric": valid_metric})
        if self.best_metric is None or valid_metric > self.best_metric:
            self.best_epoch, self.best_metric = epoch, valid_metric
            return True
        return False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=["epoch", "train_loss", "valid_metric"])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")
        return path


def evaluate_split(model: TransformerClassifier, dataset, metric: str = "accuracy",
                   rng: Optional[RngStream] = None, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Metric of a single inference pass; stochastic models draw noise from ``rng``."""
    predictions = []
    for step, batch in enumerate(dataset.batches(batch_size)):
        stream = None if rng is None else rng.split(step)
        predictions.append(np.argmax(predict_proba(model, batch, rng=stream), axis=-1))
    return METRICS[metric](np.concatenate(predictions), dataset.labels)


def train(model: TransformerClassifier, splits, cfg: TrainConfig,
          rng: RngStream) -> Tuple[TransformerClassifier, TrainHistory]:
    """
    Train ``model`` in place and return a copy of the epoch with the best
    validation metric, plus the history.

    ``splits`` must expose ``train`` and ``valid`` datasets. Any non-finite
    value aborts with TrainingDivergence carrying the history so far.
    """
    is_valid, errors = cfg.validate()
    if not is_valid:
        raise ConfigError(errors)
    if model.config.dropout_rate != cfg.dropout_rate:
        raise ConfigError([f"model dropout_rate {model.config.dropout_rate} disagrees with training dropout_rate {cfg.dropout_rate}"])
    train_ds, valid_ds = splits.train, splits.valid
    if len(train_ds) == 0 or len(valid_ds) == 0:
        raise DataError(f"training needs non-empty train and valid splits, got {len(train_ds)} and {len(valid_ds)}")

    history = TrainHistory(metric_name=cfg.selection_metric)
    state = AdamState(lr=cfg.lr)
    params = model.parameters()
    valid_rng = rng.split(_VALID_STREAM)
    best_model = model.copy()
    mode = model.config.attention.mode.value

    logger.info(
        f"Training {mode} model: {len(train_ds)} train / {len(valid_ds)} valid examples, "
        f"lr={cfg.lr}, batch_size={cfg.batch_size}, max_epochs={cfg.max_epochs}"
    )
    epoch = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            epoch_rng = rng.split(epoch)
            order = epoch_rng.split(0).permutation(len(train_ds))
            losses = []
            for step, batch in enumerate(train_ds.batches(cfg.batch_size, order), start=1):
                model.zero_grad()
                with Tape() as tape:
                    logits = forward(model, batch, train_mode=True, rng=epoch_rng.split(step))
                    loss = nll_loss(logits, batch.labels)
                tape.backward(loss)
                grads = {name: p.grad for name, p in params.items() if p.grad is not None}
                if cfg.grad_clip is not None:
                    clip_gradients(grads, cfg.grad_clip)
                adam_step(params, grads, state)
                losses.append(loss.item())
                logger.debug(f"epoch {epoch} step {step}: loss {losses[-1]:.6f}")

            train_loss = float(np.mean(losses))
            if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
                metric = evaluate_split(model, valid_ds, cfg.selection_metric, valid_rng)
                if history.add(epoch, train_loss, metric):
                    best_model = model.copy()
                logger.info(f"Epoch {epoch}: train loss {train_loss:.4f}, valid {cfg.selection_metric} {metric:.4f}")
    except NumericalError as e:
        logger.error(f"Training diverged at epoch {epoch}: {e}")
        raise TrainingDivergence(f"training diverged at epoch {epoch}: {e}", history)
    finally:
        model.zero_grad()

    logger.info(f"Selected epoch {history.best_epoch} ({cfg.selection_metric} {history.best_metric:.4f})")
    return best_model, history


def fit(model_config: ModelConfig, splits, cfg: TrainConfig) -> Tuple[TransformerClassifier, TrainHistory]:
    """Initialise from ``cfg.seed`` and train; a pure function of its arguments."""
    root = RngStream(cfg.seed)
    model = init_model(replace(model_config, seed=cfg.seed), root.split(_INIT_STREAM))
    return train(model, splits, cfg, root.split(_TRAIN_STREAM))


def _fit_member(args) -> Tuple[TransformerClassifier, TrainHistory]:
    model_config, splits, cfg = args
    return fit(model_config, splits, cfg)


def train_ensemble(model_config: ModelConfig, splits, cfg: TrainConfig, n: int = DEFAULT_ENSEMBLE_SIZE,
                   base_seed: int = 0, workers: int = 1) -> List[TransformerClassifier]:
    """
    N deterministic-attention models with seeds base_seed + 0 .. N-1.

    With ``workers`` > 1 members train in separate processes; results are
    identical to the sequential run.
    """
    if n < 2:
        raise ConfigError([f"an ensemble needs at least 2 members, got {n}"])
    member_config = model_config.with_attention(StochasticConfig(AttentionMode.DETERMINISTIC))
    jobs = [(member_config, splits, replace(cfg, seed=base_seed + i)) for i in range(n)]
    logger.info(f"Training ensemble of {n} members (seeds {base_seed}..{base_seed + n - 1}, workers={workers})")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_member, jobs))
    else:
        results = [_fit_member(job) for job in jobs]
    return [model for model, _ in results]


def mc_dropout_model(model: TransformerClassifier, rate: float) -> MCDropoutPredictor:
    """Inference wrapper that keeps dropout active with rate ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"MC-dropout rate must lie in [0, 1), got {rate}")
    if model.config.dropout_rate == 0.0:
        logger.warning("MC-dropout requested for a model trained without dropout")
    return MCDropoutPredictor(model, rate)
