# stotrans/engine/model.py
"""
Transformer text classifier: token and learned positional embeddings,
pre-norm attention/feed-forward blocks, masked mean pooling and a linear
classifier head whose softmax gives the class probabilities.
"""

import copy
import logging
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Protocol, Sequence

import numpy as np

from stotrans.engine.attention import (
    DEFAULT_CENTROIDS,
    AttentionParams,
    CentroidSet,
    StochasticConfig,
    attend,
)
from stotrans.engine.sampling import FrozenNoise, NoiseSource, RngStream
from stotrans.engine.tensor import (
    Tensor,
    add,
    dropout,
    embedding,
    layer_norm,
    masked_mean,
    matmul,
    relu,
    softmax,
)
from stotrans.errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

INIT_STD = 0.02
ZERO_NOISE = FrozenNoise()

# child-stream keys inside a forward pass
_EMBEDDING_STREAM = 0
_ATTENTION_NOISE = 0
_ATTENTION_DROPOUT = 1
_FFN_DROPOUT = 2


@dataclass
class ModelConfig:
    vocab_size: int
    num_classes: int = 2
    num_layers: int = 1
    num_heads: int = 8
    emb_dim: int = 128
    ffn_hidden_dim: int = 128
    max_seq_len: int = 256
    dropout_rate: float = 0.1
    attention: StochasticConfig = field(default_factory=StochasticConfig)
    centroid_count: int = DEFAULT_CENTROIDS
    alpha: Optional[float] = None
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.emb_dim // self.num_heads

    def to_flat(self) -> Dict[str, str]:
        """key=value view used by the checkpoint header."""
        flat: Dict[str, str] = {}
        for f in fields(self):
            if f.name == "attention":
                continue
            value = getattr(self, f.name)
            flat[f.name] = "none" if value is None else repr(value)
        flat["attention_mode"] = self.attention.mode.value
        flat["tau"] = repr(self.attention.tau)
        flat["tau1"] = repr(self.attention.tau1)
        flat["tau2"] = repr(self.attention.tau2)
        return flat

    @classmethod
    def from_flat(cls, flat: Dict[str, str]) -> "ModelConfig":
        from stotrans.json_validators import validate_model_config

        ints = ("vocab_size", "num_classes", "num_layers", "num_heads", "emb_dim",
                "ffn_hidden_dim", "max_seq_len", "centroid_count", "seed")
        try:
            kwargs: Dict[str, Any] = {name: int(flat[name]) for name in ints}
            kwargs["dropout_rate"] = float(flat["dropout_rate"])
            kwargs["alpha"] = None if flat["alpha"] == "none" else float(flat["alpha"])
            kwargs["attention"] = StochasticConfig(
                mode=flat["attention_mode"],
                tau=float(flat["tau"]),
                tau1=float(flat["tau1"]),
                tau2=float(flat["tau2"]),
            )
        except (KeyError, ValueError) as e:
            raise ConfigError([f"model config field missing or malformed: {e}"])
        config = cls(**kwargs)
        is_valid, errors = validate_model_config(config)
        if not is_valid:
            raise ConfigError(errors)
        return config

    def with_attention(self, attention: StochasticConfig) -> "ModelConfig":
        updated = copy.copy(self)
        updated.attention = attention
        return updated


class TransformerClassifier:
    """Named parameter store plus the config that fixes every shape."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def attention_params(self, layer: int) -> AttentionParams:
        prefix = f"layers.{layer}.attention"
        return AttentionParams(
            w_q=self.params[f"{prefix}.w_q"],
            w_k=self.params[f"{prefix}.w_k"],
            w_v=self.params[f"{prefix}.w_v"],
            num_heads=self.config.num_heads,
            alpha=self.config.alpha,
        )

    def centroid_set(self, layer: int) -> CentroidSet:
        return CentroidSet(self.params[f"layers.{layer}.centroids"])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "TransformerClassifier":
        params = {name: Tensor.parameter(p.data) for name, p in self.params.items()}
        return TransformerClassifier(copy.deepcopy(self.config), params)

    def with_attention(self, attention: StochasticConfig) -> "TransformerClassifier":
        """Same weights under another attention mode; shapes are mode independent."""
        return TransformerClassifier(self.config.with_attention(attention), self.params)


def init_model(config: ModelConfig, rng: RngStream) -> TransformerClassifier:
    """Build a classifier with N(0, 0.02) weights, zero biases and unit norm gains."""
    from stotrans.json_validators import validate_model_config

    is_valid, errors = validate_model_config(config)
    if not is_valid:
        raise ConfigError(errors)

    d, dh = config.emb_dim, config.head_dim
    params: Dict[str, Tensor] = {
        "embedding.tokens": Tensor.parameter(rng.split(0).normal((config.vocab_size, d), INIT_STD)),
        "embedding.positions": Tensor.parameter(rng.split(1).normal((config.max_seq_len, d), INIT_STD)),
    }
    for i in range(config.num_layers):
        layer_rng = rng.split(100 + i)
        attention = AttentionParams.initialize(d, config.num_heads, layer_rng.split(0), INIT_STD, config.alpha)
        for name, tensor in attention.tensors().items():
            params[f"layers.{i}.attention.{name}"] = tensor
        params[f"layers.{i}.centroids"] = CentroidSet.initialize(dh, config.centroid_count, layer_rng.split(1)).centroids
        params[f"layers.{i}.norm1.gamma"] = Tensor.parameter(np.ones(d))
        params[f"layers.{i}.norm1.beta"] = Tensor.parameter(np.zeros(d))
        params[f"layers.{i}.ffn.w1"] = Tensor.parameter(layer_rng.split(2).normal((d, config.ffn_hidden_dim), INIT_STD))
        params[f"layers.{i}.ffn.b1"] = Tensor.parameter(np.zeros(config.ffn_hidden_dim))
        params[f"layers.{i}.ffn.w2"] = Tensor.parameter(layer_rng.split(3).normal((config.ffn_hidden_dim, d), INIT_STD))
        params[f"layers.{i}.ffn.b2"] = Tensor.parameter(np.zeros(d))
        params[f"layers.{i}.norm2.gamma"] = Tensor.parameter(np.ones(d))
        params[f"layers.{i}.norm2.beta"] = Tensor.parameter(np.zeros(d))
    params["final_norm.gamma"] = Tensor.parameter(np.ones(d))
    params["final_norm.beta"] = Tensor.parameter(np.zeros(d))
    params["classifier.weight"] = Tensor.parameter(rng.split(2).normal((d, config.num_classes), INIT_STD))
    params["classifier.bias"] = Tensor.parameter(np.zeros(config.num_classes))

    model = TransformerClassifier(config, params)
    logger.info(
        f"Initialised {config.attention.mode.value} classifier: {config.num_layers} layer(s), "
        f"{config.num_heads} heads, d={d}, {model.parameter_count} parameters"
    )
    return model


def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Shape of every named parameter; a pure function of the config."""
    d, f = config.emb_dim, config.ffn_hidden_dim
    shapes: Dict[str, tuple] = {
        "embedding.tokens": (config.vocab_size, d),
        "embedding.positions": (config.max_seq_len, d),
    }
    for i in range(config.num_layers):
        for name in ("w_q", "w_k", "w_v"):
            shapes[f"layers.{i}.attention.{name}"] = (d, d)
        shapes[f"layers.{i}.centroids"] = (config.head_dim, config.centroid_count)
        shapes[f"layers.{i}.norm1.gamma"] = (d,)
        shapes[f"layers.{i}.norm1.beta"] = (d,)
        shapes[f"layers.{i}.ffn.w1"] = (d, f)
        shapes[f"layers.{i}.ffn.b1"] = (f,)
        shapes[f"layers.{i}.ffn.w2"] = (f, d)
        shapes[f"layers.{i}.ffn.b2"] = (d,)
        shapes[f"layers.{i}.norm2.gamma"] = (d,)
        shapes[f"layers.{i}.norm2.beta"] = (d,)
    shapes["final_norm.gamma"] = (d,)
    shapes["final_norm.beta"] = (d,)
    shapes["classifier.weight"] = (d, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def forward(model: TransformerClassifier, batch, train_mode: bool = False,
            stochastic: Optional[bool] = None, rng: Optional[RngStream] = None,
            mc_dropout_rate: Optional[float] = None,
            capture: Optional[List[Dict[str, np.ndarray]]] = None) -> Tensor:
    """
    Logits (batch, num_classes) for a padded batch.

    Dropout is active when ``train_mode`` is set or ``mc_dropout_rate`` is given
    (the latter also overrides the rate). Attention noise is drawn only when
    ``stochastic`` is true; it defaults to whether the configured mode is
    stochastic. Per-layer attention weights are appended to ``capture``.
    """
    cfg = model.config
    ids = np.asarray(batch.token_ids, dtype=np.int64)
    pad = np.asarray(batch.pad_mask, dtype=bool)
    if ids.ndim != 2 or pad.shape != ids.shape:
        raise ContractError(f"token ids {ids.shape} and padding mask {pad.shape} must be matching 2-D arrays")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError(f"token id outside vocabulary of size {cfg.vocab_size}")
    length = ids.shape[1]
    if length > cfg.max_seq_len:
        raise ContractError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")

    if stochastic is None:
        stochastic = cfg.attention.is_stochastic
    dropout_active = train_mode or mc_dropout_rate is not None
    rate = cfg.dropout_rate if mc_dropout_rate is None else mc_dropout_rate
    if rng is None and (stochastic or (dropout_active and rate > 0)):
        raise ContractError("a random stream is required for stochastic attention or active dropout")

    def _child(stream: Optional[RngStream], key: int) -> Optional[RngStream]:
        return None if stream is None else stream.split(key)

    x = add(embedding(model.params["embedding.tokens"], ids),
            embedding(model.params["embedding.positions"], np.arange(length)))
    x = dropout(x, rate, dropout_active, _child(rng, _EMBEDDING_STREAM))

    for i in range(cfg.num_layers):
        layer_rng = _child(rng, i + 1)
        p = model.params
        noise: NoiseSource = layer_rng.split(_ATTENTION_NOISE) if stochastic else ZERO_NOISE
        h = layer_norm(x, p[f"layers.{i}.norm1.gamma"], p[f"layers.{i}.norm1.beta"])
        attended = attend(h, model.attention_params(i), cfg.attention, noise,
                          model.centroid_set(i), pad, return_weights=capture is not None)
        if capture is not None:
            attended, weights = attended
            capture.append(weights)
        x = add(x, dropout(attended, rate, dropout_active, _child(layer_rng, _ATTENTION_DROPOUT)))

        h = layer_norm(x, p[f"layers.{i}.norm2.gamma"], p[f"layers.{i}.norm2.beta"])
        h = relu(add(matmul(h, p[f"layers.{i}.ffn.w1"]), p[f"layers.{i}.ffn.b1"]))
        h = add(matmul(h, p[f"layers.{i}.ffn.w2"]), p[f"layers.{i}.ffn.b2"])
        x = add(x, dropout(h, rate, dropout_active, _child(layer_rng, _FFN_DROPOUT)))

    x = layer_norm(x, model.params["final_norm.gamma"], model.params["final_norm.beta"])
    pooled = masked_mean(x, ~pad)
    return add(matmul(pooled, model.params["classifier.weight"]), model.params["classifier.bias"])


def predict_proba(model: TransformerClassifier, batch, **forward_kwargs) -> np.ndarray:
    """Class probabilities softmax(logits), shape (batch, num_classes)."""
    return softmax(forward(model, batch, **forward_kwargs), axis=-1).data


# --- predictors used for multi-run inference ---

class Predictor(Protocol):
    num_members: Optional[int]

    def predict_proba(self, batch, rng: Optional[RngStream], run: int = 0) -> np.ndarray:
        ...


class ModelPredictor:
    """Single model; noise and dropout follow the model's mode unless overridden."""

    num_members: Optional[int] = None

    def __init__(self, model: TransformerClassifier, stochastic: Optional[bool] = None):
        self.model = model
        self.stochastic = stochastic

    def predict_proba(self, batch, rng: Optional[RngStream], run: int = 0) -> np.ndarray:
        return predict_proba(self.model, batch, stochastic=self.stochastic, rng=rng)


class MCDropoutPredictor(ModelPredictor):
    """Keeps dropout active at inference with rate ``rate``; attention noise stays off."""

    def __init__(self, model: TransformerClassifier, rate: float):
        super().__init__(model, stochastic=False)
        self.rate = rate

    def predict_proba(self, batch, rng: Optional[RngStream], run: int = 0) -> np.ndarray:
        return predict_proba(self.model, batch, stochastic=False, rng=rng, mc_dropout_rate=self.rate)


class EnsemblePredictor:
    """Each run is one member's deterministic pass."""

    def __init__(self, members: Sequence[TransformerClassifier]):
        if not members:
            raise ContractError("an ensemble needs at least one member")
        self.members = list(members)

    @property
    def num_members(self) -> int:
        return len(self.members)

    def predict_proba(self, batch, rng: Optional[RngStream], run: int = 0) -> np.ndarray:
        return predict_proba(self.members[run], batch, stochastic=False, rng=None)
