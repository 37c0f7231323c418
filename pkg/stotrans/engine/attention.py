# stotrans/engine/attention.py
"""
Multi-head self-attention in three interchangeable modes.

- deterministic: a = softmax(q k^T / alpha)
- stochastic:    a = gumbel_softmax(q k^T, tau)
- hierarchical:  keys first attend stochastically to a learnable centroid set,
                 are rebuilt as centroid mixtures, then values are attended
                 stochastically through the rebuilt keys.

Inputs are (batch, length, dim) or (length, dim); padding masks mark padded
positions with True.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from stotrans.engine.sampling import NoiseSource, RngStream, gumbel_softmax
from stotrans.engine.tensor import (
    Tensor,
    add,
    matmul,
    reshape,
    softmax,
    swap_last,
    transpose,
)
from stotrans.errors import ContractError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9
DEFAULT_CENTROIDS = 16


class AttentionMode(str, Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"
    HIERARCHICAL = "hierarchical"


@dataclass(frozen=True)
class StochasticConfig:
    """Attention mode and the temperatures that control its softness."""

    mode: AttentionMode = AttentionMode.DETERMINISTIC
    tau: float = 1.0
    tau1: float = 1.0
    tau2: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", AttentionMode(self.mode))
        except ValueError:
            raise ParameterError(f"unknown attention mode '{self.mode}'")

    def validate(self) -> Tuple[bool, List[str]]:
        errors = []
        for name in ("tau", "tau1", "tau2"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                errors.append(f"{name} must be a positive real, got {value}")
        return len(errors) == 0, errors

    @property
    def is_stochastic(self) -> bool:
        return self.mode is not AttentionMode.DETERMINISTIC


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    num_heads: int
    alpha: Optional[float] = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.num_heads < 1 or d % self.num_heads != 0:
            raise ParameterError(f"embedding dim {d} is not divisible by {self.num_heads} heads")
        if self.alpha is not None and not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")

    @classmethod
    def initialize(cls, emb_dim: int, num_heads: int, rng: RngStream,
                   std: float = 0.02, alpha: Optional[float] = None) -> "AttentionParams":
        return cls(
            w_q=Tensor.parameter(rng.normal((emb_dim, emb_dim), std)),
            w_k=Tensor.parameter(rng.normal((emb_dim, emb_dim), std)),
            w_v=Tensor.parameter(rng.normal((emb_dim, emb_dim), std)),
            num_heads=num_heads,
            alpha=alpha,
        )

    @property
    def emb_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.emb_dim // self.num_heads

    @property
    def scale(self) -> float:
        return self.alpha if self.alpha is not None else math.sqrt(self.head_dim)

    def tensors(self) -> Dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


@dataclass
class CentroidSet:
    """Learnable head_dim x count matrix shared by every head of a layer."""

    centroids: Tensor

    @classmethod
    def initialize(cls, head_dim: int, count: int, rng: RngStream) -> "CentroidSet":
        if count < 1:
            raise ParameterError(f"centroid count must be at least 1, got {count}")
        return cls(Tensor.parameter(rng.normal((head_dim, count), 1.0 / math.sqrt(head_dim))))

    @property
    def head_dim(self) -> int:
        return self.centroids.shape[0]

    @property
    def count(self) -> int:
        return self.centroids.shape[1]


AttentionOutput = Union[Tensor, Tuple[Tensor, Dict[str, np.ndarray]]]


# --- shared plumbing ---

def _batched(x: Tensor, mask) -> Tuple[Tensor, Optional[np.ndarray], bool]:
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        return x, mask, True
    if x.ndim != 3:
        raise ShapeError(f"attention input must be (length, dim) or (batch, length, dim), got {x.shape}")
    return x, None if mask is None else np.asarray(mask, dtype=bool), False


def _split_heads(x: Tensor, weight: Tensor, num_heads: int) -> Tensor:
    b, l, d = x.shape
    projected = reshape(matmul(x, weight), (b, l, num_heads, d // num_heads))
    return transpose(projected, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _mask_bias(mask: Optional[np.ndarray], b: int, h: int, l: int) -> Optional[Tensor]:
    if mask is None:
        return None
    if mask.shape != (b, l):
        raise ShapeError(f"padding mask must be {(b, l)}, got {mask.shape}")
    if mask.all(axis=1).any():
        raise ContractError("a sequence has every position masked; attention rows would be empty")
    bias = np.where(mask, MASK_VALUE, 0.0)[:, None, None, :]
    return Tensor(np.broadcast_to(bias, (b, h, l, l)))


def _project(x: Tensor, params: AttentionParams, mask) -> Tuple[Tensor, Tensor, Tensor, Optional[Tensor], bool]:
    x, mask, squeeze = _batched(x, mask)
    if x.shape[-1] != params.emb_dim:
        raise ShapeError(f"input has {x.shape[-1]} columns, attention expects {params.emb_dim}")
    b, l, _ = x.shape
    q = _split_heads(x, params.w_q, params.num_heads)
    k = _split_heads(x, params.w_k, params.num_heads)
    v = _split_heads(x, params.w_v, params.num_heads)
    return q, k, v, _mask_bias(mask, b, params.num_heads, l), squeeze


def _scores(q: Tensor, k: Tensor, bias: Optional[Tensor]) -> Tensor:
    scores = matmul(q, swap_last(k))
    return scores if bias is None else add(scores, bias)


def _finish(heads: Tensor, weights: Dict[str, Tensor], squeeze: bool, return_weights: bool) -> AttentionOutput:
    out = _merge_heads(heads)
    if squeeze:
        out = reshape(out, out.shape[1:])
    if not return_weights:
        return out
    arrays = {name: (w.data[0] if squeeze else w.data) for name, w in weights.items()}
    return out, arrays


# --- the three mechanisms ---

def deterministic_mhsa(x: Tensor, params: AttentionParams, mask=None,
                       return_weights: bool = False) -> AttentionOutput:
    """Scaled dot-product attention per head, heads concatenated."""
    q, k, v, bias, squeeze = _project(x, params, mask)
    a = softmax(_scores(q, k, bias), axis=-1, temperature=params.scale)
    return _finish(matmul(a, v), {"values": a}, squeeze, return_weights)


def stochastic_mhsa(x: Tensor, params: AttentionParams, tau: float, rng: NoiseSource,
                    mask=None, return_weights: bool = False) -> AttentionOutput:
    """Attention weights sampled with Gumbel-Softmax at temperature ``tau``."""
    q, k, v, bias, squeeze = _project(x, params, mask)
    a = gumbel_softmax(_scores(q, k, bias), tau, rng)
    return _finish(matmul(a, v), {"values": a}, squeeze, return_weights)


def hierarchical_mhsa(x: Tensor, params: AttentionParams, centroids: CentroidSet,
                      tau1: float, tau2: float, rng: NoiseSource,
                      mask=None, return_weights: bool = False) -> AttentionOutput:
    """
    Two-stage stochastic attention.

    Keys sample an attention over centroids (tau1), each key is replaced by
    the resulting centroid mixture, and queries then sample an attention over
    values through the mixed keys (tau2). Centroid noise is drawn before value
    noise.
    """
    if centroids.head_dim != params.head_dim:
        raise ShapeError(
            f"centroids have dimension {centroids.head_dim}, key heads have {params.head_dim}"
        )
    q, k, v, bias, squeeze = _project(x, params, mask)
    c = centroids.centroids
    a_c = gumbel_softmax(matmul(k, c), tau1, rng)
    k_hat = matmul(a_c, swap_last(c))
    a_v = gumbel_softmax(_scores(q, k_hat, bias), tau2, rng)
    return _finish(matmul(a_v, v), {"values": a_v, "centroids": a_c}, squeeze, return_weights)


def attend(x: Tensor, params: AttentionParams, config: StochasticConfig, rng: NoiseSource,
           centroids: Optional[CentroidSet] = None, mask=None,
           return_weights: bool = False) -> AttentionOutput:
    """Dispatch to the mechanism selected by ``config.mode``."""
    if config.mode is AttentionMode.DETERMINISTIC:
        return deterministic_mhsa(x, params, mask, return_weights)
    if config.mode is AttentionMode.STOCHASTIC:
        return stochastic_mhsa(x, params, config.tau, rng, mask, return_weights)
    if centroids is None:
        raise ContractError("hierarchical attention needs a centroid set")
    return hierarchical_mhsa(x, params, centroids, config.tau1, config.tau2, rng, mask, return_weights)


# --- centroid attention bound ---

class CentroidBoundResult(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


def spectral_norm(matrix: np.ndarray, max_iterations: int = 1000, tol: float = 1e-13) -> float:
    """Largest singular value by power iteration on M^T M."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not matrix.any():
        return 0.0
    gram = matrix.T @ matrix
    v = np.ones(gram.shape[0]) + np.arange(gram.shape[0]) / gram.shape[0]
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iterations):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        updated = float(np.linalg.norm(matrix @ v))
        if abs(updated - estimate) <= tol * max(updated, 1.0):
            estimate = updated
            break
        estimate = updated
    return estimate


def centroid_bound_check(k_i, k_j, centroids: Union[CentroidSet, np.ndarray], tau: float, g,
                       epsilon: Optional[float] = None) -> CentroidBoundResult:
    """
    Check that centroid-attention rows of two keys differ by at most
    epsilon * ||C||_2 / tau under a shared noise realisation ``g``.
    """
    c = centroids.centroids.data if isinstance(centroids, CentroidSet) else np.asarray(centroids, dtype=np.float64)
    k_i = np.asarray(k_i, dtype=np.float64)
    k_j = np.asarray(k_j, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if c.ndim != 2 or k_i.shape != (c.shape[0],) or k_j.shape != (c.shape[0],):
        raise ShapeError(f"keys {k_i.shape}, {k_j.shape} do not match centroids {c.shape}")
    if g.shape != (c.shape[1],):
        raise ShapeError(f"noise has shape {g.shape}, expected {(c.shape[1],)}")
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    distance = float(np.linalg.norm(k_i - k_j))
    if epsilon is None:
        epsilon = distance
    elif distance > epsilon + 1e-12:
        raise ContractError(f"keys are {distance:.3g} apart, more than epsilon={epsilon:.3g}")

    a_i = softmax(Tensor(k_i @ c + g), temperature=tau).data
    a_j = softmax(Tensor(k_j @ c + g), temperature=tau).data
    lhs = float(np.linalg.norm(a_i - a_j))
    rhs = epsilon * spectral_norm(c) / tau
    return CentroidBoundResult(lhs, rhs, lhs <= rhs + 1e-9)
