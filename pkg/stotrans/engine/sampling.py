# stotrans/engine/sampling.py
"""
Seeded random streams, Gumbel(0, 1) noise and the Gumbel-Softmax relaxation.

Streams use NumPy's PCG64 bit generator seeded through ``SeedSequence`` with a
spawn key, so a (seed, stream path) pair yields the same sequence on every
platform and sibling streams never share state.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from stotrans.engine.tensor import Tensor, add, softmax
from stotrans.errors import ContractError, ParameterError

logger = logging.getLogger(__name__)

UNIFORM_CLAMP = 1e-12
SEED_MASK = (1 << 64) - 1

Shape = Union[int, Sequence[int]]


def _as_shape(shape: Shape) -> Tuple[int, ...]:
    return (int(shape),) if isinstance(shape, (int, np.integer)) else tuple(int(s) for s in shape)


def gumbel_transform(u: np.ndarray) -> np.ndarray:
    """g = -log(-log(u)) with u clamped to [1e-12, 1 - 1e-12]."""
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


class RngStream:
    """
    Single-owner random source identified by ``(seed, stream path)``.

    ``split(key)`` derives a child stream without advancing the parent, so a
    child is a pure function of the parent's identity and the key. Drawing
    from a stream advances it.
    """

    def __init__(self, seed: int, stream_id: int = 0, _path: Tuple[int, ...] = ()):
        self.seed = int(seed) & SEED_MASK
        self.stream_id = int(stream_id)
        self.path = tuple(_path) + (self.stream_id,)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"

    def split(self, key: int) -> "RngStream":
        return RngStream(self.seed, key, self.path)

    def uniform(self, shape: Shape) -> np.ndarray:
        return self._generator.random(shape)

    def gumbel(self, shape: Shape) -> np.ndarray:
        return gumbel_transform(self.uniform(shape))

    def normal(self, shape: Shape, std: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, size: Optional[Shape] = None):
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, values: Sequence, size: Optional[Shape] = None, replace: bool = True):
        return self._generator.choice(values, size=size, replace=replace)


class FrozenNoise:
    """
    Noise source with a fixed realisation.

    ``FrozenNoise()`` always yields zero Gumbel noise. ``FrozenNoise.replaying(rng)``
    records draws from ``rng`` on first use and replays the same sequence after
    ``rewind()``, which keeps noise fixed across repeated evaluations such as
    finite-difference checks.
    """

    def __init__(self, source: Optional[RngStream] = None):
        self._source = source
        self._draws: List[np.ndarray] = []
        self._cursor = 0
        self._children: Dict[int, "FrozenNoise"] = {}

    @classmethod
    def replaying(cls, source: RngStream) -> "FrozenNoise":
        return cls(source)

    @property
    def is_zero(self) -> bool:
        return self._source is None

    @property
    def draws(self) -> List[np.ndarray]:
        """Recorded draws in call order; empty for zero noise."""
        return list(self._draws)

    def rewind(self) -> None:
        self._cursor = 0
        for child in self._children.values():
            child.rewind()

    def split(self, key: int) -> "FrozenNoise":
        if self._source is None:
            return self
        if key not in self._children:
            self._children[key] = FrozenNoise(self._source.split(key))
        return self._children[key]

    def _replay(self, shape: Shape, draw) -> np.ndarray:
        if self._cursor < len(self._draws):
            value = self._draws[self._cursor]
            if value.shape != _as_shape(shape):
                raise ContractError(f"replayed noise has shape {value.shape}, requested {shape}")
        else:
            value = draw(shape)
            self._draws.append(value)
        self._cursor += 1
        return value

    def uniform(self, shape: Shape) -> np.ndarray:
        if self._source is None:
            raise ContractError("zero noise has no uniform draws; pass a real stream for dropout")
        return self._replay(shape, self._source.uniform)

    def gumbel(self, shape: Shape) -> np.ndarray:
        if self._source is None:
            return np.zeros(shape)
        return self._replay(shape, self._source.gumbel)


NoiseSource = Union[RngStream, FrozenNoise]


def gumbel_noise(shape: Shape, rng: NoiseSource) -> Tensor:
    """i.i.d. Gumbel(0, 1) samples; never gradient-tracked."""
    return Tensor(rng.gumbel(shape))


def gumbel_softmax(scores: Tensor, temperature: float, rng: NoiseSource, axis: int = -1) -> Tensor:
    """
    Soft Gumbel-Softmax sample softmax((scores + g) / temperature).

    Raw scores act as unnormalised log-weights. Fresh noise is drawn on every
    call; the result is differentiable with respect to ``scores``.
    """
    if not temperature > 0:
        raise ParameterError(f"gumbel_softmax temperature must be positive, got {temperature}")
    noise = gumbel_noise(scores.shape, rng)
    return softmax(add(scores, noise), axis=axis, temperature=temperature)


def sample_categorical(scores, rng: NoiseSource) -> int:
    """Gumbel-max draw argmax(scores + g). Not differentiable; kept off the training path."""
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ContractError("sample_categorical needs a non-empty score vector")
    return int(np.argmax(scores + rng.gumbel(scores.shape)))


def sample_categorical_batch(scores, count: int, rng: NoiseSource) -> np.ndarray:
    """``count`` independent Gumbel-max draws, vectorised."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ContractError("sample_categorical_batch needs a non-empty score vector")
    return np.argmax(scores[None, :] + rng.gumbel((count, scores.size)), axis=1)
