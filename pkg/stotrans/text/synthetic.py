# stotrans/text/synthetic.py
"""
Synthetic in-domain / out-of-domain sentiment-like benchmark.

Every example holds ``cues_per_example`` polarity cues scattered among filler
tokens; the label is the majority cue polarity. In-domain examples draw cues
from sets A+ / A-, out-of-domain examples from B+ / B-. Both cue families
live in one shared vocabulary, but B tokens never occur in in-domain data.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from stotrans.engine.sampling import RngStream
from stotrans.errors import ConfigError, ContractError
from stotrans.text.datasets import LabeledDataset
from stotrans.text.tokenizer import Vocab

logger = logging.getLogger(__name__)

MIN_VOCAB_SIZE = 40
_RESERVED = 2
CUE_FAMILIES = ("a_pos", "a_neg", "b_pos", "b_neg")


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 2000
    n_eval: int = 500
    vocab_size: int = 1000
    seq_len: int = 32
    seed: int = 0
    cues_per_example: int = 5
    cue_set_size: Optional[int] = None
    # explicit word indices (0-based, excluding reserved ids) for A+, A-, B+, B-
    cue_sets: Optional[Tuple[Tuple[int, ...], ...]] = None

    @property
    def word_count(self) -> int:
        return self.vocab_size - _RESERVED

    def resolved_cue_sets(self) -> Dict[str, Tuple[int, ...]]:
        if self.cue_sets is not None:
            if len(self.cue_sets) != 4:
                raise ConfigError(["cue_sets must list exactly four sets: A+, A-, B+, B-"])
            return {name: tuple(int(i) for i in ids) for name, ids in zip(CUE_FAMILIES, self.cue_sets)}
        k = self.cue_set_size or max(4, self.vocab_size // 20)
        return {name: tuple(range(j * k, (j + 1) * k)) for j, name in enumerate(CUE_FAMILIES)}

    def validate(self) -> Tuple[bool, List[str]]:
        errors = []
        if self.vocab_size < MIN_VOCAB_SIZE:
            errors.append(f"synthetic vocab_size must be >= {MIN_VOCAB_SIZE}, got {self.vocab_size}")
        if self.n_train < 1 or self.n_eval < 1:
            errors.append("synthetic n_train and n_eval must be positive")
        if self.cues_per_example < 1 or self.cues_per_example % 2 == 0:
            errors.append(f"cues_per_example must be a positive odd number, got {self.cues_per_example}")
        if self.seq_len <= self.cues_per_example:
            errors.append(f"seq_len {self.seq_len} leaves no room for filler tokens")
        if errors:
            return False, errors

        sets = self.resolved_cue_sets()
        seen: Dict[int, str] = {}
        for name, ids in sets.items():
            if not ids:
                errors.append(f"cue set {name} is empty")
            for i in ids:
                if not 0 <= i < self.word_count:
                    errors.append(f"cue set {name} holds word {i} outside [0, {self.word_count})")
                elif i in seen:
                    errors.append(f"cue sets {seen[i]} and {name} overlap at word {i}")
                else:
                    seen[i] = name
        if len(seen) >= self.word_count:
            errors.append("cue sets leave no filler tokens")
        return len(errors) == 0, errors


def _word(index: int, family: Optional[str]) -> str:
    return f"{family.replace('_', '')}{index}" if family else f"filler{index}"


def _build_vocab(config: SyntheticConfig, sets: Dict[str, Tuple[int, ...]]) -> Tuple[Vocab, Dict[str, np.ndarray], np.ndarray]:
    owner = {i: name for name, ids in sets.items() for i in ids}
    vocab = Vocab([_word(i, owner.get(i)) for i in range(config.word_count)], min_freq=1)
    cue_ids = {name: np.asarray(ids, dtype=np.int64) + _RESERVED for name, ids in sets.items()}
    fillers = np.asarray([i + _RESERVED for i in range(config.word_count) if i not in owner], dtype=np.int64)
    return vocab, cue_ids, fillers


def _generate(n: int, positive: np.ndarray, negative: np.ndarray, fillers: np.ndarray,
              config: SyntheticConfig, rng: RngStream) -> Tuple[List[np.ndarray], np.ndarray]:
    c = config.cues_per_example
    labels = rng.integers(0, 2, size=n)
    majority = rng.integers(c // 2 + 1, c + 1, size=n)
    sequences = []
    for y, m in zip(labels, majority):
        agree, disagree = (positive, negative) if y == 1 else (negative, positive)
        tokens = np.concatenate([
            rng.choice(agree, size=int(m)),
            rng.choice(disagree, size=c - int(m)),
            rng.choice(fillers, size=config.seq_len - c),
        ])
        sequences.append(tokens[rng.permutation(config.seq_len)])
    return sequences, labels.astype(np.int64)


def synthetic_id_ood(config: SyntheticConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Build the in-domain dataset (n_train + 2 n_eval examples, A cues) and the
    out-of-domain dataset (n_eval examples, B cues). Deterministic given seed.
    """
    is_valid, errors = config.validate()
    if not is_valid:
        raise ConfigError(errors)

    vocab, cue_ids, fillers = _build_vocab(config, config.resolved_cue_sets())
    root = RngStream(config.seed)
    metadata = {
        "source": "synthetic",
        "positive_cues": np.concatenate([cue_ids["a_pos"], cue_ids["b_pos"]]),
        "negative_cues": np.concatenate([cue_ids["a_neg"], cue_ids["b_neg"]]),
        "ood_cues": np.concatenate([cue_ids["b_pos"], cue_ids["b_neg"]]),
    }

    def _dataset(n, pos, neg, tag, stream):
        sequences, labels = _generate(n, pos, neg, fillers, config, root.split(stream))
        return LabeledDataset(sequences, labels, vocab, tag, config.seq_len, 2,
                              true_prob=labels.astype(np.float64), metadata=dict(metadata))

    in_domain = _dataset(config.n_train + 2 * config.n_eval, cue_ids["a_pos"], cue_ids["a_neg"], "train", 0)
    out_of_domain = _dataset(config.n_eval, cue_ids["b_pos"], cue_ids["b_neg"], "ood", 1)
    logger.info(
        f"Synthetic benchmark: {len(in_domain)} in-domain / {len(out_of_domain)} out-of-domain examples, "
        f"vocab {len(vocab)}, {len(fillers)} fillers"
    )
    return in_domain, out_of_domain


def split_synthetic(in_domain: LabeledDataset, config: SyntheticConfig) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Slice the in-domain set into n_train / n_eval / n_eval examples."""
    n_train, n_eval = config.n_train, config.n_eval
    if len(in_domain) != n_train + 2 * n_eval:
        raise ContractError(f"in-domain set has {len(in_domain)} examples, expected {n_train + 2 * n_eval}")
    return (
        in_domain.subset(range(n_train), "train"),
        in_domain.subset(range(n_train, n_train + n_eval), "valid"),
        in_domain.subset(range(n_train + n_eval, n_train + 2 * n_eval), "test"),
    )


def majority_vote_oracle(dataset: LabeledDataset) -> np.ndarray:
    """Bag-of-words predictor: 1 when positive cues outnumber negative ones."""
    try:
        positive = dataset.metadata["positive_cues"]
        negative = dataset.metadata["negative_cues"]
    except KeyError:
        raise ContractError("majority_vote_oracle needs a synthetic dataset with cue metadata")
    votes = [np.isin(seq, positive).sum() - np.isin(seq, negative).sum() for seq in dataset.sequences]
    return (np.asarray(votes) > 0).astype(np.int64)


def cue_frequency(dataset: LabeledDataset, cue_ids: Sequence[int]) -> int:
    """Total occurrences of the given ids across the dataset."""
    cue_ids = np.asarray(cue_ids)
    return int(sum(np.isin(seq, cue_ids).sum() for seq in dataset.sequences))
