# stotrans/text/datasets.py
"""
Labeled datasets, padded batches, TSV ingestion and seeded splitting.

TSV schema: ``label<TAB>text``, UTF-8, one example per line, label a
non-negative integer. No header row.
"""

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd

from stotrans.engine.sampling import RngStream
from stotrans.errors import ContractError, DataError
from stotrans.text.tokenizer import (
    DEFAULT_MAX_SIZE,
    DEFAULT_MIN_FREQ,
    PAD_ID,
    UNK_ID,
    Vocab,
    build_vocab,
    tokenize,
)

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "valid", "test", "ood")
_LABEL = re.compile(r"\d+")


@dataclass
class Batch:
    """Right-padded id matrix; ``pad_mask`` is True at padding positions."""
    token_ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


@dataclass
class LabeledDataset:
    sequences: List[np.ndarray]
    labels: np.ndarray
    vocab: Vocab
    split: str = "train"
    max_seq_len: int = 256
    num_classes: int = 2
    malformed_count: int = 0
    true_prob: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.split not in SPLIT_TAGS:
            raise ContractError(f"unknown split tag {self.split!r}; expected one of {SPLIT_TAGS}")
        if len(self.sequences) != len(self.labels):
            raise ContractError(f"{len(self.sequences)} sequences but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"{self.split} labels must lie in [0, {self.num_classes})")
        vocab_size = len(self.vocab)
        for i, seq in enumerate(self.sequences):
            if len(seq) == 0 or len(seq) > self.max_seq_len:
                raise ContractError(f"example {i} has length {len(seq)}, expected 1..{self.max_seq_len}")
            if seq.min() < 0 or seq.max() >= vocab_size:
                raise DataError(f"example {i} has a token id outside the vocabulary of size {vocab_size}")
        if self.true_prob is not None:
            self.true_prob = np.asarray(self.true_prob, dtype=np.float64)
            if self.true_prob.shape != self.labels.shape:
                raise ContractError("true_prob must hold one value per example")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def has_ground_truth(self) -> bool:
        return self.true_prob is not None

    def batch(self, indices: Sequence[int]) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        width = max(len(self.sequences[i]) for i in indices)
        ids = np.full((len(indices), width), PAD_ID, dtype=np.int64)
        mask = np.ones((len(indices), width), dtype=bool)
        for row, i in enumerate(indices):
            seq = self.sequences[i]
            ids[row, :len(seq)] = seq
            mask[row, :len(seq)] = False
        return Batch(ids, mask, self.labels[indices], indices)

    def batches(self, batch_size: int, order: Optional[Sequence[int]] = None) -> Iterator[Batch]:
        if batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {batch_size}")
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "LabeledDataset":
        indices = [int(i) for i in indices]
        return LabeledDataset(
            sequences=[self.sequences[i] for i in indices],
            labels=self.labels[indices] if indices else np.zeros(0, dtype=np.int64),
            vocab=self.vocab,
            split=split or self.split,
            max_seq_len=self.max_seq_len,
            num_classes=self.num_classes,
            true_prob=None if self.true_prob is None else self.true_prob[indices],
            metadata=dict(self.metadata),
        )


@dataclass
class TextRows:
    """Raw (label, text) rows before a vocabulary exists."""
    texts: List[str]
    labels: List[int]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.texts)

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "TextRows":
        indices = [int(i) for i in indices]
        return TextRows([self.texts[i] for i in indices], [self.labels[i] for i in indices], split or self.split)

    def encode(self, vocab: Vocab, max_seq_len: int = 256, num_classes: Optional[int] = None) -> LabeledDataset:
        return encode_texts(self.texts, self.labels, vocab, self.split, max_seq_len, num_classes)


class DataSplits(NamedTuple):
    train: LabeledDataset
    valid: LabeledDataset
    test: LabeledDataset
    ood: Optional[LabeledDataset] = None

    @property
    def vocab(self) -> Vocab:
        return self.train.vocab


def encode_texts(texts: Sequence[str], labels: Sequence[int], vocab: Vocab, split_tag: str = "train",
                 max_seq_len: int = 256, num_classes: Optional[int] = None) -> LabeledDataset:
    """Tokenize, id-map and truncate. A text with no tokens becomes a single UNK."""
    sequences = []
    truncated = 0
    for text in texts:
        ids = vocab.encode(tokenize(text)) or [UNK_ID]
        if len(ids) > max_seq_len:
            truncated += 1
            ids = ids[:max_seq_len]
        sequences.append(np.asarray(ids, dtype=np.int64))
    if truncated:
        logger.debug(f"Truncated {truncated} {split_tag} examples to {max_seq_len} tokens")
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1) if labels.size else 2
    return LabeledDataset(sequences, labels, vocab, split_tag, max_seq_len, num_classes)


def read_tsv(path: Union[str, Path]) -> Tuple[List[str], List[int], int]:
    """
    Parse a ``label<TAB>text`` file.

    Returns (texts, labels, malformed_count). A line without a tab, with an
    empty text or with a label that is not a non-negative integer is skipped
    and counted. Extra tabs stay part of the text.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    try:
        content = path.read_text(encoding="utf-8", errors="replace")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}")

    texts: List[str] = []
    labels: List[int] = []
    malformed = 0
    widened = 0
    for line_number, line in enumerate(content.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line:
            continue
        label, sep, text = line.partition("\t")
        label = label.strip()
        if not sep or not _LABEL.fullmatch(label) or not text.strip():
            malformed += 1
            logger.debug(f"{path.name}: skipping malformed line {line_number}")
            continue
        if "\t" in text:
            widened += 1
            text = text.replace("\t", " ")
        labels.append(int(label))
        texts.append(text)

    if malformed:
        logger.warning(f"{path}: skipped {malformed} malformed line(s)")
    if widened:
        logger.debug(f"{path}: {widened} line(s) carried extra tabs inside the text")
    if not texts:
        raise DataError(f"{path} contains no parseable lines")
    return texts, labels, malformed


def load_tsv(path: Union[str, Path], vocab: Optional[Vocab] = None, split_tag: str = "train",
             max_seq_len: int = 256, min_freq: int = DEFAULT_MIN_FREQ, max_vocab: int = DEFAULT_MAX_SIZE,
             num_classes: Optional[int] = None) -> LabeledDataset:
    """
    Load a TSV file into a dataset.

    Without ``vocab`` a vocabulary is built from this file's texts.
    """
    texts, labels, malformed = read_tsv(path)
    if vocab is None:
        vocab = build_vocab(texts, min_freq=min_freq, max_size=max_vocab)
    dataset = encode_texts(texts, labels, vocab, split_tag, max_seq_len, num_classes)
    dataset.malformed_count = malformed
    dataset.metadata["source"] = str(path)
    logger.info(f"Loaded {len(dataset)} {split_tag} examples from {path} ({malformed} malformed)")
    return dataset


def write_tsv(path: Union[str, Path], rows: Iterable[Tuple[int, str]]) -> Path:
    """Write (label, text) rows; tabs and newlines inside text become spaces."""
    path = Path(path)
    records = [(int(label), re.sub(r"[\t\r\n]+", " ", str(text))) for label, text in rows]
    df = pd.DataFrame(records, columns=["label", "text"])
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE,
              escapechar="\\", encoding="utf-8")
    return path


# LabeledDataset or TextRows; both slice through subset(indices, split)
Splittable = TypeVar("Splittable", LabeledDataset, TextRows)


def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    """n_train = floor(f1 n), n_valid = floor(f2 n), test takes the remainder."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) not in (2, 3):
        raise ContractError(f"expected 2 or 3 split fractions, got {len(fractions)}")
    if any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ContractError(f"split fractions must be positive with sum <= 1, got {fractions}")
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_valid = int(math.floor(fractions[1] * n + 1e-9))
    return n_train, n_valid, n - n_train - n_valid


def split(dataset: Splittable, fractions: Sequence[float],
          seed: Union[int, RngStream] = 0) -> Tuple[Splittable, Splittable, Splittable]:
    """Seeded shuffle, then disjoint train/valid/test slices covering every example."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    n_train, n_valid, _ = split_sizes(n, fractions)
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    order = rng.permutation(n)
    return (
        dataset.subset(order[:n_train], "train"),
        dataset.subset(order[n_train:n_train + n_valid], "valid"),
        dataset.subset(order[n_train + n_valid:], "test"),
    )


def carve_validation(dataset: Splittable, fraction: float,
                     seed: Union[int, RngStream] = 0) -> Tuple[Splittable, Splittable]:
    """Hold out floor(fraction n) shuffled training examples as a validation split."""
    if not 0 < fraction < 1:
        raise ContractError(f"valid_fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_valid = int(math.floor(fraction * n + 1e-9))
    if n_valid == 0 or n_valid == n:
        raise DataError(f"cannot carve a {fraction:.0%} validation split out of {n} examples")
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    order = rng.permutation(n)
    return dataset.subset(order[n_valid:], "train"), dataset.subset(order[:n_valid], "valid")
