# stotrans/text/tokenizer.py
"""
Word tokenizer and vocabulary.
"""

import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

from stotrans.errors import DataError

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1
DEFAULT_MIN_FREQ = 2
DEFAULT_MAX_SIZE = 30000

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Lowercase and split on maximal runs of non-alphanumeric characters."""
    return _WORD.findall(text.lower()) if text else []


class Vocab:
    """
    Token <-> id mapping with PAD=0 and UNK=1 reserved.

    Every other token owns exactly one id; anything unmapped encodes as UNK.
    """

    def __init__(self, tokens: Sequence[str], min_freq: int = DEFAULT_MIN_FREQ):
        self.min_freq = min_freq
        self.itos: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: Dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for token in tokens:
            if token in self.stoi:
                raise DataError(f"duplicate vocabulary token {token!r}")
            self.stoi[token] = len(self.itos)
            self.itos.append(token)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.itos[i] if 0 <= i < len(self.itos) else UNK_TOKEN for i in ids]

    @property
    def tokens(self) -> List[str]:
        """Non-reserved tokens in id order."""
        return self.itos[2:]

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"min_freq": self.min_freq, "tokens": self.tokens}, ensure_ascii=False),
                        encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "Vocab":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            return cls(payload["tokens"], payload.get("min_freq", DEFAULT_MIN_FREQ))
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot read vocabulary {path}: {e}")


def build_vocab(corpus: Iterable[str], min_freq: int = DEFAULT_MIN_FREQ,
                max_size: int = DEFAULT_MAX_SIZE) -> Vocab:
    """
    Build a vocabulary from raw texts.

    Tokens with frequency >= min_freq get ids by descending frequency, ties
    broken lexicographically. At most ``max_size`` tokens are kept.
    """
    counts: Counter = Counter()
    n_docs = 0
    for text in corpus:
        counts.update(tokenize(text))
        n_docs += 1
    if n_docs == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if len(kept) > max_size:
        logger.info(f"Vocabulary capped at {max_size} of {len(kept)} eligible tokens")
        kept = kept[:max_size]
    logger.debug(f"Vocabulary: {len(kept)} tokens from {n_docs} texts (min_freq={min_freq})")
    return Vocab(kept, min_freq)
