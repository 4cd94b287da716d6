"""Pluggable text encoders.

The default encoder is a deterministic feature-hashing bag of tokens: no
network, no model downloads, stable across processes. A pretrained sentence
encoder can be swapped in through the same callable interface.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Protocol

import numpy as np

_TOKEN_RE = re.compile(r"[\w']+")


class TextEncoder(Protocol):
    d_text: int

    def __call__(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def hash_bucket(token: str, d_text: int) -> int:
    """Stable bucket for a token, independent of PYTHONHASHSEED."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % d_text


@dataclass(frozen=True)
class HashingTextEncoder:
    """Feature-hashed token counts, L2-normalized unless all-zero."""

    d_text: int = 64

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.d_text, dtype=np.float32)
        for token in tokenize(text):
            vec[hash_bucket(token, self.d_text)] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
        return vec
