"""Deterministic stand-in text encoder: signed feature hashing of tokens."""
import hashlib
import re
from dataclasses import dataclass

import numpy as np

DEFAULT_EMBED_DIM = 64
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def _hash64(data):
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class PromptEmbedding:
    prompt_id: int
    vector: np.ndarray

    @property
    def dim(self):
        return self.vector.shape[0]


def prompt_id(text):
    """64-bit BLAKE2b hash of the UTF-8 prompt text."""
    return _hash64(text.encode("utf-8"))


def embed_prompt(text, dim=DEFAULT_EMBED_DIM):
    """Bag-of-tokens embedding with unit L2 norm.

    Tokens are the lowercase alphanumeric runs of ``text``; each one adds
    +/-1 at a hashed index, the sign taken from the top hash bit.
    """
    if not text:
        raise ValueError("prompt text must be non-empty")
    if dim < 1:
        raise ValueError(f"embedding dim must be positive, got {dim}")
    vec = np.zeros(dim)
    for token in _TOKEN_SPLIT.split(text.lower()):
        if not token:
            continue
        h = _hash64(token.encode("utf-8"))
        vec[h % dim] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError(f"prompt {text!r} has no usable tokens")
    return PromptEmbedding(prompt_id(text), vec / norm)
