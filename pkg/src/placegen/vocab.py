"""Closed toy vocabulary and prompt tokenization.

Text conditioning runs over a fixed word list: template words, class nouns,
rare identifier tokens, and the quality/style words used by the guidance
prompts.  There is no pretrained encoder; embeddings live in the denoiser's
trainable table and are looked up by the ids produced here.

The empty prompt maps to the single ``<null>`` token, which is also what
caption dropout uses during base training (classifier-free guidance).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NULL_TOKEN = "<null>"
PAD_TOKEN = "<pad>"

# Order is part of the checkpoint format; append only.
DEFAULT_VOCAB: tuple[str, ...] = (
    NULL_TOKEN, PAD_TOKEN,
    "a", "an", "photo", "of", "and", "on", "the",
    "disc", "cross", "wrench",
    "sks", "oxt", "zvq",
    "high", "quality", "colorful", "image",
    "low", "dull", "collaging", "effect", "assembled",
)

RARE_TOKENS: tuple[str, ...] = ("sks", "oxt", "zvq")

MAX_PROMPT_LEN = 8


class UnknownTokenError(ValueError):
    """Raised when a prompt contains words outside the closed vocabulary."""

    def __init__(self, unknown: list[str]):
        self.unknown = unknown
        super().__init__("unknown vocabulary tokens: " + ", ".join(unknown))


@dataclass(frozen=True)
class PromptTokens:
    """A tokenized prompt: fixed-length id row plus its validity mask.

    ``ids`` has length ``max_len`` with trailing <pad> ids; ``valid`` marks
    the non-pad positions.  The embedded N×D matrix is produced inside the
    model from these ids (the embedding table is a trainable parameter).
    """

    ids: np.ndarray
    valid: np.ndarray
    text: str = field(default="", compare=False)

    @property
    def length(self) -> int:
        return int(self.valid.sum())


def tokenize(text: str) -> list[str]:
    """Split a prompt into lowercase words; commas and periods are separators."""
    cleaned = text.lower().replace(",", " ").replace(".", " ")
    return cleaned.split()


def encode_prompt(text: str, vocab: tuple[str, ...] = DEFAULT_VOCAB,
                  max_len: int = MAX_PROMPT_LEN) -> PromptTokens:
    """Tokenize ``text`` against the closed vocabulary.

    The empty prompt encodes as the single <null> token.  Unknown words raise
    UnknownTokenError listing them verbatim; prompts longer than ``max_len``
    are rejected rather than truncated.
    """
    index = {w: i for i, w in enumerate(vocab)}
    words = tokenize(text)
    if not words:
        words = [NULL_TOKEN]
    unknown = [w for w in words if w not in index]
    if unknown:
        raise UnknownTokenError(unknown)
    if len(words) > max_len:
        raise ValueError(f"prompt has {len(words)} tokens, max is {max_len}: {text!r}")
    ids = np.full(max_len, index[PAD_TOKEN], dtype=np.int64)
    for i, w in enumerate(words):
        ids[i] = index[w]
    valid = np.zeros(max_len, dtype=bool)
    valid[: len(words)] = True
    return PromptTokens(ids=ids, valid=valid, text=text)


def encode_phrase(text: str, vocab: tuple[str, ...] = DEFAULT_VOCAB) -> np.ndarray:
    """Tokenize a grounding phrase to a tight id array (no padding).

    Phrases must be non-empty; unknown words raise UnknownTokenError.
    """
    index = {w: i for i, w in enumerate(vocab)}
    words = tokenize(text)
    if not words:
        raise ValueError("grounding phrase must not be empty")
    unknown = [w for w in words if w not in index]
    if unknown:
        raise UnknownTokenError(unknown)
    return np.array([index[w] for w in words], dtype=np.int64)
