"""Byte-level tokenizer.

Ids 0..255 are raw UTF-8 bytes; three specials sit above them.  There is
nothing to train, so every module can rely on ``VOCAB_SIZE`` alone.
"""

from __future__ import annotations

from typing import Iterable

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259
SPECIALS = frozenset({BOS, EOS, PAD})


def encode(text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    ids = list(text.encode("utf-8"))
    if add_bos:
        ids.insert(0, BOS)
    if add_eos:
        ids.append(EOS)
    return ids


def decode(ids: Iterable[int]) -> str:
    """Inverse of :func:`encode`; specials are dropped and invalid UTF-8 is
    replaced with U+FFFD rather than raising."""
    raw = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise ValueError(f"token id {i} outside vocabulary of size {VOCAB_SIZE}")
        if i < 256:
            raw.append(i)
    return raw.decode("utf-8", errors="replace")


def validate(ids: Iterable[int]) -> None:
    """Raise ValueError if any id is outside the vocabulary or a PAD precedes real tokens."""
    seen_pad = False
    for pos, i in enumerate(ids):
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise ValueError(f"token id {i} at position {pos} outside vocabulary")
        if i == PAD:
            seen_pad = True
        elif seen_pad:
            raise ValueError(f"non-PAD token at position {pos} follows padding")
