"""Sequence packing and ratio-exact batch mixing for knowledge injection.

Every batch holds exactly ``B * r_s / sum(r)`` rows from source ``s``.  All
packed rows share one length, so the row ratio is also the token ratio.
An epoch ends when the book stream has been fully consumed once.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tokenizer import EOS, PAD, encode

PACK_MAGIC = b"DFPK"
PACK_VERSION = 1
_PACK_HEADER = struct.Struct("<4sIIQ")


class MixerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MixRatio:
    book: int = 15
    paper: int = 4
    general: int = 1

    def __post_init__(self):
        if min(self.book, self.paper, self.general) < 0 or self.total == 0:
            raise MixerConfigError(f"invalid mixing ratio {self.as_tuple()}")

    @property
    def total(self) -> int:
        return self.book + self.paper + self.general

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.book, self.paper, self.general)

    def rows_per_source(self, batch_size: int) -> dict[str, int]:
        if batch_size % self.total:
            raise MixerConfigError(f"batch size {batch_size} not divisible by ratio sum {self.total}")
        k = batch_size // self.total
        return {"book": self.book * k, "paper": self.paper * k, "general": self.general * k}


@dataclass
class Packed:
    """``count`` windows of ``context_len`` tokens; ``mask`` is False on PAD."""

    tokens: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def context_len(self) -> int:
        return self.tokens.shape[1]


def pack(texts: Iterable[str], context_len: int) -> Packed:
    """Tokenize, join with EOS, and cut into consecutive ``context_len`` windows.

    Each document contributes its bytes followed by one EOS.  The last
    partial window is right-padded with PAD.
    """
    if context_len < 2:
        raise MixerConfigError("context_len must be >= 2")
    stream: list[int] = []
    for text in texts:
        stream.extend(encode(text, add_eos=True))
    if not stream:
        return Packed(np.zeros((0, context_len), np.uint32), np.zeros((0, context_len), bool))
    n = -(-len(stream) // context_len)
    flat = np.full(n * context_len, PAD, dtype=np.uint32)
    flat[: len(stream)] = stream
    tokens = flat.reshape(n, context_len)
    return Packed(tokens, tokens != PAD)


def save_packed(path: str | os.PathLike, packed: Packed) -> None:
    count, ctx = packed.tokens.shape
    with open(path, "wb") as fh:
        fh.write(_PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, ctx, count))
        fh.write(np.ascontiguousarray(packed.tokens, dtype="<u4").tobytes())
        fh.write(np.packbits(packed.mask, axis=1, bitorder="little").tobytes())


def load_packed(path: str | os.PathLike) -> Packed:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PACK_HEADER.size:
        raise ValueError(f"{path}: truncated packed file")
    magic, version, ctx, count = _PACK_HEADER.unpack_from(data)
    if magic != PACK_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != PACK_VERSION:
        raise ValueError(f"{path}: unsupported packed-file version {version}")
    row_bytes = (ctx + 7) // 8
    need = _PACK_HEADER.size + count * ctx * 4 + count * row_bytes
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    off = _PACK_HEADER.size
    tokens = np.frombuffer(data, dtype="<u4", count=count * ctx, offset=off).reshape(count, ctx).astype(np.uint32)
    off += count * ctx * 4
    bits = np.frombuffer(data, dtype=np.uint8, count=count * row_bytes, offset=off).reshape(count, row_bytes)
    mask = np.unpackbits(bits, axis=1, count=ctx, bitorder="little").astype(bool)
    return Packed(tokens, mask)


class SourceStream:
    """Shuffled, wrapping cursor over one source's packed sequences."""

    def __init__(self, name: str, packed: Packed, seed: int):
        self.name = name
        self.packed = packed
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(packed)) if len(packed) else np.zeros(0, np.int64)
        self.cursor = 0
        self.wraps = 0

    def __len__(self) -> int:
        return len(self.packed)

    def take(self, n: int) -> np.ndarray:
        """Indices of the next ``n`` sequences; reshuffles on every wrap."""
        if n and not len(self.packed):
            raise MixerConfigError(f"stream {self.name!r} is empty")
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            out[i] = self.order[self.cursor]
            self.cursor += 1
            if self.cursor == len(self.order):
                self.cursor = 0
                self.wraps += 1
                self.order = self.rng.permutation(len(self.packed))
        return out

    def state(self) -> dict:
        return {
            "order": self.order.tolist(),
            "cursor": self.cursor,
            "wraps": self.wraps,
            "rng": self.rng.bit_generator.state,
        }

    def restore(self, state: dict) -> None:
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.cursor = int(state["cursor"])
        self.wraps = int(state["wraps"])
        self.rng.bit_generator.state = state["rng"]


@dataclass
class Batch:
    tokens: np.ndarray  # (B, context_len)
    mask: np.ndarray  # (B, context_len), False on PAD
    sources: list[str]
    row_index: np.ndarray  # index of each row within its source stream


@dataclass
class EpochState:
    epoch: int = 0
    book_tokens_consumed: int = 0
    total_book_tokens: int = 0

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "book_tokens_consumed": self.book_tokens_consumed,
            "total_book_tokens": self.total_book_tokens,
        }


class Mixer:
    """Sequential iterator of ratio-exact batches over three source streams."""

    def __init__(
        self,
        packed: dict[str, Packed],
        batch_size: int,
        ratio: MixRatio = MixRatio(),
        seed: int = 0,
    ):
        self.ratio = ratio
        self.batch_size = batch_size
        self.rows = ratio.rows_per_source(batch_size)
        ctx = {p.context_len for p in packed.values()}
        if len(ctx) > 1:
            raise MixerConfigError(f"sources disagree on context length: {sorted(ctx)}")
        self.streams: dict[str, SourceStream] = {}
        for i, name in enumerate(("book", "paper", "general")):
            p = packed.get(name)
            if p is None:
                p = Packed(np.zeros((0, next(iter(ctx), 2)), np.uint32), np.zeros((0, next(iter(ctx), 2)), bool))
            if self.rows[name] and not len(p):
                raise MixerConfigError(f"source {name!r} is required by the ratio but has no sequences")
            self.streams[name] = SourceStream(name, p, seed * 1000 + i)
        self.rng = np.random.default_rng([seed, 7])
        book = self.streams["book"].packed
        self.epoch_state = EpochState(total_book_tokens=int(book.mask.sum()))

    def next_batch(self) -> tuple[Batch, EpochState]:
        toks, masks, labels, idxs = [], [], [], []
        for name in ("book", "paper", "general"):
            n = self.rows[name]
            if not n:
                continue
            stream = self.streams[name]
            if name == "book":
                # One row at a time so the token count splits at the wrap point.
                sel = np.empty(n, np.int64)
                for j in range(n):
                    sel[j] = stream.take(1)[0]
                    if stream.wraps != self.epoch_state.epoch:
                        self.epoch_state.epoch = stream.wraps
                        self.epoch_state.book_tokens_consumed = 0
                    else:
                        self.epoch_state.book_tokens_consumed += int(stream.packed.mask[sel[j]].sum())
            else:
                sel = stream.take(n)
            toks.append(stream.packed.tokens[sel])
            masks.append(stream.packed.mask[sel])
            labels.extend([name] * n)
            idxs.append(sel)
        perm = self.rng.permutation(self.batch_size)
        batch = Batch(
            tokens=np.concatenate(toks)[perm],
            mask=np.concatenate(masks)[perm],
            sources=[labels[i] for i in perm],
            row_index=np.concatenate(idxs)[perm],
        )
        return batch, EpochState(**self.epoch_state.to_json())

    def state(self) -> dict:
        return {
            "streams": {k: s.state() for k, s in self.streams.items()},
            "rng": self.rng.bit_generator.state,
            "epoch_state": self.epoch_state.to_json(),
        }

    def restore(self, state: dict) -> None:
        for k, s in state["streams"].items():
            self.streams[k].restore(s)
        self.rng.bit_generator.state = state["rng"]
        self.epoch_state = EpochState(**state["epoch_state"])


def next_batch(mixer: Mixer) -> tuple[Batch, EpochState]:
    return mixer.next_batch()
