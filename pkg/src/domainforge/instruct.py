"""Instruction dataset construction and response-masked rendering.

Three sample families feed instruction tuning: patient/doctor conversations
with paraphrased instruction variants, multiple-choice questions paired with
a rationale, and knowledge-graph prompts built from entity descriptions and
relation triples.  External generation is reached only through the provider
protocols below; the shipped providers are deterministic.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import templates
from .templates import (
    CHOICE_INSTRUCTION,
    LETTERS,
    answer_label,
    render_general_rationale_prompt,
    render_instruction,
    render_mcqa_input,
    render_optionwise_rationale_prompt,
    render_paraphrase_query,
)
from .tokenizer import EOS, decode, encode

KINDS = ("conversation", "rationale_qa", "kg_description", "kg_relation", "choice")


class ProviderError(RuntimeError):
    pass


class SampleTooLong(ValueError):
    pass


@dataclass
class InstructionSample:
    id: str
    kind: str
    instruction: str
    response: str
    input: str | None = None
    instruction_variants: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"sample {self.id}: unknown kind {self.kind!r}")
        if not self.response:
            raise ValueError(f"sample {self.id}: empty response")
        if not self.instruction_variants:
            self.instruction_variants = [self.instruction]
        elif self.instruction not in self.instruction_variants:
            self.instruction_variants = [self.instruction, *self.instruction_variants]

    def to_json(self) -> dict:
        out = {"id": self.id, "kind": self.kind, "instruction": self.instruction}
        if self.input is not None:
            out["input"] = self.input
        out["response"] = self.response
        out["instruction_variants"] = list(self.instruction_variants)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "InstructionSample":
        return cls(
            id=obj["id"],
            kind=obj["kind"],
            instruction=obj["instruction"],
            response=obj["response"],
            input=obj.get("input"),
            instruction_variants=list(obj.get("instruction_variants") or []),
        )


@dataclass(frozen=True)
class KGEntity:
    name: str
    description: str

    def __post_init__(self):
        if not self.name or not self.description:
            raise ValueError("entity name and description must be nonempty")


@dataclass(frozen=True)
class KGRelationTriple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not (self.head and self.relation and self.tail):
            raise ValueError("triple fields must be nonempty")


# --- providers --------------------------------------------------------------


class ParaphraseProvider(Protocol):
    def expand(self, seed: str, n: int) -> list[str]: ...


class RationaleProvider(Protocol):
    def analyze(self, item_id: str, prompt: str, question: str, options: list[str], answer_idx: int) -> str: ...


_REWRITES = (
    "Could you help me with this: {s}",
    "I would like to know the following. {s}",
    "Please answer my question: {s}",
    "Here is what I am wondering about: {s}",
    "Can you explain this to me? {s}",
    "I need some advice. {s}",
    "Help me understand this please: {s}",
    "A patient asks: {s}",
    "Doctor, {s}",
    "My question is this: {s}",
)


class FixtureParaphraseProvider:
    """Deterministic stand-in: canned variants where given, rule-based rewrites otherwise."""

    def __init__(self, canned: dict[str, list[str]] | None = None):
        self.canned = canned or {}
        self.calls = 0

    def expand(self, seed: str, n: int) -> list[str]:
        self.calls += 1
        pool = list(self.canned.get(seed, [])) + [t.format(s=seed) for t in _REWRITES]
        return pool[:n]


class CompletionParaphraseProvider:
    """Wraps a text-completion callable: sends the paraphrase query, parses one variant per line."""

    def __init__(self, complete):
        self.complete = complete

    def expand(self, seed: str, n: int) -> list[str]:
        reply = self.complete(render_paraphrase_query(seed))
        lines = []
        for ln in reply.splitlines():
            ln = ln.strip().lstrip("-*").strip()
            head, _, rest = ln.partition(". ")
            if head.isdigit():
                ln = rest.strip()
            if ln:
                lines.append(ln)
        return lines[:n]


class FixtureRationaleProvider:
    """Canned analyses keyed by item id; otherwise a templated option-by-option verdict."""

    def __init__(self, canned: dict[str, str] | None = None):
        self.canned = canned or {}

    def analyze(self, item_id, prompt, question, options, answer_idx):
        if item_id in self.canned:
            return self.canned[item_id]
        return " ".join(
            f"Option {LETTERS[i]} is {'TRUE' if i == answer_idx else 'FALSE'}. "
            f"{options[i]} {'is' if i == answer_idx else 'is not'} the answer."
            for i in range(len(options))
        )


def expand_instructions(
    seed: str, provider: ParaphraseProvider, n: int, seed_id: str | None = None, max_queries: int = 10
) -> list[str]:
    """``n`` distinct instruction variants, the seed first.

    The provider is queried repeatedly until enough distinct variants have
    accumulated; duplicates and the seed itself are discarded.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    variants = [seed]
    for _ in range(max_queries):
        if len(variants) >= n:
            break
        try:
            got = provider.expand(seed, n - 1)
        except Exception as exc:
            raise ProviderError(f"paraphrase provider failed for seed {seed_id or seed!r}: {exc}") from exc
        for v in got:
            v = v.strip()
            if v and v not in variants and len(variants) < n:
                variants.append(v)
    if len(variants) < n:
        raise ProviderError(
            f"paraphrase provider returned only {len(variants)} distinct variants for seed "
            f"{seed_id or seed!r} after {max_queries} queries"
        )
    return variants


# --- builders -----------------------------------------------------------------


def build_kg_samples(entities: Iterable[KGEntity], triples: Iterable[KGRelationTriple]) -> list[InstructionSample]:
    out = []
    for i, e in enumerate(entities):
        out.append(
            InstructionSample(
                id=f"kg-desc-{i}",
                kind="kg_description",
                instruction=f"Describe the medical entity: {e.name}.",
                response=e.description,
            )
        )
    for i, t in enumerate(triples):
        out.append(
            InstructionSample(
                id=f"kg-rel-{i}",
                kind="kg_relation",
                instruction=f"What is the relationship between {t.head} and {t.tail}?",
                response=f"{t.head} {t.relation} {t.tail}.",
            )
        )
    return out


def build_conversation_samples(
    conversations: Iterable[dict], provider: ParaphraseProvider, n_variants: int = 1
) -> list[InstructionSample]:
    out = []
    for conv in conversations:
        variants = expand_instructions(conv["instruction"], provider, n_variants, seed_id=conv["id"])
        out.append(
            InstructionSample(
                id=conv["id"],
                kind="conversation",
                instruction=conv["instruction"],
                input=conv.get("input"),
                response=conv["response"],
                instruction_variants=variants,
            )
        )
    return out


def build_rationale_samples(items: Iterable, provider: RationaleProvider, style: str = "general") -> list[InstructionSample]:
    """Multiple-choice items plus a provider rationale, answer first then analysis."""
    render = {"general": render_general_rationale_prompt, "optionwise": render_optionwise_rationale_prompt}[style]
    out = []
    for item in items:
        prompt = render(item.question, item.options, item.answer_idx)
        analysis = provider.analyze(item.id, prompt, item.question, item.options, item.answer_idx)
        out.append(
            InstructionSample(
                id=f"{item.id}-rationale",
                kind="rationale_qa",
                instruction=CHOICE_INSTRUCTION,
                input=render_mcqa_input(item.question, item.options, item.context),
                response=f"The answer is {answer_label(item.options, item.answer_idx)}, so the analysis is {analysis}",
            )
        )
    return out


def choice_answer_text(options: Sequence[str], idx: int) -> str:
    """Plain choice supervision target: ``"B. option text"``."""
    return f"{LETTERS[idx]}. {options[idx]}"


def build_choice_samples(items: Iterable) -> list[InstructionSample]:
    return [
        InstructionSample(
            id=f"{item.id}-choice",
            kind="choice",
            instruction=CHOICE_INSTRUCTION,
            input=render_mcqa_input(item.question, item.options, item.context),
            response=choice_answer_text(item.options, item.answer_idx),
        )
        for item in items
    ]


# --- rendering ------------------------------------------------------------------


@dataclass
class RenderedExample:
    tokens: np.ndarray
    loss_mask: np.ndarray
    boundary: int
    instruction: str
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Independent generator per (seed, sample, epoch), so rendering order never matters."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode("utf-8")), epoch])


def render_training_example(sample: InstructionSample, rng: np.random.Generator, context_len: int) -> RenderedExample:
    variant = sample.instruction_variants[int(rng.integers(len(sample.instruction_variants)))]
    prompt = encode(render_instruction(variant, sample.input))
    answer = encode(sample.response, add_eos=True)
    if len(prompt) >= context_len:
        raise SampleTooLong(f"sample {sample.id}: prompt of {len(prompt)} tokens leaves no room in context {context_len}")
    ids = (prompt + answer)[:context_len]
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prompt) :] = True
    return RenderedExample(
        tokens=np.asarray(ids, dtype=np.int64),
        loss_mask=mask,
        boundary=len(prompt),
        instruction=variant,
        truncated=len(prompt) + len(answer) > context_len,
    )


def masked_text(example: RenderedExample) -> str:
    """Decode the loss-bearing tokens, dropping the trailing EOS."""
    ids = example.tokens[example.loss_mask]
    if len(ids) and ids[-1] == EOS:
        ids = ids[:-1]
    return decode(ids)


# --- files --------------------------------------------------------------------


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_samples(path: str | os.PathLike, samples: Iterable[InstructionSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def read_samples(path: str | os.PathLike) -> list[InstructionSample]:
    return [InstructionSample.from_json(o) for o in read_jsonl(path)]


def read_kg(entities_path, triples_path) -> tuple[list[KGEntity], list[KGRelationTriple]]:
    ents = [KGEntity(o["entity"], o["description"]) for o in read_jsonl(entities_path)] if entities_path else []
    trips = [KGRelationTriple(o["head"], o["relation"], o["tail"]) for o in read_jsonl(triples_path)] if triples_path else []
    return ents, trips


__all__ = [
    "InstructionSample",
    "KGEntity",
    "KGRelationTriple",
    "RenderedExample",
    "FixtureParaphraseProvider",
    "FixtureRationaleProvider",
    "CompletionParaphraseProvider",
    "expand_instructions",
    "build_kg_samples",
    "build_conversation_samples",
    "build_rationale_samples",
    "build_choice_samples",
    "render_training_example",
    "render_paraphrase_query",
    "render_general_rationale_prompt",
    "render_optionwise_rationale_prompt",
    "templates",
]
