"""Multiple-choice QA evaluation.

Two scoring modes: likelihood (pick the option whose answer text has the
highest mean per-token log-probability) and generative (greedy decode, then
read off the first option letter).  Accuracy is averaged per dataset, and
the dataset average is the plain mean of per-dataset accuracies.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .instruct import build_choice_samples, choice_answer_text
from .model import TransformerLM, greedy_decode, log_softmax
from .templates import CHOICE_INSTRUCTION, LETTERS, render_instruction, render_mcqa_input
from .tokenizer import decode, encode

log = logging.getLogger(__name__)

DATASETS = ("pubmedqa", "medmcqa", "medqa_usmle", "other")
PUBMEDQA_OPTIONS = ["yes", "no", "maybe"]
TEMPLATES = ("instruct", "cloze")


class PromptTooLong(ValueError):
    pass


@dataclass
class MCQAItem:
    id: str
    dataset: str
    question: str
    options: list[str]
    answer_idx: int
    context: str | None = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"item {self.id}: unknown dataset {self.dataset!r}")
        if not 2 <= len(self.options) <= 26:
            raise ValueError(f"item {self.id}: needs 2..26 options, has {len(self.options)}")
        if not 0 <= self.answer_idx < len(self.options):
            raise ValueError(f"item {self.id}: answer_idx {self.answer_idx} out of range")
        if self.dataset == "pubmedqa" and list(self.options) != PUBMEDQA_OPTIONS:
            raise ValueError(f"item {self.id}: pubmedqa options must be {PUBMEDQA_OPTIONS}")

    def to_json(self) -> dict:
        out = {"id": self.id, "dataset": self.dataset}
        if self.context is not None:
            out["context"] = self.context
        out.update(question=self.question, options=list(self.options), answer_idx=self.answer_idx)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "MCQAItem":
        return cls(obj["id"], obj["dataset"], obj["question"], list(obj["options"]), int(obj["answer_idx"]), obj.get("context"))


def read_items(paths: str | os.PathLike | Sequence) -> list[MCQAItem]:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    items = []
    for p in paths:
        with open(p, "r", encoding="utf-8") as fh:
            items.extend(MCQAItem.from_json(json.loads(line)) for line in fh if line.strip())
    return items


def write_items(path, items: Iterable[MCQAItem]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            fh.write(json.dumps(it.to_json(), ensure_ascii=False) + "\n")


@dataclass
class EvalConfig:
    mode: str = "likelihood"
    setting: str = "zero_shot"
    template: str = "instruct"
    length_norm: str = "per_token_mean"
    max_new_tokens: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("likelihood", "generative"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.setting not in ("zero_shot", "task_finetune"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        if self.length_norm not in ("per_token_mean", "sum"):
            raise ValueError(f"unknown length_norm {self.length_norm!r}")

    def to_json(self) -> dict:
        return asdict(self)


# --- prompts ---------------------------------------------------------------


def eval_prompt(item: MCQAItem, config: EvalConfig) -> str:
    """``instruct`` lists the lettered options; ``cloze`` shows the question only,
    so an option's score cannot depend on the other options."""
    if config.template == "instruct":
        return render_instruction(CHOICE_INSTRUCTION, render_mcqa_input(item.question, item.options, item.context))
    body = f"Question: {item.question}"
    if item.context:
        body = f"Context: {item.context}\n{body}"
    return render_instruction("Answer the question.", body)


def answer_text(item: MCQAItem, idx: int, config: EvalConfig) -> str:
    if config.template == "instruct":
        return choice_answer_text(item.options, idx)
    return item.options[idx]


def score_option(model, item: MCQAItem, option_idx: int, config: EvalConfig) -> float:
    """Log-probability of the option's answer text after the prompt, mean per token by default."""
    prompt = encode(eval_prompt(item, config))
    answer = encode(answer_text(item, option_idx, config))
    ids = prompt + answer
    if len(ids) > model.context_len:
        raise PromptTooLong(f"item {item.id}: {len(ids)} tokens exceed context_len {model.context_len}")
    lp = log_softmax(np.asarray(model.logits(np.array([ids])), dtype=np.float64))[0]
    pos = np.arange(len(prompt) - 1, len(ids) - 1)
    token_lp = lp[pos, np.asarray(answer)]
    total = float(token_lp.sum())
    return total / len(answer) if config.length_norm == "per_token_mean" else total


_LETTER = re.compile(r"\bOption\s+([A-Z])\b|\(([A-Z])\)|\b([A-Z])\.|\b([A-Z])\b")


def extract_letter(text: str, n_options: int) -> int | None:
    """Index of the first valid option letter, scanning left to right.

    Recognised forms: ``Option X``, ``(X)``, ``X.`` and a standalone ``X``.
    """
    for m in _LETTER.finditer(text):
        letter = next(g for g in m.groups() if g)
        idx = LETTERS.index(letter)
        if idx < n_options:
            return idx
    return None


@dataclass
class Prediction:
    index: int
    fallback: bool = False
    scores: list[float] | None = None
    generated: str | None = None


def _likelihood(model, item, config) -> Prediction:
    scores = [score_option(model, item, i, config) for i in range(len(item.options))]
    # np.argmax returns the first maximum, i.e. ties go to the lowest index.
    return Prediction(int(np.argmax(scores)), scores=scores)


def predict_detailed(model, item: MCQAItem, config: EvalConfig) -> Prediction:
    if config.mode == "likelihood":
        return _likelihood(model, item, config)
    prompt = encode(eval_prompt(item, config))
    if len(prompt) >= model.context_len:
        raise PromptTooLong(f"item {item.id}: prompt of {len(prompt)} tokens fills context_len {model.context_len}")
    text = decode(greedy_decode(model, prompt, config.max_new_tokens))
    idx = extract_letter(text, len(item.options))
    if idx is None:
        log.info("item %s: no option letter in %r, falling back to likelihood", item.id, text)
        pred = _likelihood(model, item, config)
        pred.fallback = True
        pred.generated = text
        return pred
    return Prediction(idx, generated=text)


def predict(model, item: MCQAItem, config: EvalConfig) -> int:
    return predict_detailed(model, item, config).index


# --- reports ---------------------------------------------------------------


def round_half_up(x: float | Decimal, places: int = 2) -> float:
    d = x if isinstance(x, Decimal) else Decimal(repr(float(x)))
    return float(d.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def mean_accuracy(values: Sequence[float], places: int = 2) -> float:
    """Arithmetic mean of per-dataset accuracies, rounded half-up."""
    if not values:
        raise ValueError("no accuracies to average")
    return round_half_up(sum(Decimal(repr(float(v))) for v in values) / len(values), places)


def check_reported_average(name: str, values: Sequence[float], reported: float | None, places: int = 2) -> tuple[float, str | None]:
    """Recompute a table row's average; return it with a note when the printed value disagrees."""
    avg = mean_accuracy(values, places)
    if reported is None or round_half_up(reported, places) == avg:
        return avg, None
    shown = ", ".join(f"{v:g}" for v in values)
    return avg, f"{name}: reported average {reported:.{places}f} differs from the mean of ({shown}) = {avg:.{places}f}"


@dataclass
class DatasetScore:
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


@dataclass
class EvalReport:
    per_dataset: dict[str, DatasetScore]
    config: EvalConfig
    checkpoint: str | None = None
    fallbacks: int = 0
    notes: list[str] = field(default_factory=list)
    predictions: dict[str, int] = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean([s.accuracy for s in self.per_dataset.values()]))

    def to_json(self) -> dict:
        return {
            "setting": self.config.setting,
            "mode": self.config.mode,
            "config": self.config.to_json(),
            "checkpoint": self.checkpoint,
            "datasets": {
                k: {"n": s.n, "correct": s.correct, "accuracy": s.accuracy}
                for k, s in sorted(self.per_dataset.items())
            },
            "average": self.average,
            "average_percent": mean_accuracy([100.0 * s.accuracy for _, s in sorted(self.per_dataset.items())]),
            "fallbacks": self.fallbacks,
            "notes": list(self.notes),
            "predictions": dict(self.predictions),
        }


def evaluate(
    model,
    items: Sequence[MCQAItem],
    config: EvalConfig,
    checkpoint: str | None = None,
    datasets: Sequence[str] | None = None,
) -> EvalReport:
    """Accuracy per dataset; ``datasets`` names groups expected in the average.

    Expected groups without items are left out of the average with a warning.
    Items are visited in id order so the report does not depend on input order.
    """
    if not items:
        raise ValueError("no items to evaluate")
    groups: dict[str, DatasetScore] = {}
    report = EvalReport(groups, config, checkpoint)
    for item in sorted(items, key=lambda it: it.id):
        pred = predict_detailed(model, item, config)
        s = groups.setdefault(item.dataset, DatasetScore(0, 0))
        s.n += 1
        s.correct += int(pred.index == item.answer_idx)
        report.fallbacks += int(pred.fallback)
        report.predictions[item.id] = pred.index
    for name in datasets or ():
        if name not in groups:
            msg = f"dataset {name!r} has no items; excluded from the average"
            log.warning(msg)
            report.notes.append(msg)
    return report


def task_finetune_then_eval(
    model: TransformerLM,
    train_items: Sequence[MCQAItem],
    test_items: Sequence[MCQAItem],
    train_config,
    eval_config: EvalConfig,
) -> EvalReport:
    """Fine-tune a copy of ``model`` on plain choice supervision, then evaluate it."""
    from .train import InstructionTrainer

    tuned = TransformerLM(model.config, {k: v.copy() for k, v in model.params.items()})
    if train_config.epochs:
        InstructionTrainer(tuned, build_choice_samples(train_items), train_config).run()
    cfg = EvalConfig(**{**eval_config.to_json(), "setting": "task_finetune"})
    return evaluate(tuned, test_items, cfg)
