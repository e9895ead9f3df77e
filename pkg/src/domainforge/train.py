"""Two-stage training: knowledge injection over mixed batches, then
response-masked instruction tuning.  Both stages share the AdamW update and
the checkpoint format, and both can stop and resume bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .instruct import InstructionSample, RenderedExample, render_training_example, sample_rng
from .mixer import Mixer
from .model import LossMaskBatch, ModelConfig, TransformerLM, loss_and_grads
from .tokenizer import PAD

log = logging.getLogger(__name__)

LOG_TAIL = 20
DESK_SCALE_ONLY = ("fsdp", "bf16", "gradient_checkpointing")


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "inject"
    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    batch_size: int = 20
    epochs: int | None = None
    grad_clip: float | None = 1.0
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    # Accepted names for the large-cluster settings; enabling any of them fails.
    fsdp: bool = False
    bf16: bool = False
    gradient_checkpointing: bool = False

    def __post_init__(self):
        if self.stage not in ("inject", "instruct"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs is None:
            self.epochs = 5 if self.stage == "inject" else 3
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in DESK_SCALE_ONLY:
            if getattr(self, name):
                raise NotImplementedError(f"{name} is not supported at desk scale")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adamw_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig) -> float:
    """One AdamW update in place; returns the pre-clip global gradient norm.

    Gradients are clipped to ``config.grad_clip`` global norm first.  Weight
    decay is decoupled: ``p <- p - lr*wd*p`` before the Adam step.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteGradient(f"non-finite gradient in {bad}; step skipped")
    scale = 1.0
    if config.grad_clip and norm > config.grad_clip:
        scale = config.grad_clip / norm
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k] * scale if scale != 1.0 else grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            p -= (config.lr * config.weight_decay) * p
        p -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return norm


class TrainLog(list):
    """Per-step records; steps strictly increase."""

    def append(self, record: dict) -> None:
        if self and record["step"] <= self[-1]["step"]:
            raise ValueError("log steps must strictly increase")
        super().append(record)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self]

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self:
                fh.write(json.dumps(r) + "\n")


class _Trainer:
    stage = ""

    def __init__(self, model: TransformerLM, config: TrainConfig):
        if config.stage != self.stage:
            raise ValueError(f"{type(self).__name__} needs stage={self.stage!r}, got {config.stage!r}")
        self.model = model
        self.config = config
        self.opt = OptimizerState.zeros_like(model.params)
        self.step_count = 0
        self.tokens_seen = 0
        self.log = TrainLog()
        self.last_checkpoint: str | None = None
        # Free-form provenance echoed into every checkpoint (e.g. the CLI's effective config).
        self.meta: dict = {}

    def _update(self, batch: LossMaskBatch, extra: dict) -> dict:
        loss, grads = loss_and_grads(self.model.params, self.model.config, batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(
                f"loss became {loss} at step {self.step_count + 1}; last checkpoint: {self.last_checkpoint}"
            )
        norm = adamw_step(self.model.params, grads, self.opt, self.config)
        self.step_count += 1
        self.tokens_seen += int(batch.mask.sum())
        record = {
            "step": self.step_count,
            "stage": self.stage,
            "loss": loss,
            "tokens_seen": self.tokens_seen,
            "lr": self.config.lr,
            "grad_norm": norm,
            **extra,
        }
        self.log.append(record)
        cfg = self.config
        if cfg.checkpoint_every and cfg.checkpoint_path and self.step_count % cfg.checkpoint_every == 0:
            self.save(cfg.checkpoint_path)
        return record

    def finished(self) -> bool:
        raise NotImplementedError

    def run(self, max_steps: int | None = None) -> TrainLog:
        """Step until the epoch budget is spent, or ``max_steps`` more steps have run."""
        limit = max_steps if max_steps is not None else self.config.max_steps
        done = 0
        while not self.finished() and (limit is None or done < limit):
            self.step()
            done += 1
        return self.log

    def step(self) -> dict:
        raise NotImplementedError

    def _state(self) -> dict:
        raise NotImplementedError

    def _restore(self, state: dict) -> None:
        raise NotImplementedError

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.config.to_json(),
            params=self.model.params,
            opt_m=self.opt.m,
            opt_v=self.opt.v,
            opt_step=self.opt.step,
            state={
                "stage": self.stage,
                "step": self.step_count,
                "tokens_seen": self.tokens_seen,
                "train_config": self.config.to_json(),
                "meta": self.meta,
                **self._state(),
            },
            log_tail=list(self.log[-LOG_TAIL:]),
        )

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.to_checkpoint())
        self.last_checkpoint = os.fspath(path)

    def load_state(self, ckpt: Checkpoint) -> None:
        """Adopt parameters, optimizer moments and position from ``ckpt``."""
        if ckpt.state.get("stage") != self.stage:
            raise ValueError(f"checkpoint is from stage {ckpt.state.get('stage')!r}, not {self.stage!r}")
        self.model.params = {k: v.copy() for k, v in ckpt.params.items()}
        self.opt = OptimizerState({k: v.copy() for k, v in ckpt.opt_m.items()}, {k: v.copy() for k, v in ckpt.opt_v.items()}, ckpt.opt_step)
        self.step_count = ckpt.state["step"]
        self.tokens_seen = ckpt.state["tokens_seen"]
        self.log = TrainLog(ckpt.log_tail)
        self.meta = dict(ckpt.state.get("meta", {}))
        self._restore(ckpt.state)


class InjectionTrainer(_Trainer):
    """Knowledge injection: every non-PAD token of every mixed row is a target."""

    stage = "inject"

    def __init__(self, model: TransformerLM, mixer: Mixer, config: TrainConfig):
        super().__init__(model, config)
        self.mixer = mixer

    def finished(self) -> bool:
        return self.mixer.epoch_state.epoch >= self.config.epochs

    def step(self) -> dict:
        batch, epoch = self.mixer.next_batch()
        lm_batch = LossMaskBatch.from_rows(batch.tokens, batch.mask)
        return self._update(lm_batch, {"book_epoch": epoch.epoch})

    def _state(self) -> dict:
        return {"mixer": self.mixer.state()}

    def _restore(self, state: dict) -> None:
        self.mixer.restore(state["mixer"])


def pad_examples(examples: Sequence[RenderedExample]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(e) for e in examples)
    tokens = np.full((len(examples), T), PAD, dtype=np.int64)
    mask = np.zeros((len(examples), T), dtype=bool)
    for i, e in enumerate(examples):
        tokens[i, : len(e)] = e.tokens
        mask[i, : len(e)] = e.loss_mask
    return tokens, mask


class InstructionTrainer(_Trainer):
    """Instruction tuning: only response tokens (and the closing EOS) are targets.

    ``data`` holds InstructionSamples, re-rendered every epoch so a fresh
    instruction variant is drawn, or pre-rendered examples used as is.
    """

    stage = "instruct"

    def __init__(self, model: TransformerLM, data: Sequence[InstructionSample | RenderedExample], config: TrainConfig):
        super().__init__(model, config)
        if not data:
            raise ValueError("instruction dataset is empty")
        self.data = list(data)
        self.epoch = 0
        self.batch_in_epoch = 0

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.data) // self.config.batch_size)

    def finished(self) -> bool:
        return self.epoch >= self.config.epochs

    def _example(self, i: int) -> RenderedExample:
        item = self.data[i]
        if isinstance(item, RenderedExample):
            return item
        rng = sample_rng(self.config.seed, item.id, self.epoch)
        return render_training_example(item, rng, self.model.config.context_len)

    def step(self) -> dict:
        order = np.random.default_rng([self.config.seed, self.epoch]).permutation(len(self.data))
        bs = self.config.batch_size
        idx = order[self.batch_in_epoch * bs : (self.batch_in_epoch + 1) * bs]
        tokens, mask = pad_examples([self._example(int(i)) for i in idx])
        record = self._update(LossMaskBatch.from_rows(tokens, mask), {"epoch": self.epoch})
        self.batch_in_epoch += 1
        if self.batch_in_epoch == self.batches_per_epoch:
            self.batch_in_epoch = 0
            self.epoch += 1
        return record

    def _state(self) -> dict:
        return {"epoch": self.epoch, "batch_in_epoch": self.batch_in_epoch}

    def _restore(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self.batch_in_epoch = state["batch_in_epoch"]


def train_injection(model: TransformerLM, mixer: Mixer, config: TrainConfig) -> tuple[dict, TrainLog]:
    trainer = InjectionTrainer(model, mixer, config)
    trainer.run()
    return model.params, trainer.log


def train_instruction(model: TransformerLM, data, config: TrainConfig) -> tuple[dict, TrainLog]:
    trainer = InstructionTrainer(model, data, config)
    trainer.run()
    return model.params, trainer.log


def model_from_checkpoint(ckpt: Checkpoint | str | os.PathLike) -> TransformerLM:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    config = ModelConfig(**ckpt.model_config)
    return TransformerLM(config, {k: v.copy() for k, v in ckpt.params.items()})
