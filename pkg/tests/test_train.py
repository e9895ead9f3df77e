import math

import numpy as np
import pytest

from domainforge.instruct import InstructionSample, render_training_example, sample_rng
from domainforge.mixer import Mixer, Packed, pack
from domainforge.model import LossMaskBatch, ModelConfig, TransformerLM, loss_and_grads
from domainforge.train import (
    InjectionTrainer,
    InstructionTrainer,
    NonFiniteGradient,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    adamw_step,
    train_injection,
    train_instruction,
)

SMALL = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, context_len=32)


def _scalar(w, g, **kw):
    params = {"w": np.array([w], dtype=np.float64)}
    grads = {"w": np.array([g], dtype=np.float64)}
    cfg = TrainConfig(**{"lr": 0.1, "weight_decay": 0.0, **kw})
    state = OptimizerState.zeros_like(params)
    adamw_step(params, grads, state, cfg)
    return params["w"][0], state


def test_defaults():
    assert TrainConfig().epochs == 5
    assert TrainConfig(stage="instruct").epochs == 3
    c = TrainConfig()
    assert (c.lr, c.betas, c.eps, c.weight_decay, c.grad_clip) == (2e-5, (0.9, 0.95), 1e-8, 0.1, 1.0)


def test_adamw_first_step_hand_value():
    w, state = _scalar(1.0, 1.0)
    # m = 0.1, v = 0.05; bias correction restores mhat = vhat = 1.
    assert w == pytest.approx(1.0 - 0.1 * 1.0 / (1.0 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adamw_zero_gradient_no_decay_is_identity():
    w, _ = _scalar(0.7, 0.0)
    assert w == 0.7


def test_adamw_decoupled_decay():
    w, _ = _scalar(2.0, 0.0, weight_decay=0.5)
    assert w == 2.0 - 0.1 * 0.5 * 2.0


def test_adamw_clips_global_norm():
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    state = OptimizerState.zeros_like(params)
    norm = adamw_step(params, grads, state, TrainConfig(lr=0.1, weight_decay=0.0, grad_clip=1.0))
    assert norm == 5.0
    assert state.m["a"][0] == pytest.approx(0.1 * 0.6)
    assert state.m["b"][0] == pytest.approx(0.1 * 0.8)


def test_adamw_rejects_non_finite():
    params = {"w": np.ones(2)}
    with pytest.raises(NonFiniteGradient):
        adamw_step(params, {"w": np.array([1.0, np.nan])}, OptimizerState.zeros_like(params), TrainConfig())
    assert (params["w"] == 1).all()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    for name in ("fsdp", "bf16", "gradient_checkpointing"):
        with pytest.raises(NotImplementedError, match="desk scale"):
            TrainConfig(**{name: True})
    assert TrainConfig.from_json(TrainConfig(lr=3e-4).to_json()) == TrainConfig(lr=3e-4)


def test_log_steps_strictly_increase():
    log = TrainLog()
    log.append({"step": 1, "loss": 1.0})
    with pytest.raises(ValueError):
        log.append({"step": 1, "loss": 1.0})


def _book_mixer(n_book=30, seed=0):
    ctx = SMALL.context_len
    rng = np.random.default_rng(1)

    def packed(n):
        t = rng.integers(0, 256, (n, ctx)).astype(np.uint32)
        return Packed(t, np.ones_like(t, dtype=bool))

    return Mixer({"book": packed(n_book), "paper": packed(8), "general": packed(2)}, 20, seed=seed)


def test_injection_epoch_budget_is_ten_batches():
    model = TransformerLM(SMALL)
    _, log = train_injection(model, _book_mixer(30), TrainConfig(epochs=5, lr=1e-3))
    assert len(log) == 10
    assert [r["step"] for r in log] == list(range(1, 11))
    assert {"step", "stage", "loss", "tokens_seen", "book_epoch", "lr", "grad_norm"} <= set(log[0])


def test_first_loss_near_ln_vocab():
    model = TransformerLM(SMALL)
    trainer = InjectionTrainer(model, _book_mixer(), TrainConfig())
    rec = trainer.step()
    assert abs(rec["loss"] - math.log(259)) < 0.05


def test_divergence_aborts_with_checkpoint_path(tmp_path):
    model = TransformerLM(SMALL)
    path = tmp_path / "k.ckpt"
    trainer = InjectionTrainer(model, _book_mixer(), TrainConfig(checkpoint_every=1, checkpoint_path=str(path)))
    trainer.step()
    model.params["final_norm"][:] = np.nan
    with pytest.raises(TrainingDiverged, match=str(path)):
        trainer.step()
    assert path.exists()


INSTR = ModelConfig(**{**SMALL.to_json(), "context_len": 64})


def _samples(n):
    return [
        InstructionSample(id=f"s{i}", kind="conversation", instruction=f"say {i}", response=f"number {i}")
        for i in range(n)
    ]


def test_instruction_step_count():
    model = TransformerLM(INSTR)
    _, log = train_instruction(model, _samples(10), TrainConfig(stage="instruct", epochs=3, batch_size=5))
    assert len(log) == 6


def test_instruction_same_seed_same_params():
    runs = []
    for _ in range(2):
        model = TransformerLM(INSTR)
        train_instruction(model, _samples(7), TrainConfig(stage="instruct", epochs=2, batch_size=3, lr=1e-3))
        runs.append(model.params)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_instruction_tokens_never_carry_loss():
    s = _samples(1)[0]
    ex = render_training_example(s, sample_rng(0, s.id), 64)
    batch = LossMaskBatch.from_rows(ex.tokens[None], ex.loss_mask[None])
    model = TransformerLM(ModelConfig(**{**SMALL.to_json(), "context_len": 64, "dtype": "float64"}))
    loss, _ = loss_and_grads(model.params, model.config, batch)
    poked = LossMaskBatch(batch.tokens, batch.targets.copy(), batch.mask)
    poked.targets[~batch.mask] = 42
    assert loss_and_grads(model.params, model.config, poked)[0] == loss
    # Only response targets (and the closing EOS) are counted.
    assert int(batch.mask.sum()) == len(s.response) + 1


def test_instruction_resume_matches_uninterrupted(tmp_path):
    cfg = TrainConfig(stage="instruct", epochs=3, batch_size=3, lr=1e-3, seed=4)
    a = TransformerLM(INSTR)
    InstructionTrainer(a, _samples(7), cfg).run()
    b = TransformerLM(INSTR)
    t1 = InstructionTrainer(b, _samples(7), cfg)
    t1.run(max_steps=4)
    t1.save(tmp_path / "i.ckpt")
    from domainforge.checkpoint import load_checkpoint

    c = TransformerLM(INSTR)
    t2 = InstructionTrainer(c, _samples(7), cfg)
    t2.load_state(load_checkpoint(tmp_path / "i.ckpt"))
    t2.run()
    assert t2.step_count == 9
    assert all(np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_trainer_rejects_wrong_stage():
    with pytest.raises(ValueError):
        InstructionTrainer(TransformerLM(SMALL), _samples(2), TrainConfig())
    with pytest.raises(ValueError):
        InstructionTrainer(TransformerLM(SMALL), [], TrainConfig(stage="instruct"))


def test_injection_on_packed_text_learns():
    docs = ["the kidney filters the blood. " * 4, "the heart pumps the blood. " * 4]
    p = pack(docs, 32)
    m = Mixer({"book": p, "paper": p, "general": p}, 20)
    model = TransformerLM(SMALL)
    log = InjectionTrainer(model, m, TrainConfig(lr=3e-3, weight_decay=0.0, epochs=100)).run(max_steps=40)
    assert log[-1]["loss"] < log[0]["loss"] - 2.0
