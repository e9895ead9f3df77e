"""
Knowledge injection, then instruction tuning
============================================

A tiny model first memorizes the cleaned fixture corpus, then learns to
answer the fixture instructions.  Only response tokens carry loss in the
second stage.  Takes a minute or two on a laptop CPU.
"""

from pathlib import Path

from domainforge.corpus import clean_corpus, filter_papers, ingest
from domainforge.evaluate import EvalConfig, evaluate, read_items
from domainforge.instruct import (
    FixtureParaphraseProvider,
    build_choice_samples,
    build_conversation_samples,
    build_kg_samples,
    read_jsonl,
    read_kg,
    render_training_example,
    sample_rng,
)
from domainforge.mixer import Mixer, pack
from domainforge.model import ModelConfig, TransformerLM, greedy_decode
from domainforge.templates import render_instruction
from domainforge.tokenizer import decode, encode
from domainforge.train import InjectionTrainer, InstructionTrainer, TrainConfig

fixtures = Path(__file__).resolve().parents[1] / "fixtures"

# Stage K: next-token loss on every non-PAD token of the mixed batches.
c = fixtures / "corpus"
docs, _ = clean_corpus(
    list(ingest(c / "books.jsonl")) + list(filter_papers(ingest(c / "papers.jsonl"))) + list(ingest(c / "general.jsonl"))
)
packed = {s: pack([d.text for d in docs if d.source == s], 128) for s in ("book", "paper", "general")}
model = TransformerLM(ModelConfig(d_model=64, n_layers=2, n_heads=2, d_ff=256, context_len=256))
k = InjectionTrainer(model, Mixer(packed, 20), TrainConfig(lr=3e-3, weight_decay=0.0, epochs=10_000))
for r in k.run(max_steps=150)[::30]:
    print(f"inject step {r['step']:3d} loss {r['loss']:.3f} book epoch {r['book_epoch']}")

# Stage I: the prompt half of each rendered example is masked out.
i = fixtures / "instruct"
conv = build_conversation_samples(read_jsonl(i / "conversations.jsonl"), FixtureParaphraseProvider(), 3)
ents, trips = read_kg(i / "kg_entities.jsonl", i / "kg_triples.jsonl")
items = read_items(i / "mcqa_train.jsonl")
data = conv + build_kg_samples(ents, trips) + build_choice_samples(items)

ex = render_training_example(data[0], sample_rng(0, data[0].id), 256)
print("prompt (no loss):", repr(decode(ex.tokens[: ex.boundary])))
print("response (loss): ", repr(decode(ex.tokens[ex.boundary :])))

stage_i = InstructionTrainer(model, data, TrainConfig(stage="instruct", lr=2e-3, weight_decay=0.0, batch_size=8, epochs=20))
log = stage_i.run()
print(f"instruct steps {len(log)}  final loss {log[-1]['loss']:.3f}")

# Twenty epochs gets the opening words right; full recall takes far longer.
for s in data[:3]:
    out = decode(greedy_decode(model, encode(render_instruction(s.instruction, s.input)), 64))
    print(f"{s.instruction!r} -> {out!r}")

print(evaluate(model, items, EvalConfig()).to_json()["datasets"])
