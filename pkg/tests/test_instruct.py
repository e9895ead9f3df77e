import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainforge.instruct import (
    CompletionParaphraseProvider,
    FixtureParaphraseProvider,
    FixtureRationaleProvider,
    InstructionSample,
    KGEntity,
    KGRelationTriple,
    ProviderError,
    SampleTooLong,
    build_choice_samples,
    build_conversation_samples,
    build_kg_samples,
    build_rationale_samples,
    expand_instructions,
    masked_text,
    read_jsonl,
    read_kg,
    read_samples,
    render_training_example,
    sample_rng,
    write_samples,
)
from domainforge.evaluate import read_items
from domainforge.templates import (
    render_general_rationale_prompt,
    render_instruction,
    render_optionwise_rationale_prompt,
    render_paraphrase_query,
)
from domainforge.tokenizer import EOS, encode

Q = "Which drug is first line for anaphylaxis?"
OPTS = ["Adrenaline", "Aspirin", "Insulin", "Heparin"]


def test_paraphrase_query_golden(golden_dir):
    assert render_paraphrase_query("How to treat flu?") == (golden_dir / "paraphrase_query.txt").read_text(encoding="utf-8")


def test_paraphrase_query_substitution():
    assert render_paraphrase_query("x").endswith("what I've stated: x.")
    with pytest.raises(ValueError):
        render_paraphrase_query("  ")


def test_general_rationale_golden(golden_dir):
    got = render_general_rationale_prompt(Q, OPTS, 0)
    assert got == (golden_dir / "general_rationale.txt").read_text(encoding="utf-8")
    assert got == render_general_rationale_prompt(Q, OPTS, 0)


def test_general_rationale_names_letter():
    out = render_general_rationale_prompt(Q, OPTS, 2)
    assert out.splitlines()[-1].startswith("The answer is Option C")
    with pytest.raises(ValueError):
        render_general_rationale_prompt(Q, OPTS, 4)


def test_optionwise_rationale_golden(golden_dir):
    assert render_optionwise_rationale_prompt(Q, OPTS, 0) == (golden_dir / "optionwise_rationale.txt").read_text(encoding="utf-8")


def test_optionwise_truth_lines():
    lines = render_optionwise_rationale_prompt(Q, OPTS, 0).splitlines()[-4:]
    assert [ln.split(" [")[0] for ln in lines] == [
        "Option A is TRUE.",
        "Option B is FALSE.",
        "Option C is FALSE.",
        "Option D is FALSE.",
    ]
    three = render_optionwise_rationale_prompt(Q, OPTS[:3], 1)
    assert sum(ln.startswith("Option ") for ln in three.splitlines()) == 3
    with pytest.raises(ValueError):
        render_optionwise_rationale_prompt(Q, OPTS, -1)


def test_expand_with_canned_variants():
    p = FixtureParaphraseProvider({"seed": ["v1", "v2", "v3"]})
    assert expand_instructions("seed", p, 3) == ["seed", "v1", "v2"]
    assert expand_instructions("seed", p, 1) == ["seed"]


class _Repeating:
    """Returns one new variant per call, padded with repeats."""

    def __init__(self):
        self.calls = 0

    def expand(self, seed, n):
        self.calls += 1
        return [seed, "same", f"new{self.calls}", "same"][:n]


def test_expand_requeries_until_distinct():
    p = _Repeating()
    out = expand_instructions("s", p, 5)
    assert out == ["s", "same", "new1", "new2", "new3"]
    assert p.calls == 3
    assert len(set(out)) == len(out)


def test_expand_errors_carry_seed_id():
    class Broken:
        def expand(self, seed, n):
            raise RuntimeError("offline")

    with pytest.raises(ProviderError, match="conv-9"):
        expand_instructions("s", Broken(), 2, seed_id="conv-9")

    class Stuck:
        def expand(self, seed, n):
            return [seed]

    with pytest.raises(ProviderError, match="conv-9"):
        expand_instructions("s", Stuck(), 2, seed_id="conv-9")


def test_completion_provider_parses_numbered_lines():
    seen = []

    def complete(prompt):
        seen.append(prompt)
        return "1. first one\n2. second one\n\n- third one"

    p = CompletionParaphraseProvider(complete)
    assert p.expand("How to treat flu?", 3) == ["first one", "second one", "third one"]
    assert seen == [render_paraphrase_query("How to treat flu?")]


def test_kg_samples():
    ents = [KGEntity("Aspirin", "An antiplatelet drug."), KGEntity("Insulin", "A peptide hormone.")]
    trips = [KGRelationTriple("Aspirin", "treats", "fever"), KGRelationTriple("Insulin", "lowers", "glucose"),
             KGRelationTriple("Statin", "lowers", "cholesterol")]
    out = build_kg_samples(ents, trips)
    assert [s.kind for s in out] == ["kg_description"] * 2 + ["kg_relation"] * 3
    assert out[0].instruction == "Describe the medical entity: Aspirin."
    assert out[0].response == "An antiplatelet drug."
    assert out[2].instruction == "What is the relationship between Aspirin and fever?"
    assert out[2].response == "Aspirin treats fever."
    assert build_kg_samples([], []) == []
    with pytest.raises(ValueError):
        KGEntity("", "x")


def test_sample_validation():
    with pytest.raises(ValueError):
        InstructionSample("a", "chat", "i", "r")
    with pytest.raises(ValueError):
        InstructionSample("a", "conversation", "i", "")
    s = InstructionSample("a", "conversation", "i", "r", instruction_variants=["j"])
    assert s.instruction_variants == ["i", "j"]


def test_render_mask_layout():
    s = InstructionSample("a", "conversation", "I", "ok")
    ex = render_training_example(s, sample_rng(0, "a"), 64)
    prompt = encode(render_instruction("I"))
    assert ex.boundary == len(prompt)
    assert ex.tokens.tolist() == prompt + [111, 107, EOS]
    assert ex.loss_mask.tolist() == [False] * len(prompt) + [True] * 3
    assert masked_text(ex) == "ok"


def test_render_variant_is_reproducible():
    s = InstructionSample("a", "conversation", "v0", "ok", instruction_variants=["v1", "v2"])
    picks = [render_training_example(s, sample_rng(3, "a", e), 64).instruction for e in range(10)]
    again = [render_training_example(s, sample_rng(3, "a", e), 64).instruction for e in range(10)]
    assert picks == again
    assert set(picks) <= {"v0", "v1", "v2"}


def test_render_truncates_response_then_errors():
    s = InstructionSample("a", "conversation", "I", "a long enough response")
    n = len(encode(render_instruction("I")))
    ex = render_training_example(s, sample_rng(0, "a"), n + 3)
    assert ex.truncated and len(ex) == n + 3 and ex.loss_mask.sum() == 3
    with pytest.raises(SampleTooLong):
        render_training_example(s, sample_rng(0, "a"), n)


@settings(max_examples=100, deadline=None)
@given(
    st.text(min_size=1, max_size=40),
    st.text(min_size=1, max_size=40),
    st.one_of(st.none(), st.text(min_size=1, max_size=20)),
    st.lists(st.text(min_size=1, max_size=20), max_size=4),
    st.integers(0, 1000),
)
def test_mask_soundness_property(instruction, response, inp, variants, seed):
    s = InstructionSample("p", "conversation", instruction, response, input=inp, instruction_variants=variants)
    ex = render_training_example(s, sample_rng(seed, "p"), 4096)
    assert not ex.truncated
    assert masked_text(ex) == response
    assert int(ex.loss_mask.sum()) == len(response.encode("utf-8")) + 1
    assert not ex.loss_mask[: ex.boundary].any() and ex.loss_mask[ex.boundary :].all()
    assert ex.instruction in s.instruction_variants


def _fixture_dataset(fixtures_dir):
    d = fixtures_dir / "instruct"
    conv = build_conversation_samples(read_jsonl(d / "conversations.jsonl"), FixtureParaphraseProvider(), 3)
    ents, trips = read_kg(d / "kg_entities.jsonl", d / "kg_triples.jsonl")
    return conv + build_kg_samples(ents, trips) + build_choice_samples(read_items(d / "mcqa_train.jsonl"))


def test_fixture_dataset_mask_sums(fixtures_dir):
    data = _fixture_dataset(fixtures_dir)
    assert len(data) == 64
    for s in data:
        ex = render_training_example(s, sample_rng(0, s.id), 512)
        assert int(ex.loss_mask.sum()) == len(s.response.encode("utf-8")) + 1
        assert masked_text(ex) == s.response


def test_rationale_samples(fixtures_dir):
    items = read_items(fixtures_dir / "instruct" / "mcqa_train.jsonl")[:2]
    canned = FixtureRationaleProvider({items[0].id: "Because reasons."})
    out = build_rationale_samples(items, canned, style="general")
    assert out[0].kind == "rationale_qa"
    assert out[0].response.endswith("so the analysis is Because reasons.")
    opt = build_rationale_samples(items, FixtureRationaleProvider(), style="optionwise")
    assert "is TRUE." in opt[1].response


def test_samples_file_roundtrip(tmp_path, fixtures_dir):
    data = _fixture_dataset(fixtures_dir)
    write_samples(tmp_path / "s.jsonl", data)
    assert read_samples(tmp_path / "s.jsonl") == data
    first = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
    assert list(first) == ["id", "kind", "instruction", "response", "instruction_variants"]
