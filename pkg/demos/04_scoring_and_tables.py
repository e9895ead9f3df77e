"""
Scoring multiple-choice answers and checking table arithmetic
=============================================================
"""

from domainforge.evaluate import EvalConfig, MCQAItem, check_reported_average, extract_letter, predict_detailed
from domainforge.model import UniformLM
from domainforge.templates import render_instruction, render_mcqa_input, CHOICE_INSTRUCTION

item = MCQAItem(
    id="demo-1",
    dataset="medmcqa",
    question="Chronic urethral obstruction leads the kidney to?",
    options=["Hyperplasia", "Hypertrophy", "Atrophy", "Dysplasia"],
    answer_idx=2,
)

# The zero-shot prompt the model sees.
print(render_instruction(CHOICE_INSTRUCTION, render_mcqa_input(item.question, item.options)))

# A model with flat logits scores every option the same; the tie goes to A.
pred = predict_detailed(UniformLM(), item, EvalConfig())
print("uniform model picks", "ABCD"[pred.index], "scores", [round(s, 4) for s in pred.scores])

# Generative mode reads the first option letter out of free text.
for text in ["The answer is Option C Atrophy", "(B) hypertrophy", "no idea"]:
    print(repr(text), "->", extract_letter(text, 4))

# Table rows: the average column is recomputed and mismatches are reported.
rows = {
    "ChatGPT": ([57.0, 44.0, 63.9], 54.97),
    "LLaMA-2 13B": ([42.73, 37.41, 68.0], 49.40),
    "PMC-LLaMA 13B": ([56.36, 56.04, 77.9], 64.43),
}
for name, (values, printed) in rows.items():
    avg, note = check_reported_average(name, values, printed)
    print(f"{name:14s} mean={avg:.2f} printed={printed:.2f}", "|", note or "ok")
