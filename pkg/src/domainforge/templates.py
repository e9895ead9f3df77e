"""Fixed prompt and serialization templates.

The distillation prompts are kept exact to the character, typos
included ("Quesion", "Hyperophy", "Vitamin Bp"); golden files in the
test suite pin them.
"""

from __future__ import annotations

import string

LETTERS = string.ascii_uppercase

PARAPHRASE_QUERY = "Rewrite 10 sentences that convey similar meanings to what I've stated: {seeds}."

GENERAL_RATIONALE_HEAD = (
    "Provide analysis about the question, take the following two questions as examples\n"
    "\n"
    "Quesion: Chronic urethral obstruction due to benign prismatic hyperplasia can lead to the "
    "following change in kidney parenchyma\n"
    "\n"
    "A. Hyperplasia\n"
    "B. Hyperophy\n"
    "C. Atrophy\n"
    "D. Dyplasia\n"
    "\n"
    "The answer is Option C Atrophy, so the analysis is Chronic urethral obstruction because of "
    "urinary calculi, prostatic hyperophy, tumors, normal pregnancy, tumors, uterine prolapse or "
    "functional disorders cause hydronephrosis which by definition is used to describe dilatation "
    "of renal pelvis and calculus associated with progressive atrophy of the kidney due to "
    "obstruction to the outflow of urine.\n"
    "\n"
    "Quesion: Which vitamin is supplied from only animal source?\n"
    "\n"
    "A. Vitamin C\n"
    "B. Vitamin B7\n"
    "C. Vitamin B12\n"
    "D. Vitamin D\n"
    "\n"
    "The answer is Option C Vitamin B12, so the analysis is Vitamin B12 (Cobalamin) is synthesized "
    "solely by microorganisms. In humans, the only source for humans is food of animal origin, "
    "e.g., meat, fish, and dairy products. Vegetables, fruits, and other foods of nonanimal origin "
    "doesn't contain Vitamin B12 . Daily requirements of vitamin Bp is about 1-3 pg. Body stores "
    "are of the order of 2-3 mg, sufficient for 3-4 years if supplies are completely cut off.\n"
    "\n"
    "Now help me with another question\n"
    "\n"
)

# Zero-shot MCQA instruction.
CHOICE_INSTRUCTION = "Make a choice based on the question and options."


def check_choice(options: list[str], answer_idx: int) -> None:
    if not 1 <= len(options) <= len(LETTERS):
        raise ValueError(f"need between 1 and 26 options, got {len(options)}")
    if not 0 <= answer_idx < len(options):
        raise ValueError(f"answer_idx {answer_idx} out of range for {len(options)} options")


def option_lines(options: list[str]) -> str:
    return "\n".join(f"{LETTERS[i]}. {opt}" for i, opt in enumerate(options))


def answer_label(options: list[str], answer_idx: int) -> str:
    """``"Option C Atrophy"``, the phrasing used by the few-shot rationale examples."""
    return f"Option {LETTERS[answer_idx]} {options[answer_idx]}"


def render_paraphrase_query(seeds: str) -> str:
    if not seeds or not seeds.strip():
        raise ValueError("instruction seed must be nonempty")
    return PARAPHRASE_QUERY.format(seeds=seeds)


def render_general_rationale_prompt(question: str, options: list[str], answer_idx: int) -> str:
    check_choice(options, answer_idx)
    new_question = f"Quesion: {question}\n\n{option_lines(options)}"
    return (
        GENERAL_RATIONALE_HEAD
        + new_question
        + f"\nThe answer is {answer_label(options, answer_idx)}, so the analysis is"
    )


def render_optionwise_rationale_prompt(question: str, options: list[str], answer_idx: int) -> str:
    check_choice(options, answer_idx)
    fmt = "\n".join(
        f"Option {LETTERS[i]} is {'TRUE' if i == answer_idx else 'FALSE'}. [option analysis for {LETTERS[i]}]"
        for i in range(len(options))
    )
    return (
        f"{question}\n{option_lines(options)}\n"
        f"\n"
        f"Answer: {answer_label(options, answer_idx)}\n"
        f"\n"
        f"Analyze each option in detail in the format of\n"
        f"{fmt}"
    )


def render_instruction(instruction: str, input_text: str | None = None) -> str:
    """Prompt half of the training serialization; the response follows directly."""
    out = f"### Instruction:\n{instruction}\n\n"
    if input_text:
        out += f"### Input:\n{input_text}\n\n"
    return out + "### Response:\n"


def render_mcqa_input(question: str, options: list[str], context: str | None = None) -> str:
    body = f"Question: {question}\nOptions:\n{option_lines(options)}"
    if context:
        body = f"Context: {context}\n{body}"
    return body
