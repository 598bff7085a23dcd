"""Prompt assembly: demonstrations plus the query, rendered per task.

Each block (demonstration or query) is the task's instruction pattern with
its slots filled, a newline, and the answer cue; demonstration blocks append
their gold output after the cue, the query block ends at the cue. Blocks are
joined by the template separator (a single newline by default). Golden-file
tests pin the exact byte layout.

Slot values come from the example being rendered: ``{input}`` is the input
text, ``{target_language}`` the display name of the example's language tag,
and for the QA tasks ``{passage}``/``{question}`` split the input text at its
last newline (producers format QA inputs as "passage\\nquestion").
"""

from __future__ import annotations

import json
import string
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import Example
from .errors import TemplateError

LANGUAGE_NAMES = {
    "as": "Assamese",
    "awa": "Awadhi",
    "bn": "Bengali",
    "brx": "Bodo",
    "en": "English",
    "gu": "Gujarati",
    "hi": "Hindi",
    "kn": "Kannada",
    "mai": "Maithili",
    "ml": "Malayalam",
    "mni": "Manipuri",
    "mr": "Marathi",
    "mwr": "Marwari",
    "or": "Odia",
    "pa": "Punjabi",
    "raj": "Rajasthani",
    "sa": "Sanskrit",
    "sat": "Santali",
    "ta": "Tamil",
    "te": "Telugu",
    "ur": "Urdu",
}

_KNOWN_SLOTS = {"target_language", "passage", "question", "input"}


@dataclass(frozen=True)
class PromptTemplate:
    """Instruction pattern, block separator, and answer cue for one task."""

    task: str
    instruction: str
    answer_cue: str
    separator: str = "\n"

    def __post_init__(self):
        for slot in self.slots():
            if slot not in _KNOWN_SLOTS:
                raise TemplateError(f"template {self.task!r}: unknown slot {slot!r}")
        counts = [s for _, s, _, _ in string.Formatter().parse(self.instruction) if s]
        for slot in set(counts):
            if counts.count(slot) != 1:
                raise TemplateError(
                    f"template {self.task!r}: slot {slot!r} must appear exactly once"
                )

    def slots(self) -> set[str]:
        return {s for _, s, _, _ in string.Formatter().parse(self.instruction) if s}


BUILTIN_TEMPLATES = {
    "translation": PromptTemplate(
        task="translation",
        instruction="Translate the following sentence to English.\nInput: {input}",
        answer_cue="Output:",
    ),
    "summarization": PromptTemplate(
        task="summarization",
        instruction=(
            "Summarize the article in {target_language} language.\n"
            "Summarize the following article: {input}"
        ),
        answer_cue="Summary:",
    ),
    "xorqa": PromptTemplate(
        task="xorqa",
        instruction=(
            "Generate an answer in {target_language} language for the question "
            "based on the given passage.\n{passage}\nQuestion: {question}"
        ),
        answer_cue="Answer:",
    ),
    "xquad": PromptTemplate(
        task="xquad",
        instruction=(
            "Generate an answer for the next question in {target_language} "
            "language.\n{passage}\nQuestion: {question}"
        ),
        answer_cue="Answer:",
    ),
}


def language_name(tag: str) -> str:
    """Display name for a language tag; unknown tags pass through verbatim."""
    name = LANGUAGE_NAMES.get(tag)
    if name is None:
        warnings.warn(f"no display name for language tag {tag!r}; using the tag itself")
        return tag
    return name


def _slot_values(template: PromptTemplate, example: Example) -> dict[str, str]:
    values: dict[str, str] = {}
    for slot in template.slots():
        if slot == "input":
            values[slot] = example.input_text
        elif slot == "target_language":
            values[slot] = language_name(example.language)
        elif slot in ("passage", "question"):
            head, sep, tail = example.input_text.rpartition("\n")
            if not sep:
                raise TemplateError(
                    f"example {example.id!r}: cannot fill slot {slot!r} "
                    "(input text has no passage/question separator)"
                )
            values[slot] = head if slot == "passage" else tail
    return values


def _render_block(template: PromptTemplate, example: Example, with_output: bool) -> str:
    filled = template.instruction.format(**_slot_values(template, example))
    block = f"{filled}\n{template.answer_cue}"
    if with_output:
        block += f" {example.output_text}"
    return block


def render(
    template: PromptTemplate,
    demonstrations: Sequence[Example],
    query: Example,
) -> str:
    """Render demonstrations (already in prompt order) followed by the query.

    The query's output text is ignored; its block ends at the answer cue.
    """
    blocks = [_render_block(template, demo, with_output=True) for demo in demonstrations]
    blocks.append(_render_block(template, query, with_output=False))
    return template.separator.join(blocks)


def load_templates(path: str | Path) -> dict[str, PromptTemplate]:
    """Built-in templates with overrides from a JSON file applied on top.

    File layout: an object keyed by task tag, each value holding
    ``instruction``, ``answer_cue`` and optionally ``separator``.
    """
    templates = dict(BUILTIN_TEMPLATES)
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise TemplateError(f"{path}: template file must be a JSON object")
    for task, spec in obj.items():
        if not isinstance(spec, dict) or "instruction" not in spec or "answer_cue" not in spec:
            raise TemplateError(f"{path}: template {task!r} needs 'instruction' and 'answer_cue'")
        templates[task] = PromptTemplate(
            task=task,
            instruction=spec["instruction"],
            answer_cue=spec["answer_cue"],
            separator=spec.get("separator", "\n"),
        )
    return templates
