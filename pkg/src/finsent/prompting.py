"""Single-choice prompt construction and answer parsing.

The default template reproduces the shipped instruction text verbatim,
typos included, so rendered prompts are stable bytes suitable for golden
file tests. Rendering is pure string substitution.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from finsent.dataset import LETTER_TO_LABEL

PLACEHOLDER = "{{title}}"

DEFAULT_INSTRUCTION = (
    "We want to perform the sentiment analsysis for financial news according "
    'to their titles. You are asked to choose the most suitable sentiment from '
    '("postive", "negative", "neutral") with signle-choice questions. '
    "Please follow these examples to answer the question."
)

DEFAULT_EXEMPLARS = (
    (
        "About Nokia Nokia is a pioneer in mobile telecommunications and the "
        "world's leading maker of mobile devices.",
        "A",
    ),
    (
        "Most of the permanent layoffs will be in the plywood and sawn timber "
        "sectors of the Finnish company's operations at several domestic "
        "mills, where earlier this year it temporarily laid off some 1,200 "
        "workers to save costs.",
        "B",
    ),
    (
        "The transaction is planned to be financed with a EUR40m market-based "
        "loan granted by Standard Chartered Bank Hong Kong.",
        "C",
    ),
)

DEFAULT_QUESTION_FORMAT = (
    "News Title: " + PLACEHOLDER + "\n"
    "Choices: A) positive. B) negative. C) neutral.\n"
    "Answer:"
)

# first standalone A/B/C, case-insensitive, not embedded in a word/number
_ANSWER_RE = re.compile(r"(?<![A-Za-z0-9])([ABCabc])(?![A-Za-z0-9])")


class PromptError(ValueError):
    pass


class NoAnswerFound(PromptError):
    """The generated text contains no standalone A/B/C answer letter."""


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str
    exemplars: tuple[tuple[str, str], ...]
    question_format: str

    def __post_init__(self):
        if len(self.exemplars) != 3:
            raise PromptError("exactly 3 exemplars required")
        if tuple(letter for _, letter in self.exemplars) != ("A", "B", "C"):
            raise PromptError("exemplar answers must be A, B, C in order")
        if PLACEHOLDER not in self.question_format:
            raise PromptError(f"question_format must contain {PLACEHOLDER}")
        if not self.question_format.endswith("Answer:"):
            raise PromptError("question_format must end with 'Answer:'")

    @classmethod
    def default(cls) -> "PromptTemplate":
        return cls(
            instruction=DEFAULT_INSTRUCTION,
            exemplars=DEFAULT_EXEMPLARS,
            question_format=DEFAULT_QUESTION_FORMAT,
        )

    def _question(self, title: str) -> str:
        return self.question_format.replace(PLACEHOLDER, title)

    def build_fewshot_prompt(self, title: str) -> str:
        """Instruction, the three worked exemplars, then the query block."""
        if not title.strip():
            raise PromptError("title is empty")
        blocks = [self.instruction]
        for exemplar_title, letter in self.exemplars:
            blocks.append(self._question(exemplar_title) + letter)
        blocks.append(self._question(title))
        return "\n\n".join(blocks)

    def build_sft_prompt(self, title: str) -> str:
        """Instruction plus a single query block; no exemplars."""
        if not title.strip():
            raise PromptError("title is empty")
        return "\n\n".join([self.instruction, self._question(title)])

    def to_file(self, path: str | Path) -> None:
        """Write the few-shot rendering with the title placeholder kept."""
        text = self.build_fewshot_prompt(PLACEHOLDER)
        Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        text = Path(path).read_text(encoding="utf-8")
        if text.endswith("\n"):
            text = text[:-1]
        blocks = text.split("\n\n")
        if len(blocks) < 3:
            raise PromptError(f"template file {path} has too few blocks")
        question_format = blocks[-1]
        if PLACEHOLDER not in question_format:
            raise PromptError(f"last block must contain {PLACEHOLDER}")
        prefix, _, suffix = question_format.partition(PLACEHOLDER)
        exemplars = []
        for block in blocks[1:-1]:
            # exemplar block = prefix + title + suffix + answer letter
            if not (block.startswith(prefix) and block[:-1].endswith(suffix)):
                raise PromptError("exemplar block does not match question format")
            title = block[len(prefix) : len(block) - len(suffix) - 1]
            letter = block[-1]
            exemplars.append((title, letter))
        return cls(
            instruction=blocks[0],
            exemplars=tuple(exemplars),
            question_format=question_format,
        )


def default_template_path() -> Path:
    return Path(resources.files("finsent") / "assets" / "default_template.txt")


def parse_answer(generated: str) -> str:
    """Map the first standalone answer letter in generated text to a label."""
    if not generated:
        raise PromptError("generated text is empty")
    match = _ANSWER_RE.search(generated)
    if match is None:
        raise NoAnswerFound(f"no answer letter in {generated!r}")
    return LETTER_TO_LABEL[match.group(1).upper()]
