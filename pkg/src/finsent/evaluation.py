"""Accuracy reports for few-shot, SFT, and classification-head models."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from finsent.dataset import LabeledExample, label_to_id
from finsent.model import Checkpoint, forward_cls, generate_answer
from finsent.prompting import PromptTemplate
from finsent.tokenizer import Vocabulary

MODES = ("fewshot", "sft", "classhead")

# Accuracies reported in prior work on this benchmark; shipped for the
# comparison table only, never recomputed here.
REFERENCE_BASELINES = (
    ("LSTM", 0.71),
    ("LSTM with ELMo", 0.75),
    ("ULMFit", 0.83),
    ("LPS", 0.71),
    ("HSC", 0.71),
    ("FinBERT", 0.86),
)


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    mode: str
    n: int
    correct: int
    confusion: list[list[int]]  # rows = gold class, cols = predicted class
    per_example: list[dict] = field(default_factory=list)
    unparsed_count: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "unparsed_count": self.unparsed_count,
            "per_example": self.per_example,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8"
        )


def _empty_report(mode: str) -> EvalReport:
    return EvalReport(mode=mode, n=0, correct=0,
                      confusion=[[0] * 3 for _ in range(3)])


def _record(report: EvalReport, source_index: int, gold: int, pred: int,
            confidence: float | None) -> None:
    report.n += 1
    report.correct += int(gold == pred)
    report.confusion[gold][pred] += 1
    entry = {"source_index": source_index, "gold": gold, "pred": pred}
    if confidence is not None:
        entry["confidence"] = confidence
    report.per_example.append(entry)


def evaluate_generation(ckpt: Checkpoint, template: PromptTemplate,
                        testset: list[LabeledExample], vocab: Vocabulary,
                        mode: str = "sft") -> EvalReport:
    """Generate a constrained answer letter per example and score it.

    mode selects the prompt: "fewshot" uses the 3-shot template,
    "sft" the bare instruction+question form. Constrained decoding means
    unparsed_count is always 0 here.
    """
    if mode not in ("fewshot", "sft"):
        raise EvaluationError(f"unknown generation mode {mode!r}")
    if not testset:
        raise EvaluationError("empty test set")
    report = _empty_report(mode)
    letter_class = {tid: k for k, tid in enumerate(sorted(vocab.answer_ids))}
    for idx, ex in enumerate(testset):
        if mode == "fewshot":
            prompt = template.build_fewshot_prompt(ex.sentence)
        else:
            prompt = template.build_sft_prompt(ex.sentence)
        answer_id = generate_answer(ckpt, vocab.encode(prompt), vocab)
        _record(report, idx, label_to_id(ex.label), letter_class[answer_id], None)
    return report


def evaluate_classhead(ckpt: Checkpoint, template: PromptTemplate,
                       testset: list[LabeledExample],
                       vocab: Vocabulary) -> EvalReport:
    """Classify each example via the 3-way head; confidence is the max
    softmax probability. Argmax ties break to the lowest class id."""
    if not testset:
        raise EvaluationError("empty test set")
    report = _empty_report("classhead")
    for idx, ex in enumerate(testset):
        prompt = template.build_sft_prompt(ex.sentence)
        tokens = [vocab.bos_id, *vocab.encode(prompt), vocab.eos_id]
        logits = forward_cls(ckpt, tokens)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        pred = int(np.argmax(probs))  # np.argmax returns the first maximum
        _record(report, idx, label_to_id(ex.label), pred, float(probs[pred]))
    return report


def compare_report(reports: list[EvalReport],
                   include_baselines: bool = False) -> str:
    """Fixed-width method-vs-accuracy table over the given reports."""
    if not reports:
        raise EvaluationError("at least one report required")
    order = {m: i for i, m in enumerate(MODES)}
    rows = [(r.mode, r.accuracy) for r in
            sorted(reports, key=lambda r: order.get(r.mode, 99))]
    width = max(len("Method"), max(len(name) for name, _ in rows),
                *(len(n) for n, _ in REFERENCE_BASELINES))
    lines = [f"{'Method':<{width}}  Accuracy", "-" * (width + 10)]
    for name, acc in rows:
        lines.append(f"{name:<{width}}  {acc:.4f}")
    if include_baselines:
        lines.append("-" * (width + 10))
        lines.append("paper-reported baselines (not reproduced):")
        for name, acc in REFERENCE_BASELINES:
            lines.append(f"{name:<{width}}  {acc:.2f}")
    return "\n".join(lines) + "\n"
