"""Packed training sequences, answer-only labels, block-diagonal masks.

A packed sequence lays out K question/answer pairs as
BOS q_1 EOS a_1 BOS q_2 EOS a_2 ... Only the position immediately before
each answer token (the segment's EOS) carries a label; everything else is
the ignore sentinel, so the loss sees exactly K answer predictions per
sequence. The attention mask is causal within a segment and blocks
everything across segments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from finsent.dataset import LABEL_TO_LETTER, LabeledExample
from finsent.prompting import PromptTemplate
from finsent.tokenizer import Vocabulary


class PackingError(ValueError):
    pass


class ExampleTooLong(PackingError):
    """Prompt cannot fit in max_seq_len together with BOS, EOS and answer."""


@dataclass(frozen=True)
class TokenizedExample:
    prompt_tokens: tuple[int, ...]
    answer_token: int
    source_index: int

    @property
    def packed_length(self) -> int:
        # BOS + prompt + EOS + answer
        return len(self.prompt_tokens) + 3


@dataclass(frozen=True)
class PackedSequence:
    tokens: tuple[int, ...]
    labels: tuple[int, ...]
    segment_ids: tuple[int, ...]
    pair_count: int
    source_indices: tuple[int, ...]


def tokenize_pair(
    example: LabeledExample,
    vocab: Vocabulary,
    template: PromptTemplate,
    max_seq_len: int,
    source_index: int = 0,
) -> TokenizedExample:
    """Tokenize one example into (prompt tokens, single answer token)."""
    prompt = template.build_sft_prompt(example.sentence)
    prompt_tokens = vocab.encode(prompt)
    letter_ids = vocab.encode(LABEL_TO_LETTER[example.label])
    assert len(letter_ids) == 1  # protected answer letters are atomic
    if len(prompt_tokens) + 3 > max_seq_len:
        raise ExampleTooLong(
            f"example {source_index}: {len(prompt_tokens)} prompt tokens "
            f"exceed max_seq_len {max_seq_len} minus framing"
        )
    return TokenizedExample(
        prompt_tokens=tuple(prompt_tokens),
        answer_token=letter_ids[0],
        source_index=source_index,
    )


def pack(examples: list[TokenizedExample], max_seq_len: int,
         vocab: Vocabulary) -> list[PackedSequence]:
    """Greedy first-fit packing in input order; no padding inside sequences."""
    sequences: list[PackedSequence] = []
    cur: list[TokenizedExample] = []
    cur_len = 0
    for ex in examples:
        if ex.packed_length > max_seq_len:
            raise ExampleTooLong(
                f"example {ex.source_index} does not fit in max_seq_len {max_seq_len}"
            )
        if cur and cur_len + ex.packed_length > max_seq_len:
            sequences.append(_assemble(cur, vocab))
            cur, cur_len = [], 0
        cur.append(ex)
        cur_len += ex.packed_length
    if cur:
        sequences.append(_assemble(cur, vocab))
    return sequences


def _assemble(group: list[TokenizedExample], vocab: Vocabulary) -> PackedSequence:
    tokens: list[int] = []
    segment_ids: list[int] = []
    for k, ex in enumerate(group):
        seg = [vocab.bos_id, *ex.prompt_tokens, vocab.eos_id, ex.answer_token]
        tokens.extend(seg)
        segment_ids.extend([k] * len(seg))
    packed = PackedSequence(
        tokens=tuple(tokens),
        labels=(),
        segment_ids=tuple(segment_ids),
        pair_count=len(group),
        source_indices=tuple(ex.source_index for ex in group),
    )
    return PackedSequence(
        tokens=packed.tokens,
        labels=tuple(build_labels(packed, vocab.ignore_label, vocab)),
        segment_ids=packed.segment_ids,
        pair_count=packed.pair_count,
        source_indices=packed.source_indices,
    )


def build_labels(packed: PackedSequence, ignore_label: int,
                 vocab: Vocabulary) -> list[int]:
    """Next-token labels: the EOS position of each segment targets its
    answer token; every other position is the ignore sentinel."""
    tokens = packed.tokens
    seg = packed.segment_ids
    labels = [ignore_label] * len(tokens)
    for t in range(len(tokens) - 1):
        if tokens[t] == vocab.eos_id and seg[t + 1] == seg[t]:
            labels[t] = tokens[t + 1]
    _check_layout(packed, vocab)
    return labels


def _check_layout(packed: PackedSequence, vocab: Vocabulary) -> None:
    tokens, seg = packed.tokens, packed.segment_ids
    if len(tokens) != len(seg):
        raise PackingError("tokens and segment_ids length mismatch")
    if not tokens:
        return
    if list(dict.fromkeys(seg)) != list(range(packed.pair_count)):
        raise PackingError("segment ids must be contiguous 0..K-1")
    start = 0
    for k in range(packed.pair_count):
        end = start
        while end < len(seg) and seg[end] == k:
            end += 1
        segment = tokens[start:end]
        if len(segment) < 3 or segment[0] != vocab.bos_id:
            raise PackingError(f"segment {k} must start with BOS")
        if segment[-2] != vocab.eos_id or vocab.eos_id in segment[1:-2]:
            raise PackingError(f"segment {k} must contain exactly one EOS before the answer")
        if segment[-1] not in vocab.answer_ids:
            raise PackingError(f"segment {k} must end with an answer token")
        start = end


def build_attention_mask(packed: PackedSequence) -> np.ndarray:
    """T x T boolean mask: attend iff same segment and causal (j <= i)."""
    seg = np.asarray(packed.segment_ids)
    same = seg[:, None] == seg[None, :]
    causal = np.tril(np.ones((len(seg), len(seg)), dtype=bool))
    return same & causal


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def save_pack_file(path: str | Path, sequences: list[PackedSequence]) -> None:
    """Debug dump: per sequence, three integer lines (tokens, labels,
    segment ids) then a source-index line, records separated by a blank
    line."""
    records = []
    for s in sequences:
        records.append(
            "\n".join(
                " ".join(str(v) for v in row)
                for row in (s.tokens, s.labels, s.segment_ids, s.source_indices)
            )
        )
    Path(path).write_text("\n\n".join(records) + "\n", encoding="utf-8", newline="\n")


def load_pack_file(path: str | Path) -> list[PackedSequence]:
    text = Path(path).read_text(encoding="utf-8").strip()
    sequences = []
    if not text:
        return sequences
    for record in text.split("\n\n"):
        rows = [tuple(int(v) for v in line.split()) for line in record.split("\n")]
        if len(rows) != 4:
            raise PackingError(f"bad pack record in {path}")
        tokens, labels, seg, sources = rows
        sequences.append(
            PackedSequence(
                tokens=tokens,
                labels=labels,
                segment_ids=seg,
                pair_count=len(sources),
                source_indices=sources,
            )
        )
    return sequences
