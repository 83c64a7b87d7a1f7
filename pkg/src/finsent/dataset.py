"""Financial PhraseBank ingestion, label mapping, and deterministic splits.

PhraseBank files are one `sentence@label` per line (split on the last
'@'), Latin-1 or UTF-8. Splitting shuffles with splitmix64 + Fisher-Yates
so the same seed reproduces the same member lists in any implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

LABELS = ("positive", "negative", "neutral")
# class ids 0/1/2 and answer letters A/B/C, in label order
LABEL_TO_ID = {"positive": 0, "negative": 1, "neutral": 2}
ID_TO_LABEL = dict(enumerate(LABELS))
LABEL_TO_LETTER = {"positive": "A", "negative": "B", "neutral": "C"}
LETTER_TO_LABEL = {"A": "positive", "B": "negative", "C": "neutral"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    sentence: str
    label: str

    def __post_init__(self):
        if not self.sentence.strip():
            raise DatasetError("sentence is empty")
        if self.label not in LABELS:
            raise DatasetError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.20
    val_fraction_of_rest: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise DatasetError("test_fraction must be in (0, 1)")
        if not 0.0 <= self.val_fraction_of_rest < 1.0:
            raise DatasetError("val_fraction_of_rest must be in [0, 1)")


def label_to_id(label: str) -> int:
    if label not in LABEL_TO_ID:
        raise DatasetError(f"unknown label {label!r}")
    return LABEL_TO_ID[label]


def id_to_label(class_id: int) -> str:
    if class_id not in ID_TO_LABEL:
        raise DatasetError(f"class id {class_id} out of range")
    return ID_TO_LABEL[class_id]


def _read_text(path: Path) -> str:
    raw = path.read_bytes()
    if raw.startswith(b"\xef\xbb\xbf"):
        return raw[3:].decode("utf-8")
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


def load_phrasebank(path: str | Path) -> list[LabeledExample]:
    """Load `sentence@label` lines, preserving order."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    examples = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        sentence, sep, label = line.rpartition("@")
        if not sep:
            raise DatasetError(f"{path}:{lineno}: missing '@' separator")
        label = label.strip()
        if label not in LABELS:
            raise DatasetError(f"{path}:{lineno}: unknown label {label!r}")
        if not sentence.strip():
            raise DatasetError(f"{path}:{lineno}: empty sentence")
        examples.append(LabeledExample(sentence=sentence, label=label))
    return examples


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output). Constants are the
    reference ones (golden-gamma increment, Stafford mix)."""
    mask = (1 << 64) - 1
    state = (state + 0x9E3779B97F4A7C15) & mask
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    z = z ^ (z >> 31)
    return state, z


def shuffled_indices(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of range(n) driven by splitmix64.

    The swap index at step i (from i = n-1 down to 1) is
    `next_output % (i + 1)`; modulo bias is negligible at these sizes and
    keeps the sequence trivially portable.
    """
    order = list(range(n))
    state = seed & ((1 << 64) - 1)
    for i in range(n - 1, 0, -1):
        state, out = _splitmix64(state)
        j = out % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def split_indices(n: int, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    """Disjoint, exhaustive (train, val, test) index lists."""
    if n == 0:
        raise DatasetError("cannot split an empty example list")
    order = shuffled_indices(n, spec.seed)
    n_test = int(spec.test_fraction * n + 0.5)
    n_val = int(spec.val_fraction_of_rest * (n - n_test) + 0.5)
    test = order[:n_test]
    val = order[n_test : n_test + n_val]
    train = order[n_test + n_val :]
    if spec.test_fraction > 0 and not test:
        raise DatasetError("test split is empty")
    if spec.val_fraction_of_rest > 0 and not val:
        raise DatasetError("validation split is empty")
    if not train:
        raise DatasetError("train split is empty")
    return train, val, test


def split(
    examples: list[LabeledExample], spec: SplitSpec
) -> tuple[list[LabeledExample], list[LabeledExample], list[LabeledExample]]:
    train_idx, val_idx, test_idx = split_indices(len(examples), spec)
    pick = lambda idx: [examples[i] for i in idx]
    return pick(train_idx), pick(val_idx), pick(test_idx)


def save_split_manifest(
    path: str | Path, n: int, spec: SplitSpec,
    train_idx: list[int], val_idx: list[int], test_idx: list[int],
) -> None:
    manifest = {
        "n": n,
        "seed": spec.seed,
        "test_fraction": spec.test_fraction,
        "val_fraction_of_rest": spec.val_fraction_of_rest,
        "train": train_idx,
        "val": val_idx,
        "test": test_idx,
    }
    Path(path).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_split_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
