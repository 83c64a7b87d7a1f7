"""Byte-level BPE tokenizer with reserved special tokens.

Every input is encodable (byte fallback), so encode/decode are total and
round-trip exactly. The answer letters "A", "B", "C" are protected: no
merge rule may touch their byte tokens, which keeps each letter a single
token in any context.

Vocabulary layout:
    ids 0..255     raw byte tokens
    id 256         BOS
    id 257         EOS
    id 258         PAD
    ids 259..      merge products, in training order
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

N_BYTES = 256
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
FIRST_MERGE_ID = 259
IGNORE_LABEL = -1

SPECIAL_IDS = (BOS_ID, EOS_ID, PAD_ID)
SPECIAL_NAMES = {BOS_ID: "<bos>", EOS_ID: "<eos>", PAD_ID: "<pad>"}

ANSWER_LETTERS = ("A", "B", "C")
# byte tokens for A/B/C; merges never include these ids
PROTECTED_IDS = frozenset(letter.encode()[0] for letter in ANSWER_LETTERS)

VOCAB_FILE_HEADER = "finsent-vocab v1"


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Immutable trained vocabulary. encode/decode are pure."""

    size: int
    merges: tuple[tuple[int, int], ...]
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID
    pad_id: int = PAD_ID
    ignore_label: int = IGNORE_LABEL
    _id_to_bytes: dict[int, bytes] = field(default_factory=dict, repr=False)
    _merge_rank: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        id_to_bytes = {i: bytes([i]) for i in range(N_BYTES)}
        rank = {}
        for k, (a, b) in enumerate(self.merges):
            new_id = FIRST_MERGE_ID + k
            id_to_bytes[new_id] = id_to_bytes[a] + id_to_bytes[b]
            rank[(a, b)] = k
        object.__setattr__(self, "_id_to_bytes", id_to_bytes)
        object.__setattr__(self, "_merge_rank", rank)

    @property
    def answer_ids(self) -> tuple[int, int, int]:
        """Token ids of the letters A, B, C (always single byte tokens)."""
        return tuple(letter.encode()[0] for letter in ANSWER_LETTERS)

    def encode(self, text: str) -> list[int]:
        """Encode text to token ids. Never emits special ids."""
        ids = list(text.encode("utf-8"))
        if not self._merge_rank:
            return ids
        while len(ids) > 1:
            best_rank = None
            for pair in zip(ids, ids[1:]):
                r = self._merge_rank.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                break
            a, b = self.merges[best_rank]
            merged_id = FIRST_MERGE_ID + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def decode(self, ids: list[int]) -> str:
        """Inverse of encode on encode's image. Rejects special/unknown ids."""
        chunks = []
        for tid in ids:
            if tid in SPECIAL_IDS:
                raise TokenizerError(f"special token id {tid} in decode stream")
            if tid not in self._id_to_bytes:
                raise TokenizerError(f"unknown token id {tid}")
            chunks.append(self._id_to_bytes[tid])
        return b"".join(chunks).decode("utf-8")

    def token_bytes(self, tid: int) -> bytes:
        return self._id_to_bytes[tid]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        lines = [VOCAB_FILE_HEADER]
        for tid in range(self.size):
            if tid in SPECIAL_NAMES:
                token = SPECIAL_NAMES[tid]
            else:
                token = _escape(self._id_to_bytes[tid])
            lines.append(f"{tid}\t{token}")
        lines.append("#merges")
        for a, b in self.merges:
            lines.append(f"{a} {b}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if not lines or lines[0] != VOCAB_FILE_HEADER:
            raise TokenizerError(f"bad vocabulary file header in {path}")
        try:
            sentinel = lines.index("#merges")
        except ValueError:
            raise TokenizerError(f"missing #merges sentinel in {path}") from None
        size = sentinel - 1
        merges = []
        for line in lines[sentinel + 1 :]:
            if not line:
                continue
            a, b = line.split(" ")
            merges.append((int(a), int(b)))
        vocab = cls(size=size, merges=tuple(merges))
        # verify the token block matches what the merges reconstruct
        for line in lines[1:sentinel]:
            tid_s, token = line.split("\t", 1)
            tid = int(tid_s)
            if tid in SPECIAL_NAMES:
                if token != SPECIAL_NAMES[tid]:
                    raise TokenizerError(f"id {tid} must be {SPECIAL_NAMES[tid]}")
            elif _unescape(token) != vocab._id_to_bytes.get(tid):
                raise TokenizerError(f"token mismatch at id {tid}")
        return vocab


def train_bpe(corpus: list[str], vocab_size: int) -> Vocabulary:
    """Train a byte-level BPE vocabulary on corpus.

    Deterministic for a fixed corpus order and vocab_size: the most
    frequent adjacent pair wins each round, ties broken by the smaller
    (left, right) id pair. Pairs occurring only once are never merged.
    """
    min_size = N_BYTES + len(SPECIAL_IDS)
    if not corpus:
        raise TokenizerError("corpus must be non-empty")
    if vocab_size < min_size:
        raise TokenizerError(f"vocab_size {vocab_size} below minimum {min_size}")

    sequences = [list(text.encode("utf-8")) for text in corpus]
    token_bytes = {i: bytes([i]) for i in range(N_BYTES)}
    known_bytes = set(token_bytes.values())
    merges: list[tuple[int, int]] = []
    while min_size + len(merges) < vocab_size:
        counts: Counter[tuple[int, int]] = Counter()
        for seq in sequences:
            for pair in zip(seq, seq[1:]):
                if pair[0] in PROTECTED_IDS or pair[1] in PROTECTED_IDS:
                    continue
                # a merge whose byte string already exists would break the
                # token<->id bijection
                if token_bytes[pair[0]] + token_bytes[pair[1]] in known_bytes:
                    continue
                counts[pair] += 1
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best = min(pair for pair, c in counts.items() if c == best_count)
        new_id = FIRST_MERGE_ID + len(merges)
        merges.append(best)
        a, b = best
        token_bytes[new_id] = token_bytes[a] + token_bytes[b]
        known_bytes.add(token_bytes[new_id])
        for si, seq in enumerate(sequences):
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            sequences[si] = out
    return Vocabulary(size=min_size + len(merges), merges=tuple(merges))


def _escape(token: bytes) -> str:
    out = []
    for byte in token:
        ch = chr(byte)
        if ch == "\\":
            out.append("\\\\")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\r":
            out.append("\\r")
        elif 0x20 <= byte < 0x7F:
            out.append(ch)
        else:
            out.append(f"\\x{byte:02x}")
    return "".join(out)


def _unescape(token: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(token):
        ch = token[i]
        if ch != "\\":
            out.append(ord(ch))
            i += 1
            continue
        nxt = token[i + 1]
        if nxt == "\\":
            out.append(ord("\\"))
            i += 2
        elif nxt == "t":
            out.append(ord("\t"))
            i += 2
        elif nxt == "n":
            out.append(ord("\n"))
            i += 2
        elif nxt == "r":
            out.append(ord("\r"))
            i += 2
        elif nxt == "x":
            out.append(int(token[i + 2 : i + 4], 16))
            i += 4
        else:
            raise TokenizerError(f"bad escape in vocab token: {token!r}")
    return bytes(out)
