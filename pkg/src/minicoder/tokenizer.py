"""Byte-level subword vocabulary with reserved control tokens.

Training grows a subword inventory by iterative pair merging over a text
corpus.  Encoding is greedy longest-match over that inventory, which makes
the saved vocabulary file (subwords only, no merge history) sufficient to
reproduce tokenization exactly after a reload.  Every byte value is part of
the inventory, so any string can be encoded and decoded losslessly.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

SPECIAL_TOKENS = ("<descr>", "<python>", "<eoc>", "<mask>", "<pad>")
NUM_SPECIALS = len(SPECIAL_TOKENS)
DESCR_ID, PYTHON_ID, EOC_ID, MASK_ID, PAD_ID = range(NUM_SPECIALS)

# 256 single-byte subwords plus the reserved control tokens.
MIN_VOCAB_SIZE = 256 + NUM_SPECIALS

_VOCAB_MAGIC = "minicoder-vocab 1"


class Segment(IntEnum):
    """Role tag carried by every token in a sequence."""

    DESCR = 0
    CODE = 1
    SPECIAL = 2


@dataclass
class TokenSequence:
    """Token ids paired one-to-one with segment tags."""

    ids: list[int] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.segments):
            raise ValueError("ids and segments must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def append_special(self, token_id: int) -> None:
        if not 0 <= token_id < NUM_SPECIALS:
            raise ValueError(f"not a special token id: {token_id}")
        self.ids.append(token_id)
        self.segments.append(Segment.SPECIAL)

    def extend(self, other: "TokenSequence") -> None:
        self.ids.extend(other.ids)
        self.segments.extend(other.segments)

    def copy(self) -> "TokenSequence":
        return TokenSequence(list(self.ids), list(self.segments))


@dataclass(frozen=True)
class Vocabulary:
    """Immutable subword inventory.

    Ordinary subwords occupy ids ``NUM_SPECIALS..size-1``; the reserved
    control tokens hold ids ``0..NUM_SPECIALS-1`` and are never produced by
    encoding ordinary text.  With ``separate_code_space`` set, tokens encoded
    as code are shifted by ``size`` so code and description occurrences of
    the same subword get distinct embedding rows.
    """

    subwords: tuple[bytes, ...]
    separate_code_space: bool = False

    def __post_init__(self) -> None:
        if len(set(self.subwords)) != len(self.subwords):
            raise ValueError("duplicate subword in vocabulary")
        table = {piece: NUM_SPECIALS + i for i, piece in enumerate(self.subwords)}
        object.__setattr__(self, "_table", table)
        max_len = max((len(p) for p in self.subwords), default=0)
        object.__setattr__(self, "_max_len", max_len)

    @property
    def size(self) -> int:
        """Number of distinct token ids in the base space."""
        return NUM_SPECIALS + len(self.subwords)

    @property
    def embedding_size(self) -> int:
        """Rows an embedding table needs: doubled when code ids are offset."""
        return 2 * self.size if self.separate_code_space else self.size

    def code_offset(self) -> int:
        return self.size if self.separate_code_space else 0

    def piece(self, base_id: int) -> bytes:
        """Raw bytes of an ordinary token id in the base space."""
        if not NUM_SPECIALS <= base_id < self.size:
            raise ValueError(f"not an ordinary base token id: {base_id}")
        return self.subwords[base_id - NUM_SPECIALS]


def encode(text: str, segment: Segment, vocab: Vocabulary) -> TokenSequence:
    """Tokenize ``text`` by greedy longest-match over the subword inventory.

    ``segment`` must be DESCR or CODE; control tokens are appended
    structurally, never produced from text.  Raises ValueError if a byte has
    no matching subword (cannot happen for trained vocabularies, which
    contain all 256 single bytes).
    """
    if segment == Segment.SPECIAL:
        raise ValueError("text cannot be encoded as SPECIAL")
    data = text.encode("utf-8")
    table: dict[bytes, int] = vocab._table  # type: ignore[attr-defined]
    max_len: int = vocab._max_len  # type: ignore[attr-defined]
    offset = vocab.code_offset() if segment == Segment.CODE else 0
    ids: list[int] = []
    pos = 0
    n = len(data)
    while pos < n:
        limit = min(max_len, n - pos)
        for length in range(limit, 0, -1):
            token_id = table.get(data[pos : pos + length])
            if token_id is not None:
                ids.append(token_id + offset)
                pos += length
                break
        else:
            raise ValueError(f"unencodable byte at position {pos}: {data[pos]:#04x}")
    return TokenSequence(ids, [segment] * len(ids))


def decode(ids: Iterable[int], vocab: Vocabulary, markers: bool = False) -> str:
    """Inverse of :func:`encode` over ordinary ids, in either id space.

    Control token ids render as their literal marker strings when
    ``markers`` is set and are skipped otherwise.  Raises ValueError for ids
    outside the vocabulary, naming the offending position.
    """
    pieces: list[bytes] = []
    size = vocab.size
    for pos, token_id in enumerate(ids):
        base = token_id
        if vocab.separate_code_space and size <= base < 2 * size:
            base -= size
        if not 0 <= base < size:
            raise ValueError(f"token id {token_id} at position {pos} is out of range")
        if base < NUM_SPECIALS:
            if markers:
                pieces.append(SPECIAL_TOKENS[base].encode("utf-8"))
            continue
        pieces.append(vocab.piece(base))
    return b"".join(pieces).decode("utf-8", errors="replace")


def train_vocabulary(
    texts: Iterable[str], target_size: int, separate_code_space: bool = False
) -> Vocabulary:
    """Grow a subword inventory to ``target_size`` ids by pair merging.

    Starts from all 256 single bytes, repeatedly merges the most frequent
    adjacent pair (ties broken by lexicographically smallest pair) until the
    target is reached or no pair occurs at least twice.  The target counts
    the reserved control tokens.
    """
    if target_size < MIN_VOCAB_SIZE:
        raise ValueError(
            f"target_size {target_size} is below the byte-fallback minimum "
            f"of {MIN_VOCAB_SIZE}"
        )
    pieces: list[bytes] = [bytes([b]) for b in range(256)]
    seqs: list[list[int]] = []
    for text in texts:
        data = text.encode("utf-8")
        if data:
            seqs.append(list(data))

    counts: Counter[tuple[int, int]] = Counter()
    where: dict[tuple[int, int], set[int]] = {}
    for idx, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            counts[pair] += 1
            where.setdefault(pair, set()).add(idx)

    def pair_key(item: tuple[tuple[int, int], int]):
        (a, b), count = item
        return (-count, pieces[a], pieces[b])

    while NUM_SPECIALS + len(pieces) < target_size and counts:
        (a, b), best_count = min(counts.items(), key=pair_key)
        if best_count < 2:
            break
        new_id = len(pieces)
        pieces.append(pieces[a] + pieces[b])
        affected = where.pop((a, b), set())
        for idx in affected:
            seq = seqs[idx]
            for pair in zip(seq, seq[1:]):
                counts[pair] -= 1
                if counts[pair] <= 0:
                    del counts[pair]
            merged: list[int] = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(seq[i])
                    i += 1
            seqs[idx] = merged
            for pair in zip(merged, merged[1:]):
                counts[pair] += 1
                where.setdefault(pair, set()).add(idx)
        counts.pop((a, b), None)

    return Vocabulary(subwords=tuple(pieces), separate_code_space=separate_code_space)


def _escape(piece: bytes) -> str:
    out: list[str] = []
    for byte in piece:
        if byte == 0x5C:
            out.append("\\\\")
        elif 0x20 <= byte <= 0x7E:
            out.append(chr(byte))
        else:
            out.append(f"\\x{byte:02x}")
    return "".join(out)


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if text[i : i + 2] == "\\\\":
                out.append(0x5C)
                i += 2
            elif text[i : i + 2] == "\\x" and i + 4 <= len(text):
                out.append(int(text[i + 2 : i + 4], 16))
                i += 4
            else:
                raise ValueError(f"bad escape at column {i}: {text[i:i+4]!r}")
        else:
            out.extend(ch.encode("utf-8"))
            i += 1
    return bytes(out)


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    """Write the vocabulary as a line-oriented text file."""
    lines = [
        _VOCAB_MAGIC,
        f"separate_code_space {int(vocab.separate_code_space)}",
        f"specials {NUM_SPECIALS}",
        *SPECIAL_TOKENS,
        f"subwords {len(vocab.subwords)}",
        *(_escape(piece) for piece in vocab.subwords),
    ]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def load_vocabulary(path: str) -> Vocabulary:
    """Read a vocabulary written by :func:`save_vocabulary`."""
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().split("\n")
    if not lines or lines[0] != _VOCAB_MAGIC:
        raise ValueError(f"not a vocabulary file: {path}")
    flag_name, flag_value = lines[1].split()
    if flag_name != "separate_code_space":
        raise ValueError(f"bad vocabulary header line: {lines[1]!r}")
    n_specials = int(lines[2].split()[1])
    if n_specials != NUM_SPECIALS:
        raise ValueError(f"expected {NUM_SPECIALS} control tokens, got {n_specials}")
    specials = tuple(lines[3 : 3 + n_specials])
    if specials != SPECIAL_TOKENS:
        raise ValueError(f"control token list mismatch: {specials}")
    count_line = lines[3 + n_specials]
    n_subwords = int(count_line.split()[1])
    start = 4 + n_specials
    subwords = tuple(_unescape(line) for line in lines[start : start + n_subwords])
    if len(subwords) != n_subwords:
        raise ValueError("vocabulary file truncated")
    return Vocabulary(subwords=subwords, separate_code_space=bool(int(flag_value)))
