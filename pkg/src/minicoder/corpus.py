"""Source-file curation and training-example construction.

Raw Python files are deduplicated by content hash and kept only when they
are small, parse as Python 3, and have reasonable line lengths.  Functions
and methods are extracted per AST node, reserialized from the tree (which
drops comments, blank lines, and trailing whitespace), and deduplicated by
body hash.  Formatted examples become fixed-length chunks for stage-1
training or per-pair instances for stage-2.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import struct
import textwrap
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np

from .tokenizer import (
    DESCR_ID,
    EOC_ID,
    PYTHON_ID,
    Segment,
    TokenSequence,
    Vocabulary,
    decode,
    encode,
)

log = logging.getLogger(__name__)

MAX_FILE_BYTES = 1 << 20
MAX_MEAN_LINE_LENGTH = 100
MAX_LINE_LENGTH = 1000

MIN_DOCSTRING_WORDS = 19
MAX_BODY_WORDS = 400
MAX_LENGTH_RATIO = 32.0

_INSTANCE_MAGIC = b"MCIN"
_INSTANCE_VERSION = 1


@dataclass(frozen=True)
class RawFile:
    path: str
    content: bytes
    content_hash: str


@dataclass(frozen=True)
class FunctionRecord:
    name: str
    signature: str
    docstring: str | None
    body: str
    source_path: str
    body_hash: str


class InstanceKind(IntEnum):
    STAGE1_CHUNK = 1
    STAGE2_PAIR = 2


@dataclass
class TrainingInstance:
    kind: InstanceKind
    tokens: TokenSequence

    def __len__(self) -> int:
        return len(self.tokens)


def content_hash(data: bytes) -> str:
    """128-bit content digest used for file- and body-level dedup."""
    return hashlib.md5(data).hexdigest()


def passes_quality(content: bytes, max_file_bytes: int = MAX_FILE_BYTES) -> bool:
    """File-level quality gate: size, parseability, and line lengths."""
    if len(content) >= max_file_bytes:
        return False
    try:
        text = content.decode("utf-8")
    except UnicodeDecodeError:
        return False
    try:
        ast.parse(text)
    except (SyntaxError, ValueError, RecursionError):
        return False
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if lines:
        if sum(len(line) for line in lines) / len(lines) >= MAX_MEAN_LINE_LENGTH:
            return False
        if max(len(line) for line in lines) >= MAX_LINE_LENGTH:
            return False
    return True


def ingest(root: str, max_file_bytes: int = MAX_FILE_BYTES) -> list[RawFile]:
    """Collect surviving ``.py`` files under ``root``.

    Files are visited in sorted path order, deduplicated by content hash
    (first occurrence wins), then filtered by :func:`passes_quality`.
    Running ingest over a directory of its own survivors returns the same
    set.
    """
    paths: list[str] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name.endswith(".py"):
                paths.append(os.path.join(dirpath, name))
    survivors: list[RawFile] = []
    seen: set[str] = set()
    for path in paths:
        try:
            with open(path, "rb") as handle:
                content = handle.read()
        except OSError as exc:
            log.warning("skipping unreadable file %s: %s", path, exc)
            continue
        digest = content_hash(content)
        if digest in seen:
            continue
        seen.add(digest)
        if not passes_quality(content, max_file_bytes):
            continue
        survivors.append(
            RawFile(os.path.relpath(path, root), content, digest)
        )
    return survivors


def signature_text(node: ast.FunctionDef | ast.AsyncFunctionDef) -> str:
    prefix = "async def " if isinstance(node, ast.AsyncFunctionDef) else "def "
    args = ast.unparse(node.args)
    returns = f" -> {ast.unparse(node.returns)}" if node.returns is not None else ""
    return f"{prefix}{node.name}({args}){returns}:"


def _is_string_stmt(stmt: ast.stmt) -> bool:
    return (
        isinstance(stmt, ast.Expr)
        and isinstance(stmt.value, ast.Constant)
        and isinstance(stmt.value.value, str)
    )


def extract_functions(raw: RawFile, seen: set[str] | None = None) -> list[FunctionRecord]:
    """One record per function or method, deduplicated by body hash.

    The docstring and any other leading string-literal statements are
    removed from the body; a function whose body then becomes empty gets
    ``pass``.  Bodies are reserialized from the AST at zero indentation.
    """
    if seen is None:
        seen = set()
    tree = ast.parse(raw.content.decode("utf-8"))
    records: list[FunctionRecord] = []
    for node in ast.walk(tree):
        if not isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            continue
        docstring = ast.get_docstring(node)
        if docstring is not None and not docstring.strip():
            docstring = None
        stmts = node.body
        while stmts and _is_string_stmt(stmts[0]):
            stmts = stmts[1:]
        body = "\n".join(ast.unparse(stmt) for stmt in stmts) if stmts else "pass"
        digest = content_hash(body.encode("utf-8"))
        if digest in seen:
            continue
        seen.add(digest)
        records.append(
            FunctionRecord(
                name=node.name,
                signature=signature_text(node),
                docstring=docstring,
                body=body,
                source_path=raw.path,
                body_hash=digest,
            )
        )
    return records


def extract_corpus(files: Iterable[RawFile]) -> list[FunctionRecord]:
    """Extract from every file with body-hash dedup applied corpus-wide."""
    seen: set[str] = set()
    records: list[FunctionRecord] = []
    for raw in files:
        records.extend(extract_functions(raw, seen))
    return records


def code_text(record: FunctionRecord) -> str:
    """Code part of a formatted example: newline, signature, indented body."""
    return "\n" + record.signature + "\n" + textwrap.indent(record.body, "    ")


def format_example(record: FunctionRecord, vocab: Vocabulary) -> TokenSequence:
    """Serialize a record into the training token layout.

    With a docstring: ``<descr>`` docstring ``<python>`` code ``<eoc>``.
    Without one the description part is omitted entirely.
    """
    seq = TokenSequence()
    if record.docstring is not None:
        seq.append_special(DESCR_ID)
        seq.extend(encode(record.docstring, Segment.DESCR, vocab))
    seq.append_special(PYTHON_ID)
    seq.extend(encode(code_text(record), Segment.CODE, vocab))
    seq.append_special(EOC_ID)
    return seq


def build_stage1(examples: Iterable[TokenSequence], n_cntx: int) -> list[TrainingInstance]:
    """Concatenate all examples and cut into chunks of exactly ``n_cntx``.

    The tail remainder shorter than ``n_cntx`` is dropped.
    """
    ids: list[int] = []
    segments: list[Segment] = []
    for seq in examples:
        ids.extend(seq.ids)
        segments.extend(seq.segments)
    chunks: list[TrainingInstance] = []
    for start in range(0, len(ids) - n_cntx + 1, n_cntx):
        chunk = TokenSequence(
            ids[start : start + n_cntx], segments[start : start + n_cntx]
        )
        chunks.append(TrainingInstance(InstanceKind.STAGE1_CHUNK, chunk))
    return chunks


def build_stage2(
    examples: Iterable[TokenSequence],
    vocab: Vocabulary,
    n_cntx: int,
    min_docstring_words: int = MIN_DOCSTRING_WORDS,
    max_body_words: int = MAX_BODY_WORDS,
    max_length_ratio: float = MAX_LENGTH_RATIO,
) -> list[TrainingInstance]:
    """Keep one instance per docstring-code pair that passes the length gates.

    Examples without a description segment are skipped.  A pair is dropped
    when the docstring has fewer than ``min_docstring_words`` words, the
    code part has more than ``max_body_words`` words, the longer part
    exceeds the shorter by more than ``max_length_ratio`` times, or the
    token sequence does not fit in ``n_cntx``.
    """
    instances: list[TrainingInstance] = []
    for seq in examples:
        descr_ids = [
            i for i, s in zip(seq.ids, seq.segments) if s == Segment.DESCR
        ]
        if not descr_ids:
            continue
        code_ids = [i for i, s in zip(seq.ids, seq.segments) if s == Segment.CODE]
        doc_words = len(decode(descr_ids, vocab).split())
        body_words = len(decode(code_ids, vocab).split())
        if doc_words < min_docstring_words:
            continue
        if body_words > max_body_words:
            continue
        low, high = min(doc_words, body_words), max(doc_words, body_words)
        if low == 0 or high / low > max_length_ratio:
            continue
        if len(seq) > n_cntx:
            continue
        if seq.ids[-1] != EOC_ID:
            raise ValueError("stage-2 candidate does not end with <eoc>")
        instances.append(TrainingInstance(InstanceKind.STAGE2_PAIR, seq.copy()))
    return instances


def save_manifest(records: Iterable[FunctionRecord], path: str) -> None:
    """Write one JSON object per record, in order."""
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(
                json.dumps(
                    {
                        "name": record.name,
                        "signature": record.signature,
                        "docstring": record.docstring,
                        "body": record.body,
                        "source_path": record.source_path,
                        "body_hash": record.body_hash,
                    }
                )
                + "\n"
            )


def load_manifest(path: str) -> list[FunctionRecord]:
    records: list[FunctionRecord] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(
                FunctionRecord(
                    name=row["name"],
                    signature=row["signature"],
                    docstring=row["docstring"],
                    body=row["body"],
                    source_path=row["source_path"],
                    body_hash=row["body_hash"],
                )
            )
    return records


def save_instances(
    instances: Iterable[TrainingInstance], path: str, n_cntx: int, embedding_size: int
) -> None:
    """Write instances as a compact little-endian binary file."""
    items = list(instances)
    with open(path, "wb") as handle:
        handle.write(_INSTANCE_MAGIC)
        handle.write(
            struct.pack("<III", _INSTANCE_VERSION, len(items), n_cntx)
        )
        handle.write(struct.pack("<I", embedding_size))
        for inst in items:
            handle.write(struct.pack("<BI", int(inst.kind), len(inst.tokens)))
            handle.write(np.asarray(inst.tokens.ids, dtype="<u4").tobytes())
            handle.write(
                np.asarray([int(s) for s in inst.tokens.segments], dtype="u1").tobytes()
            )


def load_instances(path: str) -> tuple[list[TrainingInstance], dict]:
    """Read instances plus the header metadata they were written with."""
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:4] != _INSTANCE_MAGIC:
        raise ValueError(f"not an instance file: {path}")
    version, count, n_cntx, embedding_size = struct.unpack_from("<IIII", data, 4)
    if version != _INSTANCE_VERSION:
        raise ValueError(f"unsupported instance file version {version}")
    offset = 20
    instances: list[TrainingInstance] = []
    for _ in range(count):
        kind, length = struct.unpack_from("<BI", data, offset)
        offset += 5
        ids = np.frombuffer(data, dtype="<u4", count=length, offset=offset)
        offset += 4 * length
        segments = np.frombuffer(data, dtype="u1", count=length, offset=offset)
        offset += length
        instances.append(
            TrainingInstance(
                InstanceKind(kind),
                TokenSequence(
                    [int(i) for i in ids], [Segment(int(s)) for s in segments]
                ),
            )
        )
    meta = {"n_cntx": n_cntx, "embedding_size": embedding_size}
    return instances, meta
