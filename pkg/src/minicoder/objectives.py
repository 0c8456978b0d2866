"""Training objectives: slot selection, input corruption, and loss layout.

Each objective turns a token sequence into a PreparedInstance holding two
loss channels over the model's output slots.  The next-token channel at
slot t predicts the original token at position t+1; the same-slot channel
at slot t predicts the original token at position t (used for masked
docstring reconstruction, where slot t has seen the corrupted token).
Weights encode the per-instance normalization, so the joint loss is a plain
weighted sum of cross entropies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokenizer import (
    DESCR_ID,
    EOC_ID,
    MASK_ID,
    NUM_SPECIALS,
    PYTHON_ID,
    Segment,
    TokenSequence,
    Vocabulary,
)

log = logging.getLogger(__name__)

OBJECTIVE_KINDS = ("clm", "code_clm", "docstr_mlm", "docstr_mclm")

ROLE_NONE = 0
ROLE_DOCSTR = 1
ROLE_CODE = 2


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which loss to apply and how to corrupt the description part.

    ``mask_rate`` governs both the corruption rate and, for the causal
    masked variant, the target-slot selection rate; at zero both docstring
    variants reduce exactly to the code-only objective.
    """

    kind: str = "code_clm"
    mask_rate: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind: {self.kind!r}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must be in [0, 1]")
        if len(self.mask_split) != 3 or any(p < 0 for p in self.mask_split):
            raise ValueError("mask_split must be three non-negative weights")
        if abs(sum(self.mask_split) - 1.0) > 1e-9:
            raise ValueError("mask_split must sum to 1")


@dataclass
class PreparedInstance:
    """Model input plus per-slot loss layout for one training sequence."""

    input_ids: np.ndarray
    orig_ids: np.ndarray
    segments: np.ndarray
    next_targets: np.ndarray
    next_weights: np.ndarray
    next_roles: np.ndarray
    same_targets: np.ndarray
    same_weights: np.ndarray

    def __len__(self) -> int:
        return len(self.input_ids)


def target_role(token_id: int, segment: int) -> int:
    """Loss-role of a token when it appears as a prediction target."""
    if segment == Segment.DESCR:
        return ROLE_DOCSTR
    if segment == Segment.CODE:
        return ROLE_CODE
    if token_id == DESCR_ID:
        return ROLE_DOCSTR
    if token_id in (PYTHON_ID, EOC_ID):
        return ROLE_CODE
    return ROLE_NONE


def _rng(spec: ObjectiveSpec, instance_index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([spec.seed, instance_index, epoch])
    )


def _base_arrays(tokens: TokenSequence):
    orig = np.asarray(tokens.ids, dtype=np.int64)
    segs = np.asarray([int(s) for s in tokens.segments], dtype=np.int8)
    n = len(orig)
    return orig, segs, n


def _empty_prepared(orig, segs) -> PreparedInstance:
    n = len(orig)
    return PreparedInstance(
        input_ids=orig.copy(),
        orig_ids=orig,
        segments=segs,
        next_targets=np.full(n, -1, dtype=np.int64),
        next_weights=np.zeros(n, dtype=np.float64),
        next_roles=np.zeros(n, dtype=np.int8),
        same_targets=np.full(n, -1, dtype=np.int64),
        same_weights=np.zeros(n, dtype=np.float64),
    )


def prepare_clm(tokens: TokenSequence) -> PreparedInstance:
    """Next-token loss over every slot, normalized by slot count."""
    orig, segs, n = _base_arrays(tokens)
    if n < 2:
        raise ValueError("causal loss needs at least two tokens")
    prep = _empty_prepared(orig, segs)
    weight = 1.0 / (n - 1)
    for t in range(n - 1):
        prep.next_targets[t] = orig[t + 1]
        prep.next_weights[t] = weight
        prep.next_roles[t] = target_role(int(orig[t + 1]), int(segs[t + 1]))
    return prep


def prepare_code_clm(tokens: TokenSequence) -> PreparedInstance:
    """Next-token loss on code-role targets only, normalized by their count.

    Docstring tokens still condition the prediction but never receive loss.
    """
    orig, segs, n = _base_arrays(tokens)
    if n < 2:
        raise ValueError("causal loss needs at least two tokens")
    prep = _empty_prepared(orig, segs)
    slots = [
        t
        for t in range(n - 1)
        if target_role(int(orig[t + 1]), int(segs[t + 1])) == ROLE_CODE
    ]
    if not slots:
        raise ValueError("instance has no code segment")
    weight = 1.0 / len(slots)
    for t in slots:
        prep.next_targets[t] = orig[t + 1]
        prep.next_weights[t] = weight
        prep.next_roles[t] = ROLE_CODE
    return prep


def _corrupt_descr(
    prep: PreparedInstance,
    spec: ObjectiveSpec,
    vocab: Vocabulary,
    rng: np.random.Generator,
) -> list[int]:
    """Mask/replace/keep sweep over description positions; returns selected."""
    mask_cut = spec.mask_split[0]
    rand_cut = spec.mask_split[0] + spec.mask_split[1]
    selected: list[int] = []
    for pos in np.flatnonzero(prep.segments == Segment.DESCR):
        if rng.random() >= spec.mask_rate:
            continue
        selected.append(int(pos))
        action = rng.random()
        if action < mask_cut:
            prep.input_ids[pos] = MASK_ID
        elif action < rand_cut:
            prep.input_ids[pos] = int(
                rng.integers(NUM_SPECIALS, vocab.size)
            )
        # else: keep the original token, still predicted.
    return selected


def prepare_docstr_mlm(
    tokens: TokenSequence,
    spec: ObjectiveSpec,
    vocab: Vocabulary,
    instance_index: int = 0,
    epoch: int = 0,
) -> PreparedInstance:
    """Code loss plus same-slot reconstruction of corrupted docstring tokens.

    Each selected docstring position is replaced by the mask token, a random
    ordinary token, or kept, per ``mask_split``; the original token is then
    predicted at that same slot, normalized by the selected count.
    """
    prep = prepare_code_clm(tokens)
    if not np.any(prep.segments == Segment.DESCR):
        raise ValueError("instance has no description segment")
    rng = _rng(spec, instance_index, epoch)
    selected = _corrupt_descr(prep, spec, vocab, rng)
    if selected:
        weight = 1.0 / len(selected)
        for pos in selected:
            prep.same_targets[pos] = prep.orig_ids[pos]
            prep.same_weights[pos] = weight
    return prep


def prepare_docstr_mclm(
    tokens: TokenSequence,
    spec: ObjectiveSpec,
    vocab: Vocabulary,
    instance_index: int = 0,
    epoch: int = 0,
) -> PreparedInstance:
    """Code loss plus next-token loss at selected docstring targets.

    The input is corrupted exactly as in the masked variant; an independent
    sweep then selects docstring positions whose ORIGINAL tokens are
    predicted causally from the preceding slot, normalized by their count.
    """
    prep = prepare_code_clm(tokens)
    if not np.any(prep.segments == Segment.DESCR):
        raise ValueError("instance has no description segment")
    rng = _rng(spec, instance_index, epoch)
    _corrupt_descr(prep, spec, vocab, rng)
    chosen = [
        int(pos)
        for pos in np.flatnonzero(prep.segments == Segment.DESCR)
        if rng.random() < spec.mask_rate
    ]
    if chosen:
        weight = 1.0 / len(chosen)
        for pos in chosen:
            slot = pos - 1
            prep.next_targets[slot] = prep.orig_ids[pos]
            prep.next_weights[slot] = weight
            prep.next_roles[slot] = ROLE_DOCSTR
    return prep


def prepare(
    tokens: TokenSequence,
    spec: ObjectiveSpec,
    vocab: Vocabulary | None = None,
    instance_index: int = 0,
    epoch: int = 0,
) -> PreparedInstance:
    """Dispatch on the objective kind.

    Instances without a description segment fall back to the code-only
    loss under the docstring objectives (with a diagnostic) instead of
    failing the whole batch.
    """
    if spec.kind == "clm":
        return prepare_clm(tokens)
    if spec.kind == "code_clm":
        return prepare_code_clm(tokens)
    if vocab is None:
        raise ValueError(f"objective {spec.kind!r} needs the vocabulary")
    has_descr = any(s == Segment.DESCR for s in tokens.segments)
    if not has_descr:
        log.debug(
            "instance %d has no description segment; applying code loss only",
            instance_index,
        )
        return prepare_code_clm(tokens)
    if spec.kind == "docstr_mlm":
        return prepare_docstr_mlm(tokens, spec, vocab, instance_index, epoch)
    return prepare_docstr_mclm(tokens, spec, vocab, instance_index, epoch)


def prepare_batch(
    batch: Sequence[tuple[int, TokenSequence]],
    spec: ObjectiveSpec,
    vocab: Vocabulary | None,
    epoch: int = 0,
) -> list[PreparedInstance]:
    """Prepare (corpus_index, tokens) pairs; skips too-short instances."""
    prepared: list[PreparedInstance] = []
    for index, tokens in batch:
        if len(tokens) < 2:
            log.debug("skipping length-%d instance %d", len(tokens), index)
            continue
        prepared.append(prepare(tokens, spec, vocab, index, epoch))
    return prepared
