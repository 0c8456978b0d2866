"""Training loop: warmup-decay schedule, adaptive moments, staged runs.

Stage 1 trains on fixed-length chunks with the plain causal loss; stage 2
starts from a stage-1 checkpoint with fresh optimizer moments and applies a
code-focused objective to docstring-code pairs.  Shuffling and corruption
draws are keyed by (seed, epoch, instance index), so resuming from a saved
step reproduces the remaining log exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import TrainingInstance
from .model import ModelConfig, forward, instance_loss, loss_and_gradients, save_checkpoint
from .objectives import ObjectiveSpec, prepare_batch, prepare_clm
from .tokenizer import Vocabulary

STAGES = ("stage1", "stage2", "finetune")

_STATE_MAGIC = b"MCTS"

TRAIN_LOG_COLUMNS = ("step", "lr", "loss", "docstr_clm", "code_clm", "grad_norm")
VAL_LOG_COLUMNS = ("step", "loss", "docstr_clm", "code_clm")


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    stage: str = "stage2"
    batch_size: int = 8
    max_steps: int = 10000
    epochs: int | None = None
    lr_max: float = 1e-5
    lr_min: float = 5e-6
    schedule: str = "cosine"
    warmup_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = None
    val_fraction: float = 0.02
    eval_interval: int = 0
    log_interval: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage: {self.stage!r}")
        if self.schedule not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule: {self.schedule!r}")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ValueError("need lr_max >= lr_min >= 0 and lr_max > 0")

    @property
    def resolved_clip_norm(self) -> float:
        if self.clip_norm is not None:
            return self.clip_norm
        return 3.0 if self.stage == "stage1" else 1.0


def lr_at(step: int, cfg: TrainConfig, max_steps: int | None = None) -> float:
    """Learning rate for a 0-based step: linear warmup then smooth decay."""
    total = cfg.max_steps if max_steps is None else max_steps
    warmup = int(cfg.warmup_fraction * total)
    if step < warmup:
        return cfg.lr_max * (step + 1) / warmup
    if step >= total:
        return cfg.lr_min
    span = max(1, total - warmup)
    progress = (step - warmup) / span
    if cfg.schedule == "linear":
        return cfg.lr_max + (cfg.lr_min - cfg.lr_max) * progress
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale gradients to the given global norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    lr: float,
) -> None:
    """One adaptive-moment update with decoupled weight decay, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= m.dtype.type(cfg.beta1)
        m += g * g.dtype.type(1.0 - cfg.beta1)
        v *= v.dtype.type(cfg.beta2)
        v += (g * g) * g.dtype.type(1.0 - cfg.beta2)
        m_hat = m * m.dtype.type(1.0 / bc1)
        v_hat = v * v.dtype.type(1.0 / bc2)
        update = m_hat / (np.sqrt(v_hat) + p.dtype.type(cfg.eps))
        if cfg.weight_decay:
            update = update + p * p.dtype.type(cfg.weight_decay)
        p -= update * p.dtype.type(lr)


def instance_hash(tokens) -> int:
    digest = hashlib.md5(np.asarray(tokens.ids, dtype="<u4").tobytes()).digest()
    return int.from_bytes(digest, "big")


def split_validation(
    instances: Sequence[TrainingInstance], fraction: float
) -> tuple[list[int], list[int]]:
    """Content-hash holdout: returns (train indices, validation indices)."""
    threshold = int(fraction * 2**128)
    train: list[int] = []
    val: list[int] = []
    for i, inst in enumerate(instances):
        (val if instance_hash(inst.tokens) < threshold else train).append(i)
    return train, val


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    val_rows: list[tuple] = field(default_factory=list)

    @staticmethod
    def _format(value) -> str:
        return repr(value) if isinstance(value, float) else str(value)

    def write(self, out_dir: str) -> None:
        with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as f:
            f.write(",".join(TRAIN_LOG_COLUMNS) + "\n")
            for row in self.rows:
                f.write(",".join(self._format(v) for v in row) + "\n")
        with open(os.path.join(out_dir, "val_log.csv"), "w", encoding="utf-8") as f:
            f.write(",".join(VAL_LOG_COLUMNS) + "\n")
            for row in self.val_rows:
                f.write(",".join(self._format(v) for v in row) + "\n")


def save_train_state(state: AdamState, path: str) -> None:
    names = list(state.m)
    header = {
        "step": state.step,
        "tensors": [{"name": k, "shape": list(state.m[k].shape)} for k in names],
        "dtype": str(next(iter(state.m.values())).dtype) if names else "float32",
    }
    blob = json.dumps(header).encode("utf-8")
    wire = "<f8" if header["dtype"] == "float64" else "<f4"
    with open(path, "wb") as handle:
        handle.write(_STATE_MAGIC)
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        for group in (state.m, state.v):
            for name in names:
                handle.write(np.ascontiguousarray(group[name]).astype(wire).tobytes())


def load_train_state(path: str) -> AdamState:
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:4] != _STATE_MAGIC:
        raise ValueError(f"not a training-state file: {path}")
    (blob_len,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + blob_len].decode("utf-8"))
    dtype = np.float64 if header["dtype"] == "float64" else np.float32
    wire = "<f8" if dtype == np.float64 else "<f4"
    itemsize = 8 if dtype == np.float64 else 4
    offset = 8 + blob_len
    groups = []
    for _ in range(2):
        group: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype=wire, count=count, offset=offset)
            group[entry["name"]] = arr.astype(dtype).reshape(shape).copy()
            offset += count * itemsize
        groups.append(group)
    return AdamState(m=groups[0], v=groups[1], step=header["step"])


def _validation_metrics(params, model_cfg, instances, indices):
    """Clean causal loss on held-out instances, split by target segment."""
    total = 0.0
    count = 0
    mon = {"ds": 0.0, "dn": 0, "cs": 0.0, "cn": 0}
    for i in indices:
        tokens = instances[i].tokens
        if len(tokens) < 2:
            continue
        prep = prepare_clm(tokens)
        result = forward(params, model_cfg, prep.input_ids)
        sums, _ = instance_loss(result.logits, prep, want_dlogits=False)
        total += sums["joint"]
        count += 1
        mon["ds"] += sums["mon_docstr_sum"]
        mon["dn"] += sums["mon_docstr_count"]
        mon["cs"] += sums["mon_code_sum"]
        mon["cn"] += sums["mon_code_count"]
    return (
        total / count if count else float("nan"),
        mon["ds"] / mon["dn"] if mon["dn"] else float("nan"),
        mon["cs"] / mon["cn"] if mon["cn"] else float("nan"),
    )


def run_training(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    instances: Sequence[TrainingInstance],
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
    out_dir: str | None = None,
    state: AdamState | None = None,
    stop_step: int | None = None,
) -> tuple[dict[str, np.ndarray], TrainLog]:
    """Optimize ``params`` in place; returns them with the run's log.

    Passing a saved optimizer ``state`` resumes at its step and reproduces
    the log entries the uninterrupted run would have written from there.
    ``stop_step`` interrupts the run early without shortening the schedule
    horizon, so a later resume continues seamlessly.
    """
    train_idx, val_idx = split_validation(instances, cfg.val_fraction)
    if not train_idx:
        raise ValueError("no training instances after the validation split")
    batches_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    if cfg.epochs is not None:
        max_steps = batches_per_epoch * cfg.epochs
    else:
        max_steps = cfg.max_steps
    last_step = max_steps if stop_step is None else min(stop_step, max_steps)
    if state is None:
        state = AdamState.fresh(params)
    log = TrainLog()
    step = state.step
    while step < last_step:
        epoch = step // batches_per_epoch
        order = _epoch_order(cfg.seed, epoch, len(train_idx))
        start_batch = step % batches_per_epoch
        for b in range(start_batch, batches_per_epoch):
            if step >= last_step:
                break
            chosen = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = prepare_batch(
                [(train_idx[j], instances[train_idx[j]].tokens) for j in chosen],
                cfg.objective,
                vocab,
                epoch=epoch,
            )
            if not batch:
                raise ValueError("every instance in the batch was unusable")
            lr = lr_at(step, cfg, max_steps)
            metrics, grads = loss_and_gradients(params, model_cfg, batch)
            norm = clip_gradients(grads, cfg.resolved_clip_norm)
            adam_step(params, grads, state, cfg, lr)
            step = state.step
            if step % cfg.log_interval == 0 or step == max_steps:
                log.rows.append(
                    (step, lr, metrics.loss, metrics.docstr_clm, metrics.code_clm, norm)
                )
            if cfg.eval_interval and val_idx and step % cfg.eval_interval == 0:
                vloss, vdoc, vcode = _validation_metrics(
                    params, model_cfg, instances, val_idx
                )
                log.val_rows.append((step, vloss, vdoc, vcode))
        else:
            continue
        break
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(params, model_cfg, os.path.join(out_dir, "model.ckpt"))
        save_train_state(state, os.path.join(out_dir, "train_state.bin"))
        log.write(out_dir)
    return params, log
