"""Decoder-only transformer with a query-layer prediction head.

The trunk is a stack of pre-normalization attention/feed-forward blocks
over learned token and position embeddings.  Logits for slot t come from a
final attention step where the query is the position embedding of t+1, the
keys and values are the normalized top-layer states at positions <= t, and
the attended result is projected to the vocabulary.  Slot t therefore sees
inputs up to t and conventionally predicts the token at t+1; masked
objectives may instead read a prediction for position t from slot t.

Everything is plain numpy with a hand-written backward pass, so gradients
are exact, runs are bit-reproducible, and checkpoints reload identically.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .objectives import ROLE_CODE, ROLE_DOCSTR, PreparedInstance, target_role

_LN_EPS = 1e-5
_CKPT_MAGIC = b"MCCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    n_cntx: int
    n_vocab: int
    activation: str = "gelu"
    norm_scheme: str = "pre"
    position_scheme: str = "learned"
    init_scale: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "n_vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_cntx < 2:
            raise ValueError("n_cntx must be at least 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation: {self.activation!r}")
        if self.norm_scheme != "pre":
            raise ValueError("only pre-normalization is implemented")
        if self.position_scheme != "learned":
            raise ValueError("only learned position embeddings are implemented")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ForwardResult:
    logits: np.ndarray
    top_states: np.ndarray
    cache: dict


@dataclass
class LossMetrics:
    """Joint loss, its two components, and causal per-segment monitors.

    The monitors are plain next-token cross entropies split by the target's
    segment, computed from the same forward pass whatever the objective;
    they match the true causal losses exactly whenever the input was not
    corrupted.  Undefined entries are NaN.
    """

    loss: float
    docstr_loss: float
    code_loss: float
    docstr_clm: float
    code_clm: float


def init_parameters(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Small-scale normal init so the initial loss is near log(n_vocab)."""
    rng = np.random.default_rng(cfg.seed)

    def normal(*shape):
        return (rng.standard_normal(shape) * cfg.init_scale).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    params: dict[str, np.ndarray] = {}
    params["tok_emb"] = normal(cfg.n_vocab, cfg.d_model)
    params["pos_emb"] = normal(cfg.n_cntx + 1, cfg.d_model)
    for i in range(cfg.n_layers):
        prefix = f"blocks.{i}."
        params[prefix + "ln1.g"] = ones(cfg.d_model)
        params[prefix + "ln1.b"] = zeros(cfg.d_model)
        params[prefix + "attn.wq"] = normal(cfg.d_model, cfg.d_model)
        params[prefix + "attn.bq"] = zeros(cfg.d_model)
        params[prefix + "attn.wk"] = normal(cfg.d_model, cfg.d_model)
        params[prefix + "attn.bk"] = zeros(cfg.d_model)
        params[prefix + "attn.wv"] = normal(cfg.d_model, cfg.d_model)
        params[prefix + "attn.bv"] = zeros(cfg.d_model)
        params[prefix + "attn.wo"] = normal(cfg.d_model, cfg.d_model)
        params[prefix + "attn.bo"] = zeros(cfg.d_model)
        params[prefix + "ln2.g"] = ones(cfg.d_model)
        params[prefix + "ln2.b"] = zeros(cfg.d_model)
        params[prefix + "ffn.w1"] = normal(cfg.d_model, cfg.d_ff)
        params[prefix + "ffn.b1"] = zeros(cfg.d_ff)
        params[prefix + "ffn.w2"] = normal(cfg.d_ff, cfg.d_model)
        params[prefix + "ffn.b2"] = zeros(cfg.d_model)
    params["ln_f.g"] = ones(cfg.d_model)
    params["ln_f.b"] = zeros(cfg.d_model)
    params["query.wq"] = normal(cfg.d_model, cfg.d_model)
    params["query.wk"] = normal(cfg.d_model, cfg.d_model)
    params["query.wv"] = normal(cfg.d_model, cfg.d_model)
    params["query.wo"] = normal(cfg.d_model, cfg.d_model)
    params["out.w"] = normal(cfg.d_model, cfg.n_vocab)
    return params


def count_parameters(params: dict[str, np.ndarray]) -> int:
    return sum(int(v.size) for v in params.values())


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(_LN_EPS, dtype=x.dtype))
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _act_forward(u, kind):
    if kind == "relu":
        return np.maximum(u, 0)
    inner = _GELU_C * (u + 0.044715 * u**3)
    return 0.5 * u * (1.0 + np.tanh(inner))


def _act_grad(u, kind):
    if kind == "relu":
        return (u > 0).astype(u.dtype)
    inner = _GELU_C * (u + 0.044715 * u**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (
        1.0 + 3 * 0.044715 * u**2
    )


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _masked_softmax(scores, mask):
    scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attend(q, k, v, mask, scale):
    scores = (q @ k.transpose(0, 2, 1)) * scale
    probs = _masked_softmax(scores, mask)
    return probs @ v, probs


def _attend_backward(dctx, q, k, v, probs, scale):
    dprobs = dctx @ v.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores = dscores * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    return dq, dk, dv


def forward(params: dict[str, np.ndarray], cfg: ModelConfig, ids: Sequence[int]) -> ForwardResult:
    """Run the model over a token sequence; returns logits for every slot."""
    ids = np.asarray(ids, dtype=np.int64)
    t = len(ids)
    if not 1 <= t <= cfg.n_cntx:
        raise ValueError(f"sequence length {t} outside [1, {cfg.n_cntx}]")
    if ids.min() < 0 or ids.max() >= cfg.n_vocab:
        raise ValueError("token id outside the vocabulary")
    scale = 1.0 / math.sqrt(cfg.d_head)
    mask = np.tril(np.ones((t, t), dtype=bool))

    h = params["tok_emb"][ids] + params["pos_emb"][:t]
    cache: dict = {"ids": ids, "t": t, "blocks": []}
    for i in range(cfg.n_layers):
        prefix = f"blocks.{i}."
        block: dict = {"h_in": h}
        a, block["ln1"] = _ln_forward(h, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
        block["a"] = a
        q = _split_heads(a @ params[prefix + "attn.wq"] + params[prefix + "attn.bq"], cfg.n_heads)
        k = _split_heads(a @ params[prefix + "attn.wk"] + params[prefix + "attn.bk"], cfg.n_heads)
        v = _split_heads(a @ params[prefix + "attn.wv"] + params[prefix + "attn.bv"], cfg.n_heads)
        ctx, probs = _attend(q, k, v, mask, scale)
        block.update(q=q, k=k, v=v, probs=probs)
        merged = _merge_heads(ctx)
        block["merged"] = merged
        h = h + (merged @ params[prefix + "attn.wo"] + params[prefix + "attn.bo"])
        block["h_mid"] = h
        m, block["ln2"] = _ln_forward(h, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
        block["m"] = m
        u = m @ params[prefix + "ffn.w1"] + params[prefix + "ffn.b1"]
        act = _act_forward(u, cfg.activation)
        block.update(u=u, act=act)
        h = h + (act @ params[prefix + "ffn.w2"] + params[prefix + "ffn.b2"])
        cache["blocks"].append(block)

    top_states, cache["ln_f"] = _ln_forward(h, params["ln_f.g"], params["ln_f.b"])
    cache["h_top_in"] = h
    cache["top_states"] = top_states

    queries = params["pos_emb"][1 : t + 1]
    q2 = _split_heads(queries @ params["query.wq"], cfg.n_heads)
    k2 = _split_heads(top_states @ params["query.wk"], cfg.n_heads)
    v2 = _split_heads(top_states @ params["query.wv"], cfg.n_heads)
    ctx2, probs2 = _attend(q2, k2, v2, mask, scale)
    merged2 = _merge_heads(ctx2)
    ql = merged2 @ params["query.wo"]
    logits = ql @ params["out.w"]
    cache.update(queries=queries, q2=q2, k2=k2, v2=v2, probs2=probs2, merged2=merged2, ql=ql)
    return ForwardResult(logits=logits, top_states=top_states, cache=cache)


def backward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    cache: dict,
    dlogits: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for one sequence into ``grads``."""
    t = cache["t"]
    scale = 1.0 / math.sqrt(cfg.d_head)

    dql = dlogits @ params["out.w"].T
    grads["out.w"] += cache["ql"].T @ dlogits
    dmerged2 = dql @ params["query.wo"].T
    grads["query.wo"] += cache["merged2"].T @ dql
    dctx2 = _split_heads(dmerged2, cfg.n_heads)
    dq2, dk2, dv2 = _attend_backward(
        dctx2, cache["q2"], cache["k2"], cache["v2"], cache["probs2"], scale
    )
    dqueries = _merge_heads(dq2) @ params["query.wq"].T
    grads["query.wq"] += cache["queries"].T @ _merge_heads(dq2)
    dtop = _merge_heads(dk2) @ params["query.wk"].T + _merge_heads(dv2) @ params["query.wv"].T
    grads["query.wk"] += cache["top_states"].T @ _merge_heads(dk2)
    grads["query.wv"] += cache["top_states"].T @ _merge_heads(dv2)
    grads["pos_emb"][1 : t + 1] += dqueries

    dh, dg, db = _ln_backward(dtop, cache["ln_f"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(cfg.n_layers)):
        prefix = f"blocks.{i}."
        block = cache["blocks"][i]
        # Feed-forward branch.
        dffn_out = dh
        grads[prefix + "ffn.w2"] += block["act"].T @ dffn_out
        grads[prefix + "ffn.b2"] += dffn_out.sum(axis=0)
        dact = dffn_out @ params[prefix + "ffn.w2"].T
        du = dact * _act_grad(block["u"], cfg.activation)
        grads[prefix + "ffn.w1"] += block["m"].T @ du
        grads[prefix + "ffn.b1"] += du.sum(axis=0)
        dm = du @ params[prefix + "ffn.w1"].T
        dh_mid_ln, dg, db = _ln_backward(dm, block["ln2"])
        grads[prefix + "ln2.g"] += dg
        grads[prefix + "ln2.b"] += db
        dh_mid = dh + dh_mid_ln
        # Attention branch.
        dattn_out = dh_mid
        grads[prefix + "attn.wo"] += block["merged"].T @ dattn_out
        grads[prefix + "attn.bo"] += dattn_out.sum(axis=0)
        dmerged = dattn_out @ params[prefix + "attn.wo"].T
        dctx = _split_heads(dmerged, cfg.n_heads)
        dq, dk, dv = _attend_backward(
            dctx, block["q"], block["k"], block["v"], block["probs"], scale
        )
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        grads[prefix + "attn.wq"] += block["a"].T @ dq
        grads[prefix + "attn.bq"] += dq.sum(axis=0)
        grads[prefix + "attn.wk"] += block["a"].T @ dk
        grads[prefix + "attn.bk"] += dk.sum(axis=0)
        grads[prefix + "attn.wv"] += block["a"].T @ dv
        grads[prefix + "attn.bv"] += dv.sum(axis=0)
        da = (
            dq @ params[prefix + "attn.wq"].T
            + dk @ params[prefix + "attn.wk"].T
            + dv @ params[prefix + "attn.wv"].T
        )
        dh_in_ln, dg, db = _ln_backward(da, block["ln1"])
        grads[prefix + "ln1.g"] += dg
        grads[prefix + "ln1.b"] += db
        dh = dh_mid + dh_in_ln

    np.add.at(grads["tok_emb"], cache["ids"], dh)
    grads["pos_emb"][:t] += dh


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def instance_loss(
    logits: np.ndarray, prep: PreparedInstance, want_dlogits: bool = True
) -> tuple[dict, np.ndarray | None]:
    """Per-instance loss sums, causal monitors, and the logits gradient."""
    n = len(prep)
    logsm = _log_softmax(logits)
    ce_next = np.zeros(n, dtype=logits.dtype)
    if n > 1:
        rows = np.arange(n - 1)
        ce_next[:-1] = -logsm[rows, prep.orig_ids[1:]]
    ce_same = -logsm[np.arange(n), prep.orig_ids]

    next_docstr = prep.next_roles == ROLE_DOCSTR
    next_code = prep.next_roles == ROLE_CODE
    docstr_sum = float(
        np.dot(prep.next_weights[next_docstr], ce_next[next_docstr])
    ) + float(np.dot(prep.same_weights, ce_same))
    code_sum = float(np.dot(prep.next_weights[next_code], ce_next[next_code]))

    mon_roles = np.zeros(n, dtype=np.int8)
    for t in range(n - 1):
        mon_roles[t] = target_role(int(prep.orig_ids[t + 1]), int(prep.segments[t + 1]))
    mon_docstr = mon_roles == ROLE_DOCSTR
    mon_code = mon_roles == ROLE_CODE
    sums = {
        "joint": docstr_sum + code_sum,
        "docstr": docstr_sum,
        "code": code_sum,
        "has_docstr": bool(next_docstr.any() or (prep.same_weights > 0).any()),
        "has_code": bool(next_code.any()),
        "mon_docstr_sum": float(ce_next[mon_docstr].sum()),
        "mon_docstr_count": int(mon_docstr.sum()),
        "mon_code_sum": float(ce_next[mon_code].sum()),
        "mon_code_count": int(mon_code.sum()),
    }
    if not want_dlogits:
        return sums, None

    probs = np.exp(logsm)
    dlogits = np.zeros_like(logits)
    active_next = np.flatnonzero(prep.next_weights > 0)
    if active_next.size:
        w = prep.next_weights[active_next].astype(logits.dtype)
        dlogits[active_next] += w[:, None] * probs[active_next]
        dlogits[active_next, prep.next_targets[active_next]] -= w
    active_same = np.flatnonzero(prep.same_weights > 0)
    if active_same.size:
        w = prep.same_weights[active_same].astype(logits.dtype)
        dlogits[active_same] += w[:, None] * probs[active_same]
        dlogits[active_same, prep.same_targets[active_same]] -= w
    return sums, dlogits


def loss_and_gradients(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    batch: Sequence[PreparedInstance],
    want_grads: bool = True,
) -> tuple[LossMetrics, dict[str, np.ndarray] | None]:
    """Batch-mean joint loss, per-component metrics, and exact gradients."""
    if not batch:
        raise ValueError("empty batch")
    grads = zeros_like_params(params) if want_grads else None
    inv_b = 1.0 / len(batch)
    joint = docstr = code = 0.0
    n_docstr = n_code = 0
    mon = {"ds": 0.0, "dn": 0, "cs": 0.0, "cn": 0}
    for prep in batch:
        result = forward(params, cfg, prep.input_ids)
        sums, dlogits = instance_loss(result.logits, prep, want_dlogits=want_grads)
        joint += sums["joint"]
        if sums["has_docstr"]:
            docstr += sums["docstr"]
            n_docstr += 1
        if sums["has_code"]:
            code += sums["code"]
            n_code += 1
        mon["ds"] += sums["mon_docstr_sum"]
        mon["dn"] += sums["mon_docstr_count"]
        mon["cs"] += sums["mon_code_sum"]
        mon["cn"] += sums["mon_code_count"]
        if want_grads:
            backward(params, cfg, result.cache, dlogits * dlogits.dtype.type(inv_b), grads)
    metrics = LossMetrics(
        loss=joint * inv_b,
        docstr_loss=docstr / n_docstr if n_docstr else float("nan"),
        code_loss=code / n_code if n_code else float("nan"),
        docstr_clm=mon["ds"] / mon["dn"] if mon["dn"] else float("nan"),
        code_clm=mon["cs"] / mon["cn"] if mon["cn"] else float("nan"),
    )
    return metrics, grads


def save_checkpoint(params: dict[str, np.ndarray], cfg: ModelConfig, path: str) -> None:
    """Binary checkpoint: JSON header plus raw little-endian tensors."""
    dtype = next(iter(params.values())).dtype
    header = {
        "version": _CKPT_VERSION,
        "config": asdict(cfg),
        "dtype": str(dtype),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    wire = "<f8" if dtype == np.float64 else "<f4"
    with open(path, "wb") as handle:
        handle.write(_CKPT_MAGIC)
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        for value in params.values():
            handle.write(np.ascontiguousarray(value).astype(wire).tobytes())


def load_checkpoint(
    path: str, expect: ModelConfig | None = None
) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Reload a checkpoint bit-identically; optionally check the config."""
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (blob_len,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + blob_len].decode("utf-8"))
    if header["version"] != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    cfg = ModelConfig(**header["config"])
    if expect is not None:
        for name, want in asdict(expect).items():
            got = getattr(cfg, name)
            if got != want:
                raise ValueError(
                    f"checkpoint config mismatch: {name} is {got}, expected {want}"
                )
    dtype = np.float64 if header["dtype"] == "float64" else np.float32
    wire = "<f8" if dtype == np.float64 else "<f4"
    itemsize = 8 if dtype == np.float64 else 4
    params: dict[str, np.ndarray] = {}
    offset = 8 + blob_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=wire, count=count, offset=offset)
        params[entry["name"]] = arr.astype(dtype).reshape(shape).copy()
        offset += count * itemsize
    if offset != len(data):
        raise ValueError("checkpoint size does not match its header")
    return params, cfg
