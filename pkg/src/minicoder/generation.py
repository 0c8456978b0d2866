"""Prompt assembly and decoding.

A prompt renders a problem as ``<descr> docstring <python>`` followed by the
function signature, mirroring the layout the model was trained on; the model
then continues with an indented body until it emits the end-of-code marker.
Decoding is greedy or temperature/nucleus sampling, with deterministic
tie-breaking so runs are reproducible bit for bit.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np

from .corpus import signature_text
from .evaluation import partition_docstring
from .model import ModelConfig, forward
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

STRATEGIES = ("greedy", "sample")

STOP_EOC = "eoc"
STOP_LENGTH = "length"
STOP_CONTEXT = "context"


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


# Two stock settings: a low-temperature narrow nucleus that concentrates on
# the model's best guess, and a wide one for drawing diverse candidate sets.
PRESETS = {
    "focused": DecodeConfig(strategy="sample", temperature=0.2, top_p=0.4),
    "diverse": DecodeConfig(strategy="sample", temperature=0.95, top_p=0.8),
}


@dataclass(frozen=True)
class Prompt:
    docstring: str
    signature: str
    text: str
    tokens: TokenSequence


def normalize_whitespace(text: str) -> str:
    """Collapse whitespace runs (including line breaks) to single spaces."""
    return " ".join(text.split())


def strip_embedded_tests(docstring: str) -> str:
    """Docstring with doctest and equation-style example lines removed."""
    prose, _ = partition_docstring(docstring)
    return "\n".join(prose)


def strip_type_hints(signature: str) -> str:
    """Signature with argument annotations and the return type removed."""
    tree = ast.parse(signature + "\n    pass")
    node = tree.body[0]
    if not isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
        raise ValueError("not a function signature")
    node.returns = None
    for arg in (
        node.args.posonlyargs
        + node.args.args
        + node.args.kwonlyargs
        + [a for a in (node.args.vararg, node.args.kwarg) if a is not None]
    ):
        arg.annotation = None
    return signature_text(node)


def build_prompt(
    docstring: str,
    signature: str,
    vocab: Vocabulary,
    strip_tests: bool = False,
    strip_types: bool = False,
) -> Prompt:
    """Assemble the generation prompt for one problem.

    The docstring is whitespace-normalized (after optional removal of
    embedded tests) and the signature optionally loses its type hints.  The
    rendered form is ``<descr> {docstring} <python>`` with the signature on
    its own line, and the token sequence tags the description and code parts
    with their segments.
    """
    if strip_tests:
        docstring = strip_embedded_tests(docstring)
    docstring = normalize_whitespace(docstring)
    signature = signature.strip()
    if strip_types:
        signature = strip_type_hints(signature)
    text = f"<descr> {docstring} <python>\n{signature}\n"
    tokens = TokenSequence()
    tokens.append_special(DESCR_ID)
    tokens.extend(encode(docstring, Segment.DESCR, vocab))
    tokens.append_special(PYTHON_ID)
    tokens.extend(encode("\n" + signature + "\n", Segment.CODE, vocab))
    return Prompt(docstring=docstring, signature=signature, text=text, tokens=tokens)


def sampling_distribution(
    logits: np.ndarray, cfg: DecodeConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Nucleus support and renormalized probabilities for one step.

    Temperature rescales the logits first; the support is then the smallest
    probability-sorted prefix whose mass reaches top_p, with ties in
    probability broken toward lower token ids.
    """
    z = logits.astype(np.float64) / cfg.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.lexsort((np.arange(p.shape[0]), -p))
    cumulative = np.cumsum(p[order])
    cut = int(np.searchsorted(cumulative, cfg.top_p)) + 1
    support = order[: min(cut, p.shape[0])]
    kept = p[support]
    kept /= kept.sum()
    return support, kept


def next_token_distribution(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    ids: np.ndarray,
    decode_cfg: DecodeConfig | None = None,
) -> np.ndarray:
    """Distribution over the next token after the given prefix.

    With no decode config this is the raw softmax of the final-slot logits;
    with one, temperature and nucleus truncation are applied and the result
    is the actual sampling distribution (zero outside the support).
    """
    logits = forward(params, cfg, ids).logits[-1]
    if decode_cfg is None:
        z = logits.astype(np.float64) - logits.max()
        p = np.exp(z)
        return p / p.sum()
    support, kept = sampling_distribution(logits, decode_cfg)
    dist = np.zeros(logits.shape[0], dtype=np.float64)
    dist[support] = kept
    return dist


def _sample_step(
    logits: np.ndarray, cfg: DecodeConfig, rng: np.random.Generator, trace=None
) -> int:
    if cfg.strategy == "greedy":
        token = int(np.argmax(logits))
        if trace is not None:
            trace(
                {"support": np.array([token]), "probs": np.array([1.0]), "chosen": token}
            )
        return token
    support, kept = sampling_distribution(logits, cfg)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(kept), u, side="right"))
    token = int(support[min(idx, support.shape[0] - 1)])
    if trace is not None:
        trace({"support": support, "probs": kept, "chosen": token})
    return token


@dataclass
class GenerationResult:
    completion: str
    new_ids: list[int]
    stop_reason: str

    @property
    def stopped_at_eoc(self) -> bool:
        return self.stop_reason == STOP_EOC


def generate(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    vocab: Vocabulary,
    prompt: Prompt,
    decode_cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
    trace=None,
) -> GenerationResult:
    """Continue a prompt until end-of-code, the token budget, or the context.

    Returns the decoded continuation only (markers are never rendered), the
    raw new token ids including any end-of-code marker, and why decoding
    stopped.  ``trace``, when given, is called once per step with the
    sampling support, its probabilities, and the chosen token.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([decode_cfg.seed]))
    ids = list(prompt.tokens.ids)
    if len(ids) >= model_cfg.n_cntx:
        return GenerationResult(completion="", new_ids=[], stop_reason=STOP_CONTEXT)
    new_ids: list[int] = []
    stop_reason = STOP_LENGTH
    while len(new_ids) < decode_cfg.max_new_tokens:
        logits = forward(params, model_cfg, np.asarray(ids, dtype=np.int64)).logits[-1]
        token = _sample_step(logits, decode_cfg, rng, trace=trace)
        ids.append(token)
        new_ids.append(token)
        if token == EOC_ID:
            stop_reason = STOP_EOC
            break
        if len(ids) >= model_cfg.n_cntx:
            stop_reason = STOP_CONTEXT
            break
    completion = decode(np.asarray(new_ids, dtype=np.int64), vocab)
    return GenerationResult(completion=completion, new_ids=new_ids, stop_reason=stop_reason)
