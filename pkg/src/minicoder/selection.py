"""Finetuning-example selection by proximity to a target task distribution.

Every example and every target prompt is embedded as a fixed-size vector;
examples are then ranked by mean squared distance to the centroid of the
target vectors, closest first.  Selected subsets are prefixes of that
ranking, so a larger selection always contains every smaller one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SelectionResult:
    order: tuple[int, ...]
    distances: tuple[float, ...]

    def top(self, k: int) -> tuple[int, ...]:
        """The k examples closest to the target centroid."""
        if not 0 <= k <= len(self.order):
            raise ValueError(f"k must be in [0, {len(self.order)}]")
        return self.order[:k]


def centroid(vectors: np.ndarray) -> np.ndarray:
    """Mean of the target embedding vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) array of vectors")
    return vectors.mean(axis=0)


def mse_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vectors must have identical shapes")
    return float(np.mean((a - b) ** 2))


def rank_by_centroid_distance(
    pool_vectors: np.ndarray, target_vectors: np.ndarray
) -> SelectionResult:
    """Rank pool examples by ascending distance to the target centroid.

    Ties in distance resolve toward the lower example index, which makes
    the ranking deterministic.
    """
    pool = np.asarray(pool_vectors, dtype=np.float64)
    if pool.ndim != 2:
        raise ValueError("pool vectors must form an (n, d) array")
    center = centroid(target_vectors)
    if center.shape[0] != pool.shape[1]:
        raise ValueError("pool and target vectors live in different spaces")
    distances = np.mean((pool - center) ** 2, axis=1)
    order = np.lexsort((np.arange(pool.shape[0]), distances))
    return SelectionResult(
        order=tuple(int(i) for i in order),
        distances=tuple(float(distances[i]) for i in order),
    )


def nested_subsets(
    result: SelectionResult, sizes: Sequence[int]
) -> dict[int, tuple[int, ...]]:
    """Prefix subsets for each requested size, smallest to largest."""
    out: dict[int, tuple[int, ...]] = {}
    for size in sorted(set(sizes)):
        out[size] = result.top(size)
    return out


def mean_token_embedding(ids: Sequence[int], tok_emb: np.ndarray) -> np.ndarray:
    """Average of the model's input-embedding rows for a token sequence."""
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot embed an empty token sequence")
    if idx.min() < 0 or idx.max() >= tok_emb.shape[0]:
        raise ValueError("token id outside the embedding table")
    return tok_emb[idx].astype(np.float64).mean(axis=0)


def tfidf_embeddings(documents: Sequence[Sequence[int]], n_features: int) -> np.ndarray:
    """Bag-of-token tf-idf vectors, L2-normalized, one row per document.

    Term frequency is the within-document token share; inverse document
    frequency is the smoothed log((1 + N) / (1 + df)) + 1.  Pool and target
    documents must be vectorized together so they share the idf statistics.
    """
    docs = [np.asarray(list(doc), dtype=np.int64) for doc in documents]
    if not docs:
        raise ValueError("need at least one document")
    for doc in docs:
        if doc.size == 0:
            raise ValueError("cannot vectorize an empty document")
        if doc.min() < 0 or doc.max() >= n_features:
            raise ValueError("token id outside the feature space")
    counts = np.zeros((len(docs), n_features), dtype=np.float64)
    for row, doc in enumerate(docs):
        np.add.at(counts[row], doc, 1.0)
    tf = counts / counts.sum(axis=1, keepdims=True)
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + len(docs)) / (1.0 + df)) + 1.0
    vectors = tf * idf
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / norms


def embed_sequences(
    sequences: Sequence[Sequence[int]],
    method: str = "model",
    tok_emb: np.ndarray | None = None,
    n_features: int | None = None,
) -> np.ndarray:
    """Vectorize token sequences with the chosen embedding function.

    ``model`` averages input-embedding rows (requires ``tok_emb``);
    ``tfidf`` builds bag-of-token vectors (requires ``n_features``).
    """
    if method == "model":
        if tok_emb is None:
            raise ValueError("model embeddings need the embedding table")
        return np.stack([mean_token_embedding(seq, tok_emb) for seq in sequences])
    if method == "tfidf":
        if n_features is None:
            raise ValueError("tfidf embeddings need the feature-space size")
        return tfidf_embeddings(sequences, n_features)
    raise ValueError(f"unknown embedding method: {method}")


def select_examples(
    pool_ids: Sequence[Sequence[int]],
    target_ids: Sequence[Sequence[int]],
    method: str = "model",
    tok_emb: np.ndarray | None = None,
    n_features: int | None = None,
) -> SelectionResult:
    """Rank pool token sequences against target prompts, closest first."""
    if method == "tfidf":
        combined = list(pool_ids) + list(target_ids)
        vectors = embed_sequences(combined, "tfidf", n_features=n_features)
        pool_vectors = vectors[: len(pool_ids)]
        target_vectors = vectors[len(pool_ids) :]
    else:
        pool_vectors = embed_sequences(pool_ids, method, tok_emb=tok_emb)
        target_vectors = embed_sequences(target_ids, method, tok_emb=tok_emb)
    return rank_by_centroid_distance(pool_vectors, target_vectors)
