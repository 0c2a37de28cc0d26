"""Word vectors used to order codebooks by similarity to a query word."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    vectors: np.ndarray
    tokens: tuple[str, ...]
    coverage: float = 1.0

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.tokens):
            raise EmbeddingError("need one row per token")
        if not np.all(np.isfinite(self.vectors)):
            raise EmbeddingError("embedding contains NaN or Inf")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, token: str) -> np.ndarray:
        return self.vectors[self.tokens.index(token)]


@dataclass(frozen=True)
class SimilarityRanking:
    query_token: int
    scores: np.ndarray
    order: np.ndarray


def _parse(path) -> dict[str, np.ndarray]:
    rows: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # word2vec "<count> <dim>" header
            if len(parts) < 2:
                raise EmbeddingError(f"{path}:{lineno}: malformed line (no vector)")
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise EmbeddingError(f"{path}:{lineno}: malformed number ({exc})") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise EmbeddingError(f"{path}:{lineno}: expected {dim} values, found {len(vec)}")
            rows[parts[0]] = vec
    if dim is None:
        raise EmbeddingError(f"{path}: no vectors")
    return rows


def load_embeddings(path, tokens: Sequence[str], seed: int = 0) -> EmbeddingMatrix:
    """Rows for every vocabulary token; missing ones get seeded random vectors.

    Fallback rows are Gaussian, rescaled to the mean norm of the rows found.
    """
    found = _parse(path)
    dim = len(next(iter(found.values())))
    rng = np.random.default_rng(seed)
    out = np.zeros((len(tokens), dim))
    present = np.array([t in found for t in tokens])
    for i, tok in enumerate(tokens):
        if present[i]:
            out[i] = found[tok]
    norms = np.linalg.norm(out[present], axis=1)
    scale = float(norms.mean()) if present.any() and norms.mean() > 0 else 1.0
    for i in np.flatnonzero(~present):
        v = rng.normal(size=dim)
        out[i] = v / np.linalg.norm(v) * scale
    coverage = float(present.mean()) if len(tokens) else 0.0
    return EmbeddingMatrix(out, tuple(tokens), coverage)


def save_embeddings(emb: EmbeddingMatrix, path) -> None:
    lines = [tok + " " + " ".join(repr(float(x)) for x in row)
             for tok, row in zip(emb.tokens, emb.vectors)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cosine_rank(emb: EmbeddingMatrix, query: int) -> SimilarityRanking:
    """Cosine similarity of every row to the query row, sorted descending.

    The query comes first; other ties go to the lower index.
    """
    vecs = emb.vectors
    q = vecs[query]
    qn = np.linalg.norm(q)
    if qn == 0:
        raise EmbeddingError(f"query row {query} has zero norm")
    norms = np.linalg.norm(vecs, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    scores = np.where(norms > 0, (vecs @ q) / (safe * qn), 0.0)
    scores = np.clip(scores, -1.0, 1.0)
    scores[query] = 1.0
    idx = np.arange(len(scores))
    order = np.lexsort((idx, idx != query, -scores))
    return SimilarityRanking(query, scores, order)


def cooccurrence(stream, vocab_size: int, window: int) -> sparse.csr_matrix:
    """Symmetric counts of token pairs within ``window`` positions."""
    stream = np.asarray(stream, dtype=np.int64)
    rows, cols = [], []
    for off in range(1, window + 1):
        rows += [stream[:-off], stream[off:]]
        cols += [stream[off:], stream[:-off]]
    r, c = np.concatenate(rows), np.concatenate(cols)
    return sparse.coo_matrix((np.ones(len(r)), (r, c)), shape=(vocab_size, vocab_size)).tocsr()


def ppmi(counts: sparse.csr_matrix) -> sparse.csr_matrix:
    counts = counts.tocoo()
    row = np.asarray(counts.sum(axis=1)).ravel()
    col = np.asarray(counts.sum(axis=0)).ravel()
    total = counts.data.sum()
    pmi = np.log(counts.data * total / (row[counts.row] * col[counts.col]))
    keep = pmi > 0
    return sparse.csr_matrix((pmi[keep], (counts.row[keep], counts.col[keep])), shape=counts.shape)


def ppmi_svd_embeddings(stream, tokens: Sequence[str], window: int = 2, dim: int = 64,
                        seed: int = 0, power_iters: int = 6) -> EmbeddingMatrix:
    """Rank-``dim`` factorization of the PPMI matrix by seeded randomized power iteration."""
    v = len(tokens)
    stream = np.asarray(stream, dtype=np.int64)
    if window < 1:
        raise EmbeddingError("window must be >= 1")
    if dim > v:
        raise EmbeddingError(f"dim {dim} exceeds vocabulary size {v}")
    if len(stream) < window + 1:
        raise EmbeddingError(f"corpus of {len(stream)} tokens shorter than window + 1")
    m = ppmi(cooccurrence(stream, v, window))
    rng = np.random.default_rng(seed)
    width = min(v, dim + 10)
    q, _ = np.linalg.qr(m @ rng.normal(size=(v, width)))
    for _ in range(power_iters):
        q, _ = np.linalg.qr(m @ (m.T @ q))
    u_small, s, _ = np.linalg.svd((m.T @ q).T, full_matrices=False)
    u = q @ u_small[:, :dim]
    # fix each component's sign so the largest-magnitude entry is positive
    signs = np.sign(u[np.abs(u).argmax(axis=0), np.arange(u.shape[1])])
    u *= np.where(signs == 0, 1.0, signs)
    return EmbeddingMatrix(u * np.sqrt(s[:dim]), tuple(tokens), 1.0)
