"""Error-correcting output codebooks over contiguous code-space intervals.

Each token owns a half-open interval ``[start, end)`` of the integer code
space ``[0, 2**n_bits)``.  The interval start is the token's class codeword;
every other code in the interval is an error check that still decodes to the
token.  Integers are mapped to bit patterns either in plain binary or in
reflected Gray code, bit 0 being the most significant.
"""

from __future__ import annotations

import bisect
import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_BITS = 4096
PROB_EPS = 1e-12
MODES = ("binary", "gray")


class CodebookError(ValueError):
    pass


def int_to_gray(value: int) -> int:
    return value ^ (value >> 1)


def gray_to_int(code: int) -> int:
    value = code
    shift = code >> 1
    while shift:
        value ^= shift
        shift >>= 1
    return value


def _int_to_bits(value: int, n_bits: int) -> np.ndarray:
    nbytes = (n_bits + 7) // 8
    raw = np.frombuffer(value.to_bytes(nbytes, "big"), dtype=np.uint8)
    return np.unpackbits(raw)[8 * nbytes - n_bits:]


def _bits_to_int(bits) -> int:
    bits = np.asarray(bits, dtype=np.uint8)
    pad = (-len(bits)) % 8
    packed = np.packbits(np.concatenate([np.zeros(pad, np.uint8), bits]))
    return int.from_bytes(packed.tobytes(), "big")


@dataclass(frozen=True)
class Codeword:
    """An ``n_bits``-wide bit vector, stored as the unsigned integer it denotes."""

    value: int
    n_bits: int

    def __post_init__(self):
        if not 1 <= self.n_bits <= MAX_BITS:
            raise CodebookError(f"codeword width {self.n_bits} outside [1, {MAX_BITS}]")
        if not 0 <= self.value < (1 << self.n_bits):
            raise CodebookError(f"value {self.value} does not fit in {self.n_bits} bits")

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "Codeword":
        bits = [int(b) for b in bits]
        if any(b not in (0, 1) for b in bits):
            raise CodebookError("codeword bits must be 0 or 1")
        return cls(_bits_to_int(bits), len(bits))

    @property
    def bits(self) -> np.ndarray:
        return _int_to_bits(self.value, self.n_bits)

    def __str__(self):
        return format(self.value, f"0{self.n_bits}b")


def codeword_of_integer(value: int, n_bits: int, mode: str = "binary") -> Codeword:
    if mode == "gray":
        return Codeword(int_to_gray(value), n_bits)
    if mode != "binary":
        raise CodebookError(f"unknown mapping mode {mode!r}")
    return Codeword(value, n_bits)


def integer_of_codeword(codeword: Codeword, mode: str = "binary") -> int:
    return gray_to_int(codeword.value) if mode == "gray" else codeword.value


def hamming(a: Codeword, b: Codeword) -> int:
    if a.n_bits != b.n_bits:
        raise CodebookError(f"width mismatch: {a.n_bits} vs {b.n_bits}")
    return (a.value ^ b.value).bit_count()


@dataclass(frozen=True)
class SpanScore:
    token: int
    log_score: float
    witness: Codeword | None = None


@dataclass(frozen=True)
class Codebook:
    """Partition of the ``n_bits`` code space into one interval per token.

    ``boundaries`` has ``vocab_size + 1`` entries; interval ``k`` is
    ``[boundaries[k], boundaries[k+1])`` and belongs to token
    ``token_order[k]``.
    """

    n_bits: int
    mapping_mode: str
    boundaries: tuple[int, ...]
    token_order: tuple[int, ...]
    ordering: str = "identity"
    _rank: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mapping_mode not in MODES:
            raise CodebookError(f"unknown mapping mode {self.mapping_mode!r}")
        if not 1 <= self.n_bits <= MAX_BITS:
            raise CodebookError(f"n_bits {self.n_bits} outside [1, {MAX_BITS}]")
        v = len(self.token_order)
        if len(self.boundaries) != v + 1:
            raise CodebookError("need exactly vocab_size + 1 boundaries")
        if self.boundaries[0] != 0 or self.boundaries[-1] != 1 << self.n_bits:
            raise CodebookError("spans must cover [0, 2**n_bits) exactly")
        if any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise CodebookError("every span needs width >= 1")
        if sorted(self.token_order) != list(range(v)):
            raise CodebookError("token_order is not a permutation of the vocabulary")
        rank = [0] * v
        for k, tok in enumerate(self.token_order):
            rank[tok] = k
        object.__setattr__(self, "_rank", tuple(rank))

    @property
    def vocab_size(self) -> int:
        return len(self.token_order)

    @property
    def spans(self) -> list[tuple[int, int]]:
        """Intervals in code-space order."""
        b = self.boundaries
        return [(b[k], b[k + 1]) for k in range(self.vocab_size)]

    def span(self, token: int) -> tuple[int, int]:
        self._check_token(token)
        k = self._rank[token]
        return self.boundaries[k], self.boundaries[k + 1]

    def span_width(self, token: int) -> int:
        s, e = self.span(token)
        return e - s

    def widths(self) -> np.ndarray:
        """Span width per token index, as float (widths may exceed int64)."""
        return np.array([float(self.span_width(t)) for t in range(self.vocab_size)])

    def log_width_fraction(self) -> np.ndarray:
        """ln(width / 2**n) per token, exact for arbitrary widths."""
        shift = self.n_bits * math.log(2.0)
        return np.array([math.log(self.span_width(t)) - shift for t in range(self.vocab_size)])

    def _check_token(self, token: int):
        if not 0 <= token < self.vocab_size:
            raise CodebookError(f"token {token} out of range [0, {self.vocab_size})")

    # bit tables used by the vectorized span scorers, indexed by token
    @cached_property
    def _tables(self) -> dict[str, np.ndarray]:
        v, n = self.vocab_size, self.n_bits
        start_int = np.zeros((v, n), np.uint8)
        last_int = np.zeros((v, n), np.uint8)
        start_code = np.zeros((v, n), np.uint8)
        last_code = np.zeros((v, n), np.uint8)
        for tok in range(v):
            s, e = self.span(tok)
            start_int[tok] = _int_to_bits(s, n)
            last_int[tok] = _int_to_bits(e - 1, n)
            start_code[tok] = codeword_of_integer(s, n, self.mapping_mode).bits
            last_code[tok] = codeword_of_integer(e - 1, n, self.mapping_mode).bits
        return dict(start_int=start_int, last_int=last_int,
                    start_code=start_code, last_code=last_code)

    @cached_property
    def class_code_bits(self) -> np.ndarray:
        """(vocab, n_bits) matrix of class codewords."""
        return self._tables["start_code"]

    @cached_property
    def _small_bounds(self) -> np.ndarray | None:
        if self.n_bits > 62:
            return None
        return np.array(self.boundaries, dtype=np.int64)

    def decode_bits(self, bits: np.ndarray) -> np.ndarray:
        """Decode a (..., n_bits) array of codeword bits to token indices."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape[-1] != self.n_bits:
            raise CodebookError(f"width mismatch: {bits.shape[-1]} vs {self.n_bits}")
        lead = bits.shape[:-1]
        flat = bits.reshape(-1, self.n_bits)
        if self.mapping_mode == "gray":
            flat = np.bitwise_xor.accumulate(flat, axis=1)
        order = np.asarray(self.token_order)
        if self._small_bounds is not None:
            weights = np.left_shift(np.int64(1), np.arange(self.n_bits - 1, -1, -1, dtype=np.int64))
            values = flat.astype(np.int64) @ weights
            k = np.searchsorted(self._small_bounds, values, side="right") - 1
        else:
            k = np.array([bisect.bisect_right(self.boundaries, _bits_to_int(row)) - 1
                          for row in flat], dtype=np.int64)
        return order[k].reshape(lead)

    def span_scores(self, log1: np.ndarray, log0: np.ndarray, tokens, reduce: str = "max",
                    witness: bool = False):
        """Score the spans of ``tokens`` under factorial bit log-probabilities.

        ``log1``/``log0`` are (m, n) or (1, n) arrays of ln p(bit=1), ln p(bit=0);
        ``tokens`` has m entries (or any length when log arrays are (1, n)).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise CodebookError("token out of range")
        t = self._tables
        return interval_scores(log1, log0, t["start_int"][tokens], t["last_int"][tokens],
                               t["start_code"][tokens], t["last_code"][tokens],
                               reduce=reduce, witness=witness)


def interval_scores(log1, log0, lo_int, hi_int, lo_code, hi_code, reduce="max", witness=False):
    """Max or log-sum of factorial probabilities over closed integer intervals.

    MSB-first bound-tracking traversal: while a code's prefix equals the
    common prefix of ``lo`` and ``hi`` it is tight on both bounds; after the
    first differing bit it is tight on one bound, and it becomes unconstrained
    the first time it moves strictly inside (a 1 where ``lo`` has 0, or a 0
    where ``hi`` has 1).  Unconstrained suffixes aggregate per bit.  The
    tight-path running scores are prefix sums, so every interval is handled
    in O(n) with no enumeration.  In Gray mode flipping one integer bit
    flips the same code bit, and an unconstrained integer suffix maps
    bijectively onto an unconstrained code suffix, so the same recursion
    applies to the code bits directly.
    """
    lo_int = np.asarray(lo_int, bool)
    hi_int = np.asarray(hi_int, bool)
    lo_code = np.asarray(lo_code, bool)
    hi_code = np.asarray(hi_code, bool)
    m, n = lo_int.shape
    log1 = np.broadcast_to(log1, (m, n))
    log0 = np.broadcast_to(log0, (m, n))

    differ = lo_int != hi_int
    diverged = differ.any(axis=1)
    d = np.where(diverged, differ.argmax(axis=1), n)
    pos = np.arange(n)
    after = pos[None, :] > d[:, None]

    e_lo = np.where(lo_code, log1, log0)
    e_hi = np.where(hi_code, log1, log0)
    if reduce == "max":
        free = np.maximum(log1, log0)
    elif reduce == "sum":
        free = np.logaddexp(log1, log0)
    else:
        raise ValueError(f"unknown reduce {reduce!r}")
    # suffix_free[:, c] = aggregate over bits c+1..n-1
    suffix_free = np.zeros((m, n))
    if n > 1:
        suffix_free[:, :-1] = np.cumsum(free[:, :0:-1], axis=1)[:, ::-1]
    cum_lo = np.cumsum(e_lo, axis=1)
    cum_hi = np.cumsum(e_hi, axis=1)
    before_lo = cum_lo - e_lo
    before_hi = cum_hi - e_hi

    neg = -np.inf
    lo_block = np.where(after & ~lo_int, before_lo + np.where(lo_code, log0, log1) + suffix_free, neg)
    hi_block = np.where(after & hi_int, before_hi + np.where(hi_code, log0, log1) + suffix_free, neg)
    lo_path = cum_lo[:, -1]
    hi_path = np.where(diverged, cum_hi[:, -1], neg)
    # columns in increasing code-integer order, so argmax ties favour the span start
    cand = np.concatenate([lo_path[:, None], lo_block[:, ::-1], hi_block, hi_path[:, None]], axis=1)

    if reduce == "sum":
        top = cand.max(axis=1)
        return top + np.log(np.exp(cand - top[:, None]).sum(axis=1))

    best = cand.argmax(axis=1)
    score = cand[np.arange(m), best]
    if not witness:
        return score
    is_lo_path = best == 0
    is_hi_path = best == 2 * n + 1
    is_lo_block = (best >= 1) & (best <= n)
    is_hi_block = (best > n) & (best <= 2 * n)
    c = np.where(is_lo_block, n - best, np.where(is_hi_block, best - n - 1, n))
    free_bits = (log1 > log0).astype(np.uint8)
    side = np.where(is_hi_block[:, None], hi_code, lo_code).astype(np.uint8)
    blk = (pos[None, :] < c[:, None]) * side
    blk = blk + (pos[None, :] == c[:, None]) * (1 - side)
    blk = blk + (pos[None, :] > c[:, None]) * free_bits
    w = blk.astype(np.uint8)
    w[is_lo_path] = lo_code[is_lo_path]
    w[is_hi_path] = hi_code[is_hi_path]
    return score, w


def bit_log_probs(bit_probs) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(bit_probs, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise CodebookError("bit probabilities must lie in [0, 1]")
    p = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    return np.log(p), np.log1p(-p)


def _check_span(span, n_bits):
    s, e = int(span[0]), int(span[1])
    if e <= s:
        raise CodebookError(f"empty span [{s}, {e})")
    if s < 0 or e > 1 << n_bits:
        raise CodebookError(f"span [{s}, {e}) outside [0, 2**{n_bits})")
    return s, e


def _span_tables(span, n_bits, mode):
    s, e = _check_span(span, n_bits)
    lo_int = _int_to_bits(s, n_bits)[None]
    hi_int = _int_to_bits(e - 1, n_bits)[None]
    lo_code = codeword_of_integer(s, n_bits, mode).bits[None]
    hi_code = codeword_of_integer(e - 1, n_bits, mode).bits[None]
    return lo_int, hi_int, lo_code, hi_code


def span_max_logprob(bit_probs, span, mapping_mode: str = "binary", token: int = -1) -> SpanScore:
    """Most probable codeword inside ``span`` under independent per-bit probabilities."""
    log1, log0 = bit_log_probs(bit_probs)
    n = log1.shape[-1]
    score, w = interval_scores(log1[None], log0[None], *_span_tables(span, n, mapping_mode),
                               reduce="max", witness=True)
    return SpanScore(token, float(score[0]), Codeword.from_bits(w[0]))


def span_log_mass(bit_probs, span, mapping_mode: str = "binary") -> float:
    log1, log0 = bit_log_probs(bit_probs)
    n = log1.shape[-1]
    return float(interval_scores(log1[None], log0[None], *_span_tables(span, n, mapping_mode),
                                 reduce="sum")[0])


def token_distribution(bit_probs, codebook: Codebook, mode: str = "sum") -> np.ndarray:
    """Per-token log-probabilities implied by a factorial code distribution.

    ``sum`` marginalizes every code in a token's span and is normalized by
    construction; ``max`` keeps only the best code per span and is then
    log-normalized over the vocabulary.
    """
    log1, log0 = bit_log_probs(bit_probs)
    if log1.shape[-1] != codebook.n_bits:
        raise CodebookError(f"width mismatch: {log1.shape[-1]} vs {codebook.n_bits}")
    tokens = np.arange(codebook.vocab_size)
    if mode == "sum":
        return codebook.span_scores(log1[None], log0[None], tokens, reduce="sum")
    if mode == "max":
        scores = codebook.span_scores(log1[None], log0[None], tokens, reduce="max")
        top = scores.max()
        return scores - (top + math.log(np.exp(scores - top).sum()))
    raise ValueError(f"unknown mode {mode!r}")


def _partition(weights: Sequence[float], n_bits: int) -> list[int]:
    """Floor of the cumulative weight share times 2**n, then widen empty spans."""
    total = sum((Fraction(w) for w in weights), Fraction(0))
    space = 1 << n_bits
    bounds = [0]
    acc = Fraction(0)
    for w in weights:
        acc += Fraction(w)
        bounds.append((acc * space) // total)
    bounds[-1] = space
    widths = [b - a for a, b in zip(bounds, bounds[1:])]
    for i, w in enumerate(widths):
        if w > 0:
            continue
        donor = None
        neighbours = [j for j in (i - 1, i + 1) if 0 <= j < len(widths)]
        best = max(neighbours, key=lambda j: (widths[j], -j))
        if widths[best] >= 2:
            donor = best
        else:
            for dist in range(2, len(widths)):
                near = [j for j in (i - dist, i + dist) if 0 <= j < len(widths) and widths[j] >= 2]
                if near:
                    donor = max(near, key=lambda j: (widths[j], -j))
                    break
        if donor is None:
            raise CodebookError("code space too small to give every token a codeword")
        widths[donor] -= 1
        widths[i] += 1
    out = [0]
    for w in widths:
        out.append(out[-1] + w)
    return out


def build_codebook(vocab_size: int, n_bits: int, ordering="identity", span_weights=None,
                   mapping_mode: str = "binary", seed: int = 0, label: str | None = None) -> Codebook:
    """Lay tokens out along the code space with widths proportional to weights.

    ``ordering`` is ``"identity"``, ``"random"`` (seeded permutation) or an
    explicit sequence of token indices in code-space order.  ``span_weights``
    are indexed by token; ``None`` means uniform.
    """
    if vocab_size < 2:
        raise CodebookError("vocab_size must be >= 2")
    if not 1 <= n_bits <= MAX_BITS:
        raise CodebookError(f"n_bits {n_bits} outside [1, {MAX_BITS}]")
    if (1 << n_bits) < vocab_size:
        raise CodebookError(f"code space too small: 2**{n_bits} < {vocab_size}")
    if isinstance(ordering, str):
        if ordering == "identity":
            order = list(range(vocab_size))
        elif ordering == "random":
            order = [int(t) for t in np.random.default_rng(seed).permutation(vocab_size)]
        else:
            raise CodebookError(f"unknown ordering {ordering!r}")
        label = label or (ordering if ordering == "identity" else f"random(seed={seed})")
    else:
        order = [int(t) for t in ordering]
        label = label or "custom"
    if span_weights is None:
        weights = [1.0] * vocab_size
    else:
        weights = [float(w) for w in span_weights]
        if len(weights) != vocab_size:
            raise CodebookError("need one weight per token")
        if not all(math.isfinite(w) for w in weights):
            raise CodebookError("non-finite span weight")
        if any(w < 0 for w in weights):
            raise CodebookError("negative span weight")
        if sum(weights) == 0:
            raise CodebookError("span weights sum to zero")
    ordered = [weights[t] for t in order]
    bounds = _partition(ordered, n_bits)
    return Codebook(n_bits, mapping_mode, tuple(bounds), tuple(order), label)


def random_codebook(vocab_size: int, n_bits: int, seed: int = 0, mapping_mode="binary") -> Codebook:
    return build_codebook(vocab_size, n_bits, "random", None, mapping_mode, seed)


def unigram_codebook(counts, n_bits: int, mapping_mode="binary") -> Codebook:
    counts = np.asarray(counts, dtype=np.float64)
    order = np.argsort(-counts, kind="stable")
    return build_codebook(len(counts), n_bits, order, counts, mapping_mode, label="unigram")


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max())
    return z / z.sum()


def embedding_codebook(ranking, n_bits: int, mapping_mode="binary", query_label=None) -> Codebook:
    """Order tokens by similarity to the query; widths follow softmax(similarity)."""
    weights = softmax(ranking.scores)
    q = query_label if query_label is not None else ranking.query_token
    return build_codebook(len(weights), n_bits, ranking.order, weights, mapping_mode,
                          label=f"embedding(query={q})")


def spare_codes(codebook: Codebook) -> int:
    """Number of error-check codes, 2**n - |V|."""
    return (1 << codebook.n_bits) - codebook.vocab_size


def encode(codebook: Codebook, token: int) -> Codeword:
    s, _ = codebook.span(token)
    return codeword_of_integer(s, codebook.n_bits, codebook.mapping_mode)


def decode(codebook: Codebook, codeword: Codeword) -> int:
    if codeword.n_bits != codebook.n_bits:
        raise CodebookError(f"width mismatch: {codeword.n_bits} vs {codebook.n_bits}")
    value = integer_of_codeword(codeword, codebook.mapping_mode)
    k = bisect.bisect_right(codebook.boundaries, value) - 1
    return codebook.token_order[k]


def vocab_hash(tokens: Sequence[str]) -> str:
    h = hashlib.sha256()
    for tok in tokens:
        h.update(tok.encode("utf-8") + b"\n")
    return h.hexdigest()[:16]


HEADER = "ecoc-codebook v1"


def save_codebook(codebook: Codebook, path, tokens: Sequence[str]) -> None:
    """Write the line-based codebook file; ``tokens`` maps index -> string."""
    if len(tokens) != codebook.vocab_size:
        raise CodebookError("token list does not match codebook vocabulary")
    lines = [f"{HEADER} n_bits={codebook.n_bits} mode={codebook.mapping_mode} "
             f"vocab={codebook.vocab_size} vocab_hash={vocab_hash(tokens)}"]
    for k, tok in enumerate(codebook.token_order):
        lines.append(f"{tokens[tok]}\t{codebook.boundaries[k]}\t{codebook.boundaries[k + 1]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_codebook(path, tokens: Sequence[str]) -> Codebook:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith(HEADER + " "):
        raise CodebookError(f"{path}: not an {HEADER} file")
    fields = dict(kv.split("=", 1) for kv in lines[0][len(HEADER) + 1:].split())
    n_bits, mode, v = int(fields["n_bits"]), fields["mode"], int(fields["vocab"])
    if v != len(tokens):
        raise CodebookError(f"{path}: codebook vocab {v} != vocabulary size {len(tokens)}")
    expected = fields.get("vocab_hash")
    if expected is not None and expected != vocab_hash(tokens):
        raise CodebookError(f"{path}: vocabulary hash mismatch ({expected} != {vocab_hash(tokens)})")
    index = {tok: i for i, tok in enumerate(tokens)}
    order, bounds = [], [0]
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise CodebookError(f"{path}:{lineno}: expected 3 tab-separated fields")
        tok, s, e = parts[0], int(parts[1]), int(parts[2])
        if tok not in index:
            raise CodebookError(f"{path}:{lineno}: unknown token {tok!r}")
        if s != bounds[-1]:
            raise CodebookError(f"{path}:{lineno}: span does not start where the previous ended")
        order.append(index[tok])
        bounds.append(e)
    if len(order) != v:
        raise CodebookError(f"{path}: expected {v} spans, found {len(order)}")
    return Codebook(n_bits, mode, tuple(bounds), tuple(order), "file")
