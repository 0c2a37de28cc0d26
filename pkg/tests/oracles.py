"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def code_bits(value: int, n: int, gray: bool = False) -> list[int]:
    if gray:
        value ^= value >> 1
    return [(value >> (n - 1 - i)) & 1 for i in range(n)]


def factorial_logprob(bits, probs) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1 - 1e-12)
    return float(sum(math.log(pc) if b else math.log(1 - pc) for b, pc in zip(bits, p)))


def enumerate_span(probs, lo: int, hi: int, gray: bool = False):
    """(max log-prob, argmax integer, log of total mass) by brute force."""
    n = len(probs)
    scores = [factorial_logprob(code_bits(v, n, gray), probs) for v in range(lo, hi)]
    best = int(np.argmax(scores))
    top = max(scores)
    mass = top + math.log(sum(math.exp(s - top) for s in scores))
    return top, lo + best, mass


def token_distribution_brute(probs, spans_by_token, gray=False, mode="sum"):
    out = []
    for lo, hi in spans_by_token:
        top, _, mass = enumerate_span(probs, lo, hi, gray)
        out.append(mass if mode == "sum" else top)
    out = np.array(out)
    if mode == "max":
        top = out.max()
        out = out - (top + math.log(np.exp(out - top).sum()))
    return out


def cumsum_floor_boundaries(weights, n_bits):
    """Exact-rational cumsum floor followed by the zero-width repair pass."""
    total = sum(Fraction(w) for w in weights)
    space = 1 << n_bits
    acc, bounds = Fraction(0), [0]
    for w in weights:
        acc += Fraction(w)
        bounds.append(math.floor(acc / total * space))
    bounds[-1] = space
    return bounds


def brute_min_hamming(a_bits, b_bits) -> int:
    return sum(x != y for x, y in zip(a_bits, b_bits))


def all_codes(n):
    return list(itertools.product((0, 1), repeat=n))
