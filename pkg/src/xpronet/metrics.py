"""Corpus BLEU-1..4 and ROUGE-L over token sequences (single reference)."""

from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Hashable, Sequence

log = logging.getLogger(__name__)

SMOOTH_EPS = 1e-9
ROUGE_BETA = 1.2

Tokens = Sequence[Hashable]


def strip_special(tokens: Sequence[int], specials=(0, 1, 2)) -> list[int]:
    """Drop PAD/BOS and cut at the first EOS."""
    out = []
    for t in tokens:
        if t == 2 and 2 in specials:
            break
        if t not in specials:
            out.append(t)
    return out


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], n: int = 4) -> float:
    """Corpus-level BLEU-n with clipped counts and a brevity penalty.

    Zero precisions are smoothed by adding 1e-9 before the log.
    """
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matches = [0] * n
    totals = [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for k in range(1, n + 1):
            cc, rc = _ngrams(cand, k), _ngrams(ref, k)
            matches[k - 1] += sum(min(c, rc[g]) for g, c in cc.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if c_len == 0:
        return 0.0
    geo = 1.0
    for m, t in zip(matches, totals):
        p = m / t if t else 0.0
        geo *= (p if p > 0 else SMOOTH_EPS) ** (1.0 / n)
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return min(1.0, bp * geo)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Tokens, reference: Tokens, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(list(candidate), list(reference))
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return ((1 + beta**2) * p * r) / (r + beta**2 * p)


def rouge_l(candidates: Sequence[Tokens], references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    scores = []
    for cand, ref in zip(candidates, references):
        if not len(ref):
            log.warning("skipping pair with empty reference")
            continue
        scores.append(rouge_l_pair(cand, ref, beta))
    return sum(scores) / len(scores) if scores else 0.0


def evaluate(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> dict:
    out = {f"bleu_{n}": bleu(candidates, references, n) for n in range(1, 5)}
    out["rouge_l"] = rouge_l(candidates, references)
    out["n_samples"] = len(candidates)
    return out
