"""Batched greedy and beam search over an arbitrary next-token scorer.

``step_fn(prefixes, owners)`` receives a ``[n, t]`` int array of prefixes and
the index of the sample each prefix belongs to, and returns ``[n, V]``
log-probabilities of the next token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import BOS, EOS, PAD

StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]  # generated tokens, without BOS, EOS included if produced
    log_prob: float

    def score(self, length_normalize: bool) -> float:
        if length_normalize and self.tokens:
            return self.log_prob / len(self.tokens)
        return self.log_prob


def _rank_key(h: Hypothesis, length_normalize: bool):
    return (-h.score(length_normalize), h.tokens)


def best_of(hyps: Sequence[Hypothesis], length_normalize: bool) -> Hypothesis:
    """Highest score; exact ties go to the lexicographically smallest sequence."""
    return min(hyps, key=lambda h: _rank_key(h, length_normalize))


def _ban(logp: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    logp = np.array(logp, dtype=np.float64)
    if banned:
        logp[..., list(banned)] = -np.inf
    return logp


def greedy_search(
    step_fn: StepFn, n: int, max_steps: int, banned: Sequence[int] = (PAD, BOS)
) -> list[Hypothesis]:
    tokens = [[] for _ in range(n)]
    logp = np.zeros(n)
    alive = np.arange(n)
    prefixes = np.full((n, 1), BOS, dtype=np.int64)
    for _ in range(max_steps):
        if not len(alive):
            break
        lp = _ban(step_fn(prefixes, alive), banned)
        nxt = np.argmax(lp, axis=-1)
        logp[alive] += lp[np.arange(len(alive)), nxt]
        for row, s in enumerate(alive):
            tokens[s].append(int(nxt[row]))
        keep = nxt != EOS
        alive = alive[keep]
        prefixes = np.concatenate([prefixes[keep], nxt[keep, None]], axis=1)
    return [Hypothesis(tokens[s], float(logp[s])) for s in range(n)]


def beam_search(
    step_fn: StepFn,
    n: int,
    beam_size: int,
    max_steps: int,
    length_normalize: bool = True,
    banned: Sequence[int] = (PAD, BOS),
) -> list[Hypothesis]:
    """Per-sample beam search; a sample stops once ``beam_size`` hypotheses have ended."""
    k = beam_size
    finished: list[list[Hypothesis]] = [[] for _ in range(n)]
    # alive beams: tokens [n, k, t] (without BOS), scores [n, k]
    seqs = np.zeros((n, k, 0), dtype=np.int64)
    scores = np.full((n, k), -np.inf)
    scores[:, 0] = 0.0
    active = np.arange(n)
    for step in range(max_steps):
        if not len(active):
            break
        a = len(active)
        prefixes = np.concatenate([np.full((a, k, 1), BOS, dtype=np.int64), seqs[active]], axis=2).reshape(a * k, -1)
        owners = np.repeat(active, k)
        lp = _ban(step_fn(prefixes, owners), banned)
        vocab = lp.shape[-1]
        total = scores[active][:, :, None] + lp.reshape(a, k, vocab)
        flat = total.reshape(a, k * vocab)
        order = np.argsort(-flat, axis=1, kind="stable")[:, : 2 * k]
        last = step == max_steps - 1
        new_seqs = np.zeros((a, k, step + 1), dtype=np.int64)
        new_scores = np.full((a, k), -np.inf)
        still = np.ones(a, dtype=bool)
        for r, s in enumerate(active):
            filled = 0
            for rank, c in enumerate(order[r]):
                val = flat[r, c]
                if not np.isfinite(val):
                    break
                beam, tok = divmod(int(c), vocab)
                toks = seqs[s, beam].tolist() + [tok]
                if tok == EOS or last:
                    if rank < k:
                        finished[s].append(Hypothesis(toks, float(val)))
                    continue
                if filled < k:
                    new_seqs[r, filled] = toks
                    new_scores[r, filled] = val
                    filled += 1
            done = len(finished[s]) >= k or filled == 0
            if not done and not length_normalize and finished[s]:
                best = max(h.log_prob for h in finished[s])
                done = best >= new_scores[r, :filled].max()
            still[r] = not done
        grown = np.zeros((n, k, step + 1), dtype=np.int64)
        grown[active] = new_seqs
        seqs = grown
        scores[active] = new_scores
        active = active[still]
    return [best_of(finished[s], length_normalize) if finished[s] else Hypothesis([], float("-inf")) for s in range(n)]
