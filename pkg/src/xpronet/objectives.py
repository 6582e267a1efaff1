"""Generation loss, the tolerance-adjusted multi-label contrastive loss, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ContractError, NumericError, Tensor, ops
from .engine.ops import DIV_EPS

LOG_EPS = 1e-12


@dataclass
class LossConfig:
    theta: float = 1.5
    alpha: float = 0.4
    lam: float = 1.0
    delta: float = 0.1
    clamp_positive: bool = False
    use_tolerance: bool = True

    def __post_init__(self):
        if self.theta <= 0:
            raise ContractError("theta must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError("alpha must lie in [0, 1)")


def cross_entropy(probs: Tensor, gold, keep=None) -> Tensor:
    """Mean negative log-probability of the gold tokens over kept positions.

    ``probs`` is ``[..., V]``, ``gold`` integer ``[...]``; ``keep`` (default:
    everything) excludes padding.
    """
    gold = np.asarray(gold, dtype=np.int64)
    keep = np.ones(gold.shape, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross_entropy needs at least one non-padding target")
    picked = ops.take_last(probs, gold[..., None])[..., 0]
    logp = ops.log(ops.add(picked, LOG_EPS))
    return ops.mul(ops.sum(ops.mul(logp, keep.astype(np.float64))), -1.0 / n)


def response_embedding(responses: Tensor, keep=None) -> tuple[Tensor, np.ndarray]:
    """Average responses over positions, then L2-normalise.

    ``responses`` is ``[..., N, d]``; ``keep`` masks positions. Returns the
    embedding and a boolean flag that is true where the average was zero.
    """
    if keep is None:
        avg = ops.mean(responses, axis=-2)
    else:
        keep = np.asarray(keep, dtype=np.float64)
        count = np.maximum(keep.sum(axis=-1, keepdims=True), 1.0)
        avg = ops.div(ops.sum(ops.mul(responses, keep[..., None]), axis=-2), count)
    norm = np.sqrt(np.sum(avg.data**2, axis=-1))
    return ops.l2_normalize(avg, axis=-1), norm <= DIV_EPS


def tolerance_term(y_i, y_j, theta: float) -> float:
    """``theta ** (-h_d / h_t)`` for a positive pair."""
    y_i, y_j = np.asarray(y_i), np.asarray(y_j)
    h_d = float(np.sum(np.abs(y_i - y_j)))
    h_t = float(np.sum(y_i + y_j))
    if h_t == 0:
        raise ContractError("tolerance term is undefined when neither sample has a label")
    return float(theta ** (-h_d / h_t))


def pair_structure(labels, theta: float, use_tolerance: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Positive-pair mask ``[B, B]`` and per-pair similarity targets."""
    y = np.asarray(labels, dtype=np.float64)
    positive = (y @ y.T) != 0
    h_d = np.abs(y[:, None, :] - y[None, :, :]).sum(-1)
    h_t = (y[:, None, :] + y[None, :, :]).sum(-1)
    ratio = np.divide(h_d, h_t, out=np.zeros_like(h_d), where=h_t > 0)
    target = theta ** (-ratio) if use_tolerance else np.ones_like(ratio)
    return positive, np.where(positive, target, 0.0)


def contrastive_from_embeddings(emb: Tensor, labels, cfg: LossConfig) -> Tensor:
    """Pairwise loss over all ordered pairs (including i = j), scaled by 1/B^2."""
    b = emb.shape[0]
    if b < 1:
        raise ContractError("contrastive loss needs a non-empty batch")
    positive, target = pair_structure(labels, cfg.theta, cfg.use_tolerance)
    sim = ops.matmul(emb, ops.transpose(emb))
    pos_term = ops.sub(target, sim)
    if cfg.clamp_positive:
        pos_term = ops.relu(pos_term)
    neg_term = ops.relu(ops.sub(sim, cfg.alpha))
    total = ops.add(ops.mul(pos_term, positive.astype(np.float64)), ops.mul(neg_term, (~positive).astype(np.float64)))
    return ops.mul(ops.sum(total), 1.0 / (b * b))


def improved_contrastive(responses: Tensor, labels, cfg: LossConfig, keep=None) -> Tensor:
    """Contrastive loss on per-sample responses ``[B, N, d]``."""
    emb, _ = response_embedding(responses, keep)
    return contrastive_from_embeddings(emb, labels, cfg)


def total_loss(l_ce: Tensor, l_vis: Tensor, l_txt: Tensor, lam: float, delta: float) -> Tensor:
    for name, term in (("cross-entropy", l_ce), ("visual contrastive", l_vis), ("textual contrastive", l_txt)):
        if not np.all(np.isfinite(ops.as_tensor(term).data)):
            raise NumericError(f"{name} term is not finite")
    return ops.add(ops.add(l_ce, ops.mul(l_vis, lam)), ops.mul(l_txt, delta))
