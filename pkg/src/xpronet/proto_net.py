"""Class-related prototype querying, top-gamma responding, and feature fusion.

Shapes (``...`` is an optional batch prefix, ``h`` the number of query heads):

* features ``[..., N, C]``
* candidates ``[M, D]`` (rows of the prototype matrix)
* similarities ``[..., h, N, M]``
* responses ``[..., N, d]``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ContractError, ShapeError, Tensor, ops
from .engine.ops import DIV_EPS

NORMALIZERS = ("softmax", "literal-linear")


@dataclass
class ProtoNetConfig:
    n_labels: int = 14
    n_protos: int = 20
    proto_dim: int = 32  # D
    feature_dim: int = 32  # C
    proj_dim: int = 32  # C_P
    query_dim: int = 32  # d
    heads: int = 2
    gamma: int = 15
    normalizer: str = "softmax"

    def __post_init__(self):
        if self.query_dim % self.heads:
            raise ContractError(f"query_dim {self.query_dim} is not divisible by heads {self.heads}")
        if self.normalizer not in NORMALIZERS:
            raise ContractError(f"normalizer must be one of {NORMALIZERS}")

    @property
    def head_dim(self) -> int:
        return self.query_dim // self.heads


def _xavier(rng, fan_in, fan_out, shape=None):
    return rng.normal(scale=np.sqrt(2.0 / (fan_in + fan_out)), size=shape or (fan_in, fan_out))


def init_proto_params(cfg: ProtoNetConfig, rng: np.random.Generator, pm: np.ndarray | None = None) -> dict[str, Tensor]:
    """Learnable weights of the prototype pipeline, including the prototype matrix.

    The fusion layer starts as identity on the feature half so an untrained
    network passes features through and mixes in a small response term.
    """
    if pm is None:
        pm = rng.normal(scale=0.02, size=(cfg.n_labels, cfg.n_protos, cfg.proto_dim))
    pm = np.asarray(pm, dtype=np.float64)
    if pm.shape != (cfg.n_labels, cfg.n_protos, cfg.proto_dim):
        raise ShapeError(f"prototype matrix shape {pm.shape} does not match config")
    c, d, dh = cfg.feature_dim, cfg.query_dim, cfg.head_dim
    fuse_w = np.concatenate([np.eye(c), _xavier(rng, c + d, c, (d, c))], axis=0)
    raw = {
        "proto.pm": pm.copy(),
        "proto.W_pv": _xavier(rng, cfg.proto_dim, cfg.proj_dim),
        "proto.W_v": _xavier(rng, c, d),
        "proto.W_p": _xavier(rng, cfg.proj_dim, d),
        "proto.W_e": _xavier(rng, dh, dh, (cfg.heads, dh, dh)),
        "proto.fuse_W": fuse_w,
        "proto.fuse_b": np.zeros(c),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def label_mask(labels: np.ndarray) -> np.ndarray:
    """Boolean category mask; an all-zero label vector opens every category."""
    labels = np.asarray(labels)
    mask = labels.astype(bool)
    empty = ~mask.any(axis=-1, keepdims=True)
    return mask | empty


def candidate_mask(mask: np.ndarray, n_protos: int) -> np.ndarray:
    """Expand a category mask ``[..., N_l]`` to flattened prototype slots ``[..., N_l * N_p]``."""
    return np.repeat(np.asarray(mask, dtype=bool), n_protos, axis=-1)


def select_category_prototypes(pm: Tensor, mask) -> tuple[Tensor, np.ndarray]:
    """Rows ``PM(k, i)`` for every k with ``mask[k]``, plus their ``(k, i)`` provenance."""
    mask = np.asarray(mask, dtype=bool)
    n_labels, n_protos, dim = pm.shape
    if mask.shape != (n_labels,):
        raise ShapeError(f"mask shape {mask.shape} does not match {n_labels} categories")
    if not mask.any():
        raise ContractError("label mask is empty; no candidate prototypes")
    cats = np.flatnonzero(mask)
    flat = np.concatenate([k * n_protos + np.arange(n_protos) for k in cats])
    provenance = np.stack([flat // n_protos, flat % n_protos], axis=1)
    return ops.reshape(pm, (n_labels * n_protos, dim))[flat], provenance


def project_candidates(candidates: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``p* = (pv W_pv) W_p``."""
    return ops.linear(ops.linear(candidates, params["proto.W_pv"]), params["proto.W_p"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., T, d] -> [..., h, T, d/h]
    *lead, t, d = x.shape
    x = ops.reshape(x, (*lead, t, heads, d // heads))
    return ops.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., h, T, dh] -> [..., T, h*dh]
    x = ops.swapaxes(x, -2, -3)
    *lead, t, h, dh = x.shape
    return ops.reshape(x, (*lead, t, h * dh))


def query(features, candidates: Tensor, params: dict[str, Tensor], heads: int = 1, projected: Tensor | None = None) -> Tensor:
    """Per-head similarities ``(v W_v) . p* / d_head`` between features and candidates."""
    features = ops.as_tensor(features)
    if len(candidates.shape) != 2 or candidates.shape[0] == 0:
        raise ContractError("query needs a non-empty [M, D] candidate matrix")
    w_v = params["proto.W_v"]
    if features.shape[-1] != w_v.shape[0]:
        raise ShapeError(f"feature width {features.shape[-1]} does not match W_v {w_v.shape}")
    p_star = project_candidates(candidates, params) if projected is None else projected
    v_star = ops.linear(features, w_v)
    d_head = v_star.shape[-1] // heads
    vh = _split_heads(v_star, heads)  # [..., h, N, dh]
    ph = _split_heads(p_star, heads)  # [h, M, dh]
    return ops.mul(ops.matmul(vh, ops.swapaxes(ph, -1, -2)), 1.0 / d_head)


def select_top(sims: np.ndarray, gamma: int, allowed: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ``gamma`` largest similarities per row, ties to the lowest index.

    ``allowed`` (``[..., M]`` over the batch prefix, broadcast across heads
    and positions) removes candidates; if fewer than ``gamma`` remain, all of
    them are used and the index array is padded with -1.
    """
    sims = np.asarray(sims)
    if gamma < 1:
        raise ContractError("gamma must be >= 1")
    g = min(gamma, sims.shape[-1])
    neg = -sims
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        allowed = allowed.reshape(allowed.shape[:-1] + (1,) * (sims.ndim - allowed.ndim) + allowed.shape[-1:])
        neg = np.where(allowed, neg, np.inf)
    idx = np.argpartition(neg, g - 1, axis=-1)[..., :g]
    picked = np.take_along_axis(neg, idx, axis=-1)
    kth = picked.max(axis=-1, keepdims=True)
    tied = (neg <= kth).sum(axis=-1) > g
    if tied.any():
        # a boundary tie (or too few allowed candidates): settle it by index
        idx[tied] = np.argsort(neg[tied], axis=-1, kind="stable")[..., :g]
        picked = np.take_along_axis(neg, idx, axis=-1)
    order = np.lexsort((idx, picked), axis=-1)
    idx = np.take_along_axis(idx, order, axis=-1)
    valid = np.isfinite(np.take_along_axis(neg, idx, axis=-1))
    return np.where(valid, idx, -1)


@dataclass
class QueryResult:
    indices: np.ndarray  # [..., h, N, gamma] candidate indices, -1 padded
    weights: np.ndarray  # [..., h, N, gamma]
    weight_tensor: Tensor  # [..., h, N, gamma]
    responses: Tensor  # [..., N, d]


def normalize_weights(picked: Tensor, valid: np.ndarray, normalizer: str = "softmax") -> Tensor:
    """Turn the selected similarities into per-position weights."""
    if normalizer == "softmax":
        return ops.masked_softmax(picked, valid, axis=-1)
    if normalizer == "literal-linear":
        num = ops.mul(picked, valid.astype(np.float64))
        den = ops.sum(num, axis=-1, keepdims=True)
        small = np.abs(den.data) < DIV_EPS
        guarded = ops.add(ops.mul(den, (~small).astype(np.float64)), small * DIV_EPS)
        return ops.div(num, guarded)
    raise ContractError(f"unknown normalizer {normalizer!r}")


def topk_respond(
    sims: Tensor,
    candidates: Tensor,
    gamma: int,
    params: dict[str, Tensor],
    normalizer: str = "softmax",
    allowed: np.ndarray | None = None,
    selection: np.ndarray | None = None,
    projected: Tensor | None = None,
) -> QueryResult:
    """Weight the top-gamma candidates per position and sum their transforms.

    ``selection`` replays a previous index choice instead of recomputing it,
    which keeps the selection fixed under finite-difference probing.
    """
    heads, m = sims.shape[-3], sims.shape[-1]
    indices = select_top(sims.data, gamma, allowed) if selection is None else np.asarray(selection)
    valid = indices >= 0
    weights = normalize_weights(ops.gather_last(sims, indices), valid, normalizer)
    dense = ops.scatter_last(weights, indices, m)
    p_star = project_candidates(candidates, params) if projected is None else projected
    transformed = ops.matmul(_split_heads(p_star, heads), params["proto.W_e"])  # [h, M, dh]
    responses = _merge_heads(ops.matmul(dense, transformed))
    return QueryResult(indices, np.where(valid, weights.data, 0.0), weights, responses)


def fuse(features, responses: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Linear layer over ``concat(feature, response)`` at each position."""
    features = ops.as_tensor(features)
    if features.shape[:-1] != responses.shape[:-1]:
        raise ShapeError(f"fuse length mismatch: features {features.shape} vs responses {responses.shape}")
    return ops.linear(ops.concat([features, responses], axis=-1), params["proto.fuse_W"], params["proto.fuse_b"])


def prototype_stream(
    features,
    params: dict[str, Tensor],
    cfg: ProtoNetConfig,
    category_mask: np.ndarray,
    selection: np.ndarray | None = None,
) -> tuple[QueryResult, Tensor]:
    """Batched query -> respond -> fuse against the full prototype matrix.

    ``category_mask`` is ``[B, N_l]`` (or ``[N_l]``); each row restricts the
    candidates of its sample.
    """
    pm = params["proto.pm"]
    n_labels, n_protos, dim = pm.shape
    candidates = ops.reshape(pm, (n_labels * n_protos, dim))
    p_star = project_candidates(candidates, params)
    sims = query(features, candidates, params, cfg.heads, projected=p_star)
    allowed = candidate_mask(category_mask, n_protos)
    if allowed.ndim == 2:
        allowed = allowed[:, None, None, :]
    result = topk_respond(
        sims, candidates, cfg.gamma, params, cfg.normalizer, allowed=allowed, selection=selection, projected=p_star
    )
    return result, fuse(features, result.responses, params)
