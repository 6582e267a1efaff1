"""Pre-norm transformer encoder-decoder over fused visual/textual sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ContractError, Tensor, ops


class VocabError(ContractError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    d_ff: int = 64
    max_len: int = 48
    dropout: float = 0.1
    n_patches: int = 16

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ContractError(f"d_model {self.d_model} is not divisible by heads {self.heads}")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_seq_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, ff = cfg.d_model, cfg.d_ff
    raw: dict[str, np.ndarray] = {"seq.embed": rng.normal(size=(cfg.vocab_size, d))}

    def dense(name, fan_in, fan_out):
        raw[name] = rng.normal(scale=np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))

    def norm(name):
        raw[name + "_g"] = np.ones(d)
        raw[name + "_b"] = np.zeros(d)

    def attn(prefix):
        for w in ("q", "k", "v", "o"):
            dense(f"{prefix}.W{w}", d, d)

    def ffn(prefix):
        dense(f"{prefix}.W1", d, ff)
        raw[f"{prefix}.b1"] = np.zeros(ff)
        dense(f"{prefix}.W2", ff, d)
        raw[f"{prefix}.b2"] = np.zeros(d)

    for layer in range(cfg.layers):
        p = f"seq.enc{layer}"
        norm(p + ".ln1")
        attn(p + ".self")
        norm(p + ".ln2")
        ffn(p + ".ffn")
    for layer in range(cfg.layers):
        p = f"seq.dec{layer}"
        norm(p + ".ln1")
        attn(p + ".self")
        norm(p + ".ln2")
        attn(p + ".cross")
        norm(p + ".ln3")
        ffn(p + ".ffn")
    norm("seq.enc_ln")
    norm("seq.dec_ln")
    # small output weights keep the untrained distribution close to uniform
    raw["seq.out_W"] = rng.normal(scale=0.02, size=(d, cfg.vocab_size))
    raw["seq.out_b"] = np.zeros(cfg.vocab_size)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def _ln(x, params, name):
    return ops.layer_norm(x, params[name + "_g"], params[name + "_b"])


def _heads(x: Tensor, h: int) -> Tensor:
    b, t, d = x.shape
    return ops.swapaxes(ops.reshape(x, (b, t, h, d // h)), 1, 2)


def _unheads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ops.reshape(ops.swapaxes(x, 1, 2), (b, t, h * dh))


def multi_head_attention(x_q, x_kv, params, prefix: str, heads: int, keep=None, trace: dict | None = None) -> Tensor:
    q = _heads(ops.linear(x_q, params[prefix + ".Wq"]), heads)
    k = _heads(ops.linear(x_kv, params[prefix + ".Wk"]), heads)
    v = _heads(ops.linear(x_kv, params[prefix + ".Wv"]), heads)
    if trace is not None:
        scores = q.data @ np.swapaxes(k.data, -1, -2) / np.sqrt(q.shape[-1])
        if keep is not None:
            scores = np.where(keep, scores, -np.inf)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        trace[prefix] = e / e.sum(axis=-1, keepdims=True)  # [B, h, Tq, Tk]
    return ops.linear(_unheads(ops.attention(q, k, v, keep)), params[prefix + ".Wo"])


def _ffn(x, params, prefix):
    h = ops.relu(ops.linear(x, params[prefix + ".W1"], params[prefix + ".b1"]))
    return ops.linear(h, params[prefix + ".W2"], params[prefix + ".b2"])


def _batched(x) -> tuple[Tensor, bool]:
    x = ops.as_tensor(x)
    if x.ndim == 2:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def embed_report(tokens, params, cfg: ModelConfig) -> Tensor:
    """Token embeddings plus sinusoidal positions; ``[T]`` -> ``[T, C]`` or ``[B, T]`` -> ``[B, T, C]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise VocabError(f"token id out of range for vocabulary of size {cfg.vocab_size}")
    t = tokens.shape[-1]
    if t > cfg.max_len:
        raise ContractError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    emb = ops.embedding(params["seq.embed"], tokens)
    return ops.add(emb, sinusoidal_positions(t, cfg.d_model))


def encode(l_s, params, cfg: ModelConfig, rng=None, use_positions: bool = True) -> Tensor:
    x, squeeze = _batched(l_s)
    if use_positions:
        x = ops.add(x, sinusoidal_positions(x.shape[1], cfg.d_model))
    rate = cfg.dropout if rng is not None else 0.0
    for layer in range(cfg.layers):
        p = f"seq.enc{layer}"
        h = _ln(x, params, p + ".ln1")
        x = ops.add(x, ops.dropout(multi_head_attention(h, h, params, p + ".self", cfg.heads), rate, rng))
        h = _ln(x, params, p + ".ln2")
        x = ops.add(x, ops.dropout(_ffn(h, params, p + ".ffn"), rate, rng))
    x = _ln(x, params, "seq.enc_ln")
    return ops.reshape(x, x.shape[1:]) if squeeze else x


def decode(memory, l_t, params, cfg: ModelConfig, rng=None, trace: dict | None = None) -> Tensor:
    """Logits for every prefix position under a causal mask.

    If ``trace`` is a dict, the attention weights of every block are stored in
    it under the block's parameter prefix (e.g. ``seq.dec1.cross``).
    """
    m, _ = _batched(memory)
    x, squeeze = _batched(l_t)
    t = x.shape[1]
    if t == 0:
        raise ContractError("decoder prefix must be non-empty")
    if t > cfg.max_len:
        raise ContractError(f"prefix length {t} exceeds max_len {cfg.max_len}")
    keep = ops.causal_mask(t)
    rate = cfg.dropout if rng is not None else 0.0
    for layer in range(cfg.layers):
        p = f"seq.dec{layer}"
        h = _ln(x, params, p + ".ln1")
        x = ops.add(x, ops.dropout(multi_head_attention(h, h, params, p + ".self", cfg.heads, keep, trace), rate, rng))
        h = _ln(x, params, p + ".ln2")
        x = ops.add(x, ops.dropout(multi_head_attention(h, m, params, p + ".cross", cfg.heads, None, trace), rate, rng))
        h = _ln(x, params, p + ".ln3")
        x = ops.add(x, ops.dropout(_ffn(h, params, p + ".ffn"), rate, rng))
    x = _ln(x, params, "seq.dec_ln")
    logits = ops.linear(x, params["seq.out_W"], params["seq.out_b"])
    return ops.reshape(logits, logits.shape[1:]) if squeeze else logits


def decode_step(memory, l_t_prefix, params, cfg: ModelConfig) -> Tensor:
    """Next-token distribution after the given (fused) prefix."""
    logits = decode(memory, l_t_prefix, params, cfg)
    return ops.softmax(logits[..., -1, :], axis=-1)
