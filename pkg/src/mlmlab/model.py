"""Encoder building blocks: embeddings, key-blocked attention, transformer stack.

Attention masking semantics used throughout the lab: a position in
`key_block` is removed as an attention *key* (its column of logits gets a
-1e9 additive term, which softmax turns into an exactly-zero weight), while
its *query* row stays active.  Blocked content therefore cannot leak into
any other position's output.
"""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .tensor import (NEG_BLOCK, ParamStore, Tensor, add, dropout, gather_rows,
                     gelu, layer_norm, matmul, reshape, scale, softmax_rows,
                     transpose)

__all__ = ["embed", "multi_head_attention", "transformer_block", "encoder_forward"]


def embed(params: ParamStore, ids: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Token + position + segment embedding, then LayerNorm. ids: int[s]."""
    ids = np.asarray(ids)
    s = ids.shape[0]
    if s > cfg.max_seq_len:
        raise ValueError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size:
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >= cfg.vocab_size:
            bad = int(np.argmax((ids < 0) | (ids >= cfg.vocab_size)))
            raise ValueError(f"token id {int(ids[bad])} at position {bad} outside "
                             f"vocab of size {cfg.vocab_size}")
    tok = gather_rows(params["embed.tok"], ids)
    pos = gather_rows(params["embed.pos"], np.arange(s))
    seg = gather_rows(params["embed.seg"], np.zeros(s, dtype=np.int64))  # one segment
    x = add(add(tok, pos), seg)
    return layer_norm(x, params["embed.ln.gamma"], params["embed.ln.beta"])


def multi_head_attention(params: ParamStore, prefix: str, x: Tensor,
                         key_block: np.ndarray, cfg: ModelConfig,
                         capture: list | None = None,
                         drop_rng: np.random.Generator | None = None,
                         attn_dropout: float = 0.0) -> Tensor:
    """Multi-head self-attention over x[s, h]; key_block[s] marks blocked keys."""
    key_block = np.asarray(key_block, dtype=bool)
    s = x.shape[0]
    if key_block.shape != (s,):
        raise ValueError(f"key_block must be bool[{s}], got {key_block.shape}")
    if key_block.all():
        raise ValueError("every attention key is blocked; at least one must remain")
    nh, d = cfg.heads, cfg.head_size

    def heads(name: str) -> Tensor:
        p = add(matmul(x, params[f"{prefix}.attn.w{name}"]),
                params[f"{prefix}.attn.b{name}"])
        return transpose(reshape(p, (s, nh, d)), (1, 0, 2))  # [nh, s, d]

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    block = np.where(key_block, NEG_BLOCK, 0.0).astype(x.dtype)
    weights = softmax_rows(add(scores, block))  # block broadcasts over key axis
    if capture is not None:
        capture.append((prefix, np.array(weights.data)))
    if attn_dropout > 0.0:
        weights = dropout(weights, attn_dropout, drop_rng)
    ctx = reshape(transpose(matmul(weights, v), (1, 0, 2)), (s, nh * d))
    return add(matmul(ctx, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])


def _ffn(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    h1 = gelu(add(matmul(x, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
    return add(matmul(h1, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])


def transformer_block(params: ParamStore, prefix: str, x: Tensor,
                      key_block: np.ndarray, cfg: ModelConfig,
                      capture: list | None = None,
                      drop_rng: np.random.Generator | None = None,
                      attn_dropout: float = 0.0,
                      hidden_dropout: float = 0.0) -> Tensor:
    """One attention + FFN block with residuals; LN placement per config.

    post: x = LN(x + Attn(x)); x = LN(x + FFN(x))   (classic)
    pre:  x = x + Attn(LN(x)); x = x + FFN(LN(x))
    Both placements use the same two LN parameter pairs, so checkpoints keep
    one name set regardless of wiring.
    """
    ln1g, ln1b = params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"]
    ln2g, ln2b = params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"]

    def drop(t: Tensor) -> Tensor:
        if hidden_dropout > 0.0:
            return dropout(t, hidden_dropout, drop_rng)
        return t

    if cfg.ln_placement == "post":
        a = multi_head_attention(params, prefix, x, key_block, cfg, capture,
                                 drop_rng, attn_dropout)
        h = layer_norm(add(x, drop(a)), ln1g, ln1b)
        f = _ffn(params, prefix, h)
        return layer_norm(add(h, drop(f)), ln2g, ln2b)
    a = multi_head_attention(params, prefix, layer_norm(x, ln1g, ln1b), key_block,
                             cfg, capture, drop_rng, attn_dropout)
    h = add(x, drop(a))
    f = _ffn(params, prefix, layer_norm(h, ln2g, ln2b))
    return add(h, drop(f))


def encoder_forward(params: ParamStore, x: Tensor, key_block: np.ndarray,
                    cfg: ModelConfig, capture: list | None = None,
                    drop_rng: np.random.Generator | None = None,
                    attn_dropout: float = 0.0,
                    hidden_dropout: float = 0.0) -> Tensor:
    """Run the encoder stack; a 0-layer encoder is the identity."""
    for i in range(cfg.encoder_layers):
        x = transformer_block(params, f"encoder.layer.{i}", x, key_block, cfg,
                              capture, drop_rng, attn_dropout, hidden_dropout)
    return x
