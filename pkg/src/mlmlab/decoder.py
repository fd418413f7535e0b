"""Pretraining-only decoder: gradual key unmasking, output mixing, MLM head.

The decoder is a stack of blocks shaped exactly like encoder blocks, run
after the encoder and dropped before finetuning.  Its difference is the
attention key-block: a per-forward unmasking plan progressively removes
masked positions from the block so later decoder layers can attend to them.
Padding stays blocked everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import MaskedBatch, make_base_key_block
from .model import embed, encoder_forward, transformer_block
from .tensor import ParamStore, Tensor, add, cross_entropy_masked, gelu, \
    layer_norm, matmul, scale, transpose

__all__ = ["UnmaskPlan", "plan_unmasking", "decoder_forward", "mix_outputs",
           "mlm_head", "pretrain_forward_loss", "StepDiagnostics"]


def _ceil_count(rate: float, m: int) -> int:
    # guard against float noise pushing an exactly-integer rate*m up by one
    # (e.g. 0.1*30 = 3.0000000000000004); 1e-9 << any real fractional part
    return math.ceil(rate * m - 1e-9)


@dataclass(frozen=True)
class UnmaskPlan:
    """Per-decoder-layer key-unblock sets. layers[j][p] is True when masked
    position p is visible as a key inside decoder layer j (0-based)."""
    layers: tuple[np.ndarray, ...]

    def counts(self) -> tuple[int, ...]:
        return tuple(int(v.sum()) for v in self.layers)


def plan_unmasking(masked: np.ndarray, schedule: tuple[tuple[int, float], ...],
                   decoder_layers: int, rng: np.random.Generator) -> UnmaskPlan:
    """Draw one unmasking plan from a single shared permutation.

    schedule entries are (1-based decoder layer, cumulative rate); a layer
    with rate r unmasks the first ceil(r*m) positions of the permutation,
    unscheduled layers inherit the most recent set (empty before the first).
    Prefixes of one permutation make the per-layer sets nested by design.
    """
    masked = np.asarray(masked, dtype=bool)
    for k, rate in schedule:
        if not 1 <= k <= decoder_layers:
            raise ValueError(f"schedule index {k} outside [1, {decoder_layers}]")
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"schedule rate {rate} outside [0, 1]")
    positions = np.flatnonzero(masked)
    m = positions.size
    perm = positions[rng.permutation(m)]
    by_layer = dict(schedule)
    layers = []
    current = np.zeros(masked.shape, dtype=bool)
    for k in range(1, decoder_layers + 1):
        if k in by_layer:
            current = np.zeros(masked.shape, dtype=bool)
            current[perm[:_ceil_count(by_layer[k], m)]] = True
        layers.append(current.copy())
    return UnmaskPlan(tuple(layers))


def decoder_forward(params: ParamStore, h_enc: Tensor, base_block: np.ndarray,
                    plan: UnmaskPlan, cfg: ModelConfig,
                    capture: list | None = None,
                    drop_rng: np.random.Generator | None = None,
                    attn_dropout: float = 0.0,
                    hidden_dropout: float = 0.0) -> Tensor:
    """Run the decoder stack on encoder output; 0 layers is the identity."""
    if len(plan.layers) != cfg.decoder_layers:
        raise ValueError(f"plan covers {len(plan.layers)} layers, "
                         f"config has {cfg.decoder_layers}")
    x = h_enc
    for j in range(cfg.decoder_layers):
        block_j = np.asarray(base_block, dtype=bool) & ~plan.layers[j]
        x = transformer_block(params, f"decoder.layer.{j}", x, block_j, cfg,
                              capture, drop_rng, attn_dropout, hidden_dropout)
    return x


def mix_outputs(h_enc: Tensor, h_dec: Tensor, p_decoder: float,
                rng: np.random.Generator) -> tuple[Tensor, int]:
    """Per-sequence stochastic selection (not a blend): the whole sequence
    uses the decoder output with probability p_decoder, else the encoder's.
    Returns (hidden, draw) with draw=1 for decoder."""
    if h_enc.shape != h_dec.shape:
        raise ValueError(f"mix shape mismatch: {h_enc.shape} vs {h_dec.shape}")
    if not 0.0 <= p_decoder <= 1.0:
        raise ValueError(f"p_decoder must lie in [0, 1], got {p_decoder}")
    draw = 1 if rng.random() < p_decoder else 0
    return (h_dec if draw else h_enc), draw


def mlm_head(params: ParamStore, h: Tensor) -> Tensor:
    """LayerNorm(GELU(h W + b)) E^T + bias; output projection tied to the
    token embedding, which therefore receives gradient from both uses."""
    t = add(matmul(h, params["mlm.transform.w"]), params["mlm.transform.b"])
    t = layer_norm(gelu(t), params["mlm.ln.gamma"], params["mlm.ln.beta"])
    return add(matmul(t, transpose(params["embed.tok"])), params["mlm.out_bias"])


@dataclass
class StepDiagnostics:
    loss: float
    losses: list[float]                    # per sequence
    mix_draws: list[int | None]            # None when no decoder
    unmask_counts: list[tuple[int, ...]]   # per sequence, per decoder layer
    n_masked: list[int]


def pretrain_forward_loss(batch: MaskedBatch, params: ParamStore,
                          cfg: ModelConfig, hub, step: int,
                          attn_dropout: float = 0.0,
                          hidden_dropout: float = 0.0
                          ) -> tuple[Tensor, StepDiagnostics]:
    """Full pretraining forward for one batch: encoder -> (decoder+mix) -> head.

    With decoder_layers = 0 no plan is drawn and no mix draw is consumed, so
    the computation is operation-for-operation the plain encoder pretrainer.
    Per-sequence randomness comes from substreams keyed by (step, slot).
    """
    schedule = cfg.unmask_schedule()
    losses, diags = [], StepDiagnostics(0.0, [], [], [], [])
    for i in range(batch.size):
        seq = batch.sequence(i)
        base = make_base_key_block(seq.masked, seq.pad)
        drop_rng = (hub.generator("dropout", step, i)
                    if (attn_dropout or hidden_dropout) else None)
        x = embed(params, seq.input_ids, cfg)
        h_enc = encoder_forward(params, x, base, cfg, None, drop_rng,
                                attn_dropout, hidden_dropout)
        if cfg.decoder_layers > 0:
            plan = plan_unmasking(seq.masked, schedule, cfg.decoder_layers,
                                  hub.generator("gua", step, i))
            h_dec = decoder_forward(params, h_enc, base, plan, cfg, None,
                                    drop_rng, attn_dropout, hidden_dropout)
            h_out, draw = mix_outputs(h_enc, h_dec, cfg.mix_decoder_prob,
                                      hub.generator("mix", step, i))
            diags.mix_draws.append(draw)
            diags.unmask_counts.append(plan.counts())
        else:
            h_out = h_enc
            diags.mix_draws.append(None)
            diags.unmask_counts.append(())
        logits = mlm_head(params, h_out)
        active = seq.labels >= 0
        loss_i = cross_entropy_masked(logits, seq.labels, active)
        losses.append(loss_i)
        diags.losses.append(loss_i.item())
        diags.n_masked.append(int(active.sum()))

    total = losses[0]
    for li in losses[1:]:
        total = add(total, li)
    loss = scale(total, 1.0 / len(losses))
    diags.loss = loss.item()
    return loss, diags
