"""Analytic FLOP estimates per training/inference data point (one sequence).

Conventions (also printed in every report header):
  * 1 multiply-accumulate = 2 FLOPs.
  * per transformer layer, forward:
        8*s*h^2  (Q/K/V/output projections)
      + 4*s^2*h  (attention scores + weighted context)
      + 4*s*h*f  (two FFN matmuls, f = ffn inner width)
  * MLM head, forward, applied to the sm = ceil(0.15*s) masked positions
    (gathered-head convention): 2*sm*h^2 + 2*sm*h*V.
  * backward = 2x forward; LayerNorm/softmax/bias/embedding-lookup terms are
    excluded as sub-percent noise.

Phases:
  pretrain : fwd+bwd through encoder + decoder + MLM head
  finetune : fwd+bwd through the encoder only (the decoder is dropped at
             export); `finetune_decoder_retained` reports the
             what-if-the-decoder-were-kept alternative because published
             per-step finetune FLOP tables sometimes include it even while
             wall-clock tables show +0.0%
  inference: forward only, encoder only
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ModelConfig

__all__ = ["FlopsReport", "flops_estimate", "PHASES"]

PHASES = ("pretrain", "finetune", "inference")
MASK_RATE = 0.15


def _layer_forward(s: int, h: int, f: int) -> int:
    return 8 * s * h * h + 4 * s * s * h + 4 * s * h * f


def _head_forward(s: int, h: int, vocab: int) -> int:
    sm = math.ceil(MASK_RATE * s)
    return 2 * sm * h * h + 2 * sm * h * vocab


@dataclass(frozen=True)
class FlopsReport:
    seq_len: int
    phase: str
    breakdown: dict[str, int]   # forward-pass pieces
    totals: dict[str, int]      # every phase (+ the retained-decoder variant)

    @property
    def total(self) -> int:
        return self.totals[self.phase]

    def ratios_vs(self, baseline: "FlopsReport") -> dict[str, float]:
        return {k: self.totals[k] / baseline.totals[k] for k in self.totals}

    def format(self, baseline: "FlopsReport | None" = None) -> str:
        lines = [
            "# flop model: 2 flops per MAC; backward = 2x forward",
            "# layer fwd = 8*s*h^2 + 4*s^2*h + 4*s*h*ffn;"
            " mlm head fwd = 2*sm*h^2 + 2*sm*h*V at sm = ceil(0.15*s) masked positions",
            f"seq_len: {self.seq_len}",
            f"phase: {self.phase}",
        ]
        for k in sorted(self.breakdown):
            lines.append(f"forward.{k}: {self.breakdown[k]}")
        for k in ("pretrain", "finetune", "finetune_decoder_retained", "inference"):
            lines.append(f"total.{k}: {self.totals[k]}")
        if baseline is not None:
            r = self.ratios_vs(baseline)
            for k in ("pretrain", "finetune", "finetune_decoder_retained", "inference"):
                lines.append(f"ratio.{k}: {r[k]:.6f}")
        return "\n".join(lines) + "\n"


def flops_estimate(cfg: ModelConfig, phase: str, seq_len: int) -> FlopsReport:
    """Estimate per-sequence FLOPs for a phase; totals carry all phases so one
    report answers ratio questions too."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    if seq_len < 1 or seq_len > cfg.max_seq_len:
        raise ValueError(f"seq_len must lie in [1, {cfg.max_seq_len}], got {seq_len}")
    s, h, f = seq_len, cfg.hidden, cfg.ffn
    enc = cfg.encoder_layers * _layer_forward(s, h, f)
    dec = cfg.decoder_layers * _layer_forward(s, h, f)
    head = _head_forward(s, h, cfg.vocab_size)
    breakdown = {
        "encoder_layer": _layer_forward(s, h, f),
        "encoder_stack": enc,
        "decoder_stack": dec,
        "mlm_head": head,
    }
    totals = {
        "pretrain": 3 * (enc + dec + head),
        "finetune": 3 * enc,
        "finetune_decoder_retained": 3 * (enc + dec),
        "inference": enc,
    }
    return FlopsReport(seq_len=s, phase=phase, breakdown=breakdown, totals=totals)
