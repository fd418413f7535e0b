"""Attention heatmap CSV dumps for mask-soundness eyeballing.

CSV layout (all rows have s cells):
  row 1: column key-position labels p0..p{s-1}
  row 2: per-position annotation: masked / unmasked / normal / pad
         ("unmasked" = a masked position whose key-block this layer lifted)
  rows 3..s+2: attention weights, 6 significant digits, query rows top-down.
"""
from __future__ import annotations

import numpy as np

from .checkpoint import Checkpoint
from .config import parse_config_text
from .data import MaskingPolicy, apply_mlm_masking, encode_line, make_base_key_block
from .decoder import decoder_forward, plan_unmasking, UnmaskPlan
from .model import embed, encoder_forward
from .rng import RngHub
from .train import params_to_store
from .data import Vocab

__all__ = ["attn_heatmap", "write_heatmap_csv"]


def attn_heatmap(ck: Checkpoint, vocab: Vocab, text: str, stack: str,
                 layer: int, head: int | str, apply_unmasking: bool,
                 seed: int, policy: MaskingPolicy = MaskingPolicy(),
                 seq_len: int | None = None):
    """Return (weights[s,s], annotations[s]) for one layer of one input line.

    stack is "encoder" or "decoder" (layer is 0-based within the stack);
    head is an int or "avg".  Masking is applied with the given seed; the
    unmasking plan is drawn only when apply_unmasking is true.
    """
    cfg = parse_config_text(ck.config_text).model
    params = params_to_store(ck.params)
    hub = RngHub(seed)
    s = seq_len or cfg.max_seq_len
    ids = encode_line(text, vocab, s)
    seq = apply_mlm_masking(ids, vocab.size, policy, hub.generator("masking", 0))
    base = make_base_key_block(seq.masked, seq.pad)

    n_layers = {"encoder": cfg.encoder_layers, "decoder": cfg.decoder_layers}
    if stack not in n_layers:
        raise ValueError(f"stack must be 'encoder' or 'decoder', got {stack!r}")
    if not 0 <= layer < n_layers[stack]:
        raise ValueError(f"{stack} layer {layer} outside [0, {n_layers[stack]})")

    capture: list = []
    h = encoder_forward(params, embed(params, seq.input_ids, cfg), base, cfg,
                        capture=capture)
    plan = UnmaskPlan(tuple(np.zeros(s, dtype=bool)
                            for _ in range(cfg.decoder_layers)))
    if stack == "decoder":
        if apply_unmasking:
            plan = plan_unmasking(seq.masked, cfg.unmask_schedule(),
                                  cfg.decoder_layers, hub.generator("gua", 0))
        decoder_forward(params, h, base, plan, cfg, capture=capture)
        weights = capture[cfg.encoder_layers + layer][1]
        lifted = plan.layers[layer]
    else:
        weights = capture[layer][1]
        lifted = np.zeros(s, dtype=bool)

    if head == "avg":
        w = weights.mean(axis=0)
    else:
        head = int(head)
        if not 0 <= head < cfg.heads:
            raise ValueError(f"head {head} outside [0, {cfg.heads})")
        w = weights[head]

    notes = np.where(seq.pad, "pad",
                     np.where(seq.masked & lifted, "unmasked",
                              np.where(seq.masked, "masked", "normal")))
    return w, list(notes)


def write_heatmap_csv(path: str, weights: np.ndarray, notes: list[str]) -> None:
    s = weights.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"p{i}" for i in range(s)) + "\n")
        fh.write(",".join(notes) + "\n")
        for row in weights:
            fh.write(",".join(f"{x:.6g}" for x in row) + "\n")
