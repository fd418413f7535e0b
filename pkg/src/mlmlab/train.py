"""Training loop, optimizer, initialisation, export, finetuning, cloze eval."""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, ModelConfig, canonical_text, parse_config_text
from .data import (BatchStream, MaskingPolicy, NoMaskableTokens, Vocab,
                   apply_mlm_masking, build_vocab, encode_line,
                   make_base_key_block)
from .decoder import decoder_forward, mlm_head, plan_unmasking, pretrain_forward_loss
from .model import embed, encoder_forward
from .rng import RngHub
from .tensor import (GradGraph, ParamStore, Tensor, add, cross_entropy_masked,
                     gather_rows, matmul, scale, transpose)

__all__ = [
    "NonFiniteGradient", "TrainState", "init_params", "lr_schedule",
    "adam_step", "pretrain", "PretrainResult", "export_encoder",
    "export_encoder_file", "finetune_classify", "FinetuneTask",
    "FinetuneResult", "evaluate_cloze", "ClozeResult", "params_to_store",
]

INIT_STD = 0.02


class NonFiniteGradient(ValueError):
    def __init__(self, param: str):
        super().__init__(f"non-finite gradient for parameter {param!r}; step rejected")
        self.param = param


def _trunc_normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """N(0, 0.02) truncated to +-2 sigma by resampling (deterministic per rng)."""
    out = rng.normal(0.0, INIT_STD, size=shape)
    bad = np.abs(out) > 2 * INIT_STD
    while bad.any():
        out[bad] = rng.normal(0.0, INIT_STD, size=int(bad.sum()))
        bad = np.abs(out) > 2 * INIT_STD
    return out.astype(dtype)


def _init_block(store: ParamStore, prefix: str, cfg: ModelConfig,
                rng: np.random.Generator, dtype) -> None:
    h, f = cfg.hidden, cfg.ffn
    for n in "qkvo":
        store.add(f"{prefix}.attn.w{n}", _trunc_normal(rng, (h, h), dtype))
        store.add(f"{prefix}.attn.b{n}", np.zeros(h, dtype=dtype))
    store.add(f"{prefix}.ln1.gamma", np.ones(h, dtype=dtype))
    store.add(f"{prefix}.ln1.beta", np.zeros(h, dtype=dtype))
    store.add(f"{prefix}.ffn.w1", _trunc_normal(rng, (h, f), dtype))
    store.add(f"{prefix}.ffn.b1", np.zeros(f, dtype=dtype))
    store.add(f"{prefix}.ffn.w2", _trunc_normal(rng, (f, h), dtype))
    store.add(f"{prefix}.ffn.b2", np.zeros(h, dtype=dtype))
    store.add(f"{prefix}.ln2.gamma", np.ones(h, dtype=dtype))
    store.add(f"{prefix}.ln2.beta", np.zeros(h, dtype=dtype))


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                with_mlm_head: bool = True) -> ParamStore:
    """Fresh parameters in a fixed draw order: embeddings, encoder layers,
    decoder layers, MLM head.  Matrices are truncated-normal(0.02), biases
    zero, LN gains one.  The segment table is zero (single-segment corpus)."""
    h = cfg.hidden
    store = ParamStore()
    store.add("embed.tok", _trunc_normal(rng, (cfg.vocab_size, h), dtype))
    store.add("embed.pos", _trunc_normal(rng, (cfg.max_seq_len, h), dtype))
    store.add("embed.seg", np.zeros((2, h), dtype=dtype))
    store.add("embed.ln.gamma", np.ones(h, dtype=dtype))
    store.add("embed.ln.beta", np.zeros(h, dtype=dtype))
    for i in range(cfg.encoder_layers):
        _init_block(store, f"encoder.layer.{i}", cfg, rng, dtype)
    for j in range(cfg.decoder_layers):
        _init_block(store, f"decoder.layer.{j}", cfg, rng, dtype)
    if with_mlm_head:
        store.add("mlm.transform.w", _trunc_normal(rng, (h, h), dtype))
        store.add("mlm.transform.b", np.zeros(h, dtype=dtype))
        store.add("mlm.ln.gamma", np.ones(h, dtype=dtype))
        store.add("mlm.ln.beta", np.zeros(h, dtype=dtype))
        store.add("mlm.out_bias", np.zeros(cfg.vocab_size, dtype=dtype))
    return store


def params_to_store(arrays: dict[str, np.ndarray]) -> ParamStore:
    store = ParamStore()
    for name in sorted(arrays):
        store.add(name, arrays[name].copy())
    return store


@dataclass
class TrainState:
    params: ParamStore
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int           # completed optimizer steps
    hub: RngHub

    @classmethod
    def fresh(cls, params: ParamStore, hub: RngHub) -> "TrainState":
        zeros = lambda: {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(params, zeros(), zeros(), 0, hub)


def lr_schedule(step: int, total_steps: int, peak_lr: float,
                warmup_frac: float) -> float:
    """Linear warmup over ceil(frac*total) steps to peak, then linear decay.

    step is 1-based; lr(warmup) = peak and lr decays to peak/(total-warmup)
    at the final step (never exactly zero, so the last step still moves).
    """
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside [1, {total_steps}]")
    warmup = math.ceil(warmup_frac * total_steps)
    if step <= warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step + 1) / (total_steps - warmup)


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> TrainState:
    """One bias-corrected Adam update (in place). All gradients are checked
    finite before anything mutates, so a rejected step leaves state intact."""
    for name in state.params.names():
        if not np.isfinite(grads[name]).all():
            raise NonFiniteGradient(name)
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            upd = upd + weight_decay * p.data
        p.data -= lr * upd
    state.step = t
    return state


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    state: TrainState
    vocab: Vocab
    metrics_path: str
    final_ckpt_path: str
    ckpt_paths: list[str] = field(default_factory=list)


def _metrics_line(step: int, loss: float, lr: float, cfg: ModelConfig,
                  diags) -> str:
    # mix_draw / unmask counts describe the batch's slot-0 sequence
    parts = [f"step={step}", f"loss={loss!r}", f"lr={lr!r}"]
    if cfg.decoder_layers > 0:
        parts.append(f"mix_draw={diags.mix_draws[0]}")
        for k, n in enumerate(diags.unmask_counts[0], start=1):
            parts.append(f"unmask_l{k}={n}")
    return " ".join(parts) + "\n"


def _make_checkpoint(cfg: Config, state: TrainState) -> Checkpoint:
    opt = {}
    for name in state.params.names():
        opt[f"adam.m.{name}"] = state.m[name]
        opt[f"adam.v.{name}"] = state.v[name]
    return Checkpoint(canonical_text(cfg), state.step, state.hub.state_json(),
                      {k: t.data for k, t in state.params.items()}, opt)


def pretrain(cfg: Config, lines: list[str], seed: int, out_dir: str,
             vocab: Vocab | None = None,
             resume_from: str | None = None) -> PretrainResult:
    """Run MLM pretraining; writes metrics.txt, vocab.txt and checkpoints.

    Fully deterministic in (cfg, corpus, seed): metrics and checkpoint files
    are byte-identical across repeated runs.  resume_from continues a saved
    checkpoint bit-exactly (the batch schedule is a pure function of the step
    counter, and rng substreams are derived, not consumed sequentially).
    """
    os.makedirs(out_dir, exist_ok=True)
    mcfg, tcfg = cfg.model, cfg.train
    dtype = tcfg.np_dtype

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        cfg = parse_config_text(ck.config_text, source=resume_from)
        mcfg, tcfg = cfg.model, cfg.train
        dtype = tcfg.np_dtype
        hub = RngHub.from_state_json(ck.rng_json)
        params = params_to_store(ck.params)
        state = TrainState.fresh(params, hub)
        if ck.opt is None:
            raise ValueError(f"{resume_from}: checkpoint has no optimizer state; cannot resume")
        for name in params.names():
            state.m[name] = ck.opt[f"adam.m.{name}"].copy()
            state.v[name] = ck.opt[f"adam.v.{name}"].copy()
        state.step = ck.step
    else:
        hub = RngHub(seed)
        params = init_params(mcfg, hub.generator("init"), dtype, with_mlm_head=True)
        state = TrainState.fresh(params, hub)

    if vocab is None:
        vocab = build_vocab(lines, mcfg.vocab_size)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    policy = MaskingPolicy()
    stream = BatchStream(lines, vocab, policy, tcfg.batch_size,
                         cfg.effective_seq_len(), state.hub)

    metrics_path = os.path.join(out_dir, "metrics.txt")
    ckpt_paths: list[str] = []
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode, encoding="utf-8") as mfh:
        for step in range(state.step + 1, tcfg.steps + 1):
            batch = stream.batch(step - 1)
            params.zero_grads()
            with GradGraph() as g:
                loss, diags = pretrain_forward_loss(
                    batch, params, mcfg, state.hub, step - 1,
                    tcfg.attn_dropout, tcfg.hidden_dropout)
                g.backward(loss)
            lr = lr_schedule(step, tcfg.steps, tcfg.lr, tcfg.warmup_frac)
            adam_step(state, params.grads(), lr, tcfg.adam_beta1,
                      tcfg.adam_beta2, tcfg.adam_eps, tcfg.weight_decay)
            mfh.write(_metrics_line(step, diags.loss, lr, mcfg, diags))
            if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                p = os.path.join(out_dir, f"ckpt_step{step}.bin")
                save_checkpoint(p, _make_checkpoint(cfg, state))
                ckpt_paths.append(p)

    final_path = os.path.join(out_dir, "ckpt_final.bin")
    save_checkpoint(final_path, _make_checkpoint(cfg, state))
    ckpt_paths.append(final_path)
    return PretrainResult(state, vocab, metrics_path, final_path, ckpt_paths)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def export_encoder(ck: Checkpoint) -> Checkpoint:
    """Drop the decoder (and MLM head) from a pretraining checkpoint, leaving
    the embedding + encoder parameter set of a plain encoder of the same
    config.  Idempotent: exporting an exported checkpoint is a no-op."""
    kept = {k: v.copy() for k, v in ck.params.items()
            if k.startswith(("embed.", "encoder."))}
    if not kept:
        raise ValueError("checkpoint has no embedding/encoder parameters")
    cfg = parse_config_text(ck.config_text)
    model = dataclasses.replace(cfg.model, decoder_layers=0, gua_layers=(),
                                gua_rates=(), mix_decoder_prob=0.0)
    text = canonical_text(Config(model, cfg.train))
    return Checkpoint(text, ck.step, ck.rng_json, kept, None)


def export_encoder_file(in_path: str, out_path: str) -> None:
    save_checkpoint(out_path, export_encoder(load_checkpoint(in_path)))


# --------------------------------------------------------------------------
# finetuning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneTask:
    kind: str                  # "classify" is the only kind
    n_labels: int
    lines: tuple[str, ...]     # "<label>\t<space-separated tokens>"
    epochs: int = 5
    lr: float = 3e-4
    batch_size: int = 8

    @classmethod
    def from_file(cls, path: str, n_labels: int, epochs: int = 5,
                  lr: float = 3e-4, batch_size: int = 8) -> "FinetuneTask":
        with open(path, "r", encoding="utf-8") as fh:
            lines = tuple(l.rstrip("\n") for l in fh if l.strip())
        return cls("classify", n_labels, lines, epochs, lr, batch_size)


@dataclass
class FinetuneResult:
    dev_accuracy: float
    graph_signature: str       # tape signature of the first training batch
    params: ParamStore


def _parse_task_line(line: str, n_labels: int, lineno: int) -> tuple[int, str]:
    label_s, sep, text = line.partition("\t")
    if not sep:
        raise ValueError(f"task line {lineno}: expected '<label>\\t<text>'")
    try:
        label = int(label_s)
    except ValueError:
        raise ValueError(f"task line {lineno}: bad label {label_s!r}") from None
    if not 0 <= label < n_labels:
        raise ValueError(f"task line {lineno}: label {label} outside [0, {n_labels})")
    return label, text


def _cls_logits(params: ParamStore, ids: np.ndarray, pad_block: np.ndarray,
                cfg: ModelConfig) -> Tensor:
    h = encoder_forward(params, embed(params, ids, cfg), pad_block, cfg)
    cls_h = gather_rows(h, np.array([0]))
    return add(matmul(cls_h, params["cls.w"]), params["cls.b"])


def finetune_classify(ck: Checkpoint, vocab: Vocab, task: FinetuneTask,
                      seed: int) -> FinetuneResult:
    """Train a fresh linear head on the final-layer [CLS] state (full-model
    finetuning, constant lr, no masking, key_block = padding only).

    Rejects decoder-bearing checkpoints: the decoder must be dropped first.
    Held-out split: every 10th example (i % 10 == 9) is dev.
    """
    if task.kind != "classify":
        raise ValueError(f"unsupported task kind {task.kind!r}")
    bad = [k for k in ck.params if k.startswith("decoder.")]
    if bad:
        raise ValueError(f"checkpoint contains decoder parameters ({bad[0]}, ...); "
                         "run export-encoder before finetuning")
    cfg = parse_config_text(ck.config_text).model
    hub = RngHub(seed)
    dtype = next(iter(ck.params.values())).dtype
    params = params_to_store({k: v for k, v in ck.params.items()
                              if k.startswith(("embed.", "encoder."))})
    irng = hub.generator("init")
    params.add("cls.w", _trunc_normal(irng, (cfg.hidden, task.n_labels), dtype))
    params.add("cls.b", np.zeros(task.n_labels, dtype=dtype))
    state = TrainState.fresh(params, hub)

    examples = []
    for lineno, line in enumerate(task.lines, start=1):
        label, text = _parse_task_line(line, task.n_labels, lineno)
        ids = encode_line(text, vocab, cfg.max_seq_len)
        examples.append((label, ids, ids == 0))
    dev = [e for i, e in enumerate(examples) if i % 10 == 9]
    train = [e for i, e in enumerate(examples) if i % 10 != 9]
    if not train or not dev:
        raise ValueError(f"need at least 10 task examples, got {len(examples)}")

    signature = ""
    for epoch in range(task.epochs):
        order = hub.generator("data", epoch).permutation(len(train))
        for b0 in range(0, len(order), task.batch_size):
            idx = order[b0:b0 + task.batch_size]
            params.zero_grads()
            with GradGraph() as g:
                losses = []
                for j in idx:
                    label, ids, padv = train[j]
                    logits = _cls_logits(params, ids, padv, cfg)
                    losses.append(cross_entropy_masked(
                        logits, np.array([label]), np.array([True])))
                total = losses[0]
                for li in losses[1:]:
                    total = add(total, li)
                loss = scale(total, 1.0 / len(losses))
                if not signature:
                    signature = g.signature()
                g.backward(loss)
            adam_step(state, params.grads(), task.lr)

    hits = 0
    for label, ids, padv in dev:
        logits = _cls_logits(params, ids, padv, cfg)
        hits += int(np.argmax(logits.data[0]) == label)
    return FinetuneResult(hits / len(dev), signature, params)


# --------------------------------------------------------------------------
# cloze evaluation
# --------------------------------------------------------------------------

@dataclass
class ClozeResult:
    accuracy: float
    n_predictions: int
    n_sequences: int


def evaluate_cloze(ck: Checkpoint, vocab: Vocab, lines: list[str], seed: int,
                   policy: MaskingPolicy = MaskingPolicy(),
                   seq_len: int | None = None) -> ClozeResult:
    """Top-1 accuracy at masked positions on held-out lines (fixed eval seed).

    Full checkpoints predict through encoder(+decoder, eval-seeded unmasking
    plan, no output mixing) and the MLM head; encoder-only exports use the
    tied-embedding readout h @ E^T.
    """
    cfg = parse_config_text(ck.config_text).model
    params = params_to_store(ck.params)
    hub = RngHub(seed)
    has_decoder = cfg.decoder_layers > 0 and any(
        k.startswith("decoder.") for k in ck.params)
    has_head = "mlm.transform.w" in ck.params
    s = seq_len or cfg.max_seq_len
    schedule = cfg.unmask_schedule()

    hits = total = n_seq = 0
    for i, line in enumerate(lines):
        ids = encode_line(line, vocab, s)
        try:
            seq = apply_mlm_masking(ids, vocab.size, policy,
                                    hub.generator("masking", i))
        except NoMaskableTokens:
            continue
        base = make_base_key_block(seq.masked, seq.pad)
        h = encoder_forward(params, embed(params, seq.input_ids, cfg), base, cfg)
        if has_decoder:
            plan = plan_unmasking(seq.masked, schedule, cfg.decoder_layers,
                                  hub.generator("gua", i))
            h = decoder_forward(params, h, base, plan, cfg)
        if has_head:
            logits = mlm_head(params, h)
        else:
            logits = matmul(h, transpose(params["embed.tok"]))
        preds = np.argmax(logits.data[seq.masked], axis=-1)
        hits += int((preds == seq.labels[seq.masked]).sum())
        total += int(seq.masked.sum())
        n_seq += 1
    if total == 0:
        raise ValueError("held-out set produced no masked predictions")
    return ClozeResult(hits / total, total, n_seq)
