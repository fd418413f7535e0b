"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  `gradcheck` exits 2
when the check fails its 1e-4 threshold.  MLMLAB_LOG_LEVEL (DEBUG/INFO/...)
optionally raises verbosity; no environment variable is required.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .corpus import generate_corpus, write_lines
from .data import MaskingPolicy, Vocab, build_vocab, format_mask_stats, mask_stats
from .flops import PHASES, flops_estimate
from .heatmap import attn_heatmap, write_heatmap_csv
from .rng import RngHub
from .tensor import GradGraph, finite_diff_check
from .train import (FinetuneTask, evaluate_cloze, export_encoder_file,
                    finetune_classify, init_params, pretrain)

log = logging.getLogger("mlmlab")

GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the documented convention is 1
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_lines(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _build_parser() -> _Parser:
    p = _Parser(prog="mlmlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mlmlab {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("pretrain", help="run MLM pretraining")
    common(sp)
    sp.add_argument("--corpus", help="one sequence per line (default: bundled synthetic corpus)")
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("finetune", help="train a classifier head on an encoder checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--task-file", required=True, help="lines '<label>\\t<text>'")
    sp.add_argument("--labels", type=int, default=2)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=".")

    sp = sub.add_parser("export-encoder", help="drop decoder + MLM head from a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=".")

    sp = sub.add_parser("eval-cloze", help="top-1 masked-token accuracy on held-out lines")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=".")

    sp = sub.add_parser("flops", help="analytic FLOP report")
    common(sp)
    sp.add_argument("--phase", choices=PHASES, default="pretrain")
    sp.add_argument("--seq-len", type=int, default=0, help="0 = config max_seq_len")
    sp.add_argument("--baseline", help="config to compute ratios against")

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check (float64)")
    common(sp)

    sp = sub.add_parser("mask-stats", help="empirical masking statistics")
    common(sp, config=False)
    sp.add_argument("--corpus", help="default: bundled synthetic corpus")
    sp.add_argument("--vocab-size", type=int, default=1024)
    sp.add_argument("--seq-len", type=int, default=64)
    sp.add_argument("--tokens", type=int, default=100_000,
                    help="minimum maskable tokens to sample")

    sp = sub.add_parser("attn-dump", help="attention heatmap CSV for one line")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--text", required=True, help="input line (whitespace tokens)")
    sp.add_argument("--stack", choices=("encoder", "decoder"), default="encoder")
    sp.add_argument("--layer", type=int, default=0, help="0-based within the stack")
    sp.add_argument("--head", default="avg", help="head index or 'avg'")
    sp.add_argument("--apply-unmasking", action="store_true",
                    help="draw and apply the gradual-unmasking plan (decoder stack)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=".")
    return p


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    lines = _read_lines(args.corpus) if args.corpus else generate_corpus()
    res = pretrain(cfg, lines, args.seed, args.out, resume_from=args.resume)
    print(f"pretrained {res.state.step} steps -> {res.final_ckpt_path}")
    print(f"metrics: {res.metrics_path}")
    return 0


def _cmd_finetune(args) -> int:
    ck = load_checkpoint(args.ckpt)
    vocab = Vocab.load(args.vocab)
    task = FinetuneTask.from_file(args.task_file, args.labels,
                                  epochs=args.epochs, lr=args.lr)
    res = finetune_classify(ck, vocab, task, args.seed)
    print(f"dev_accuracy={res.dev_accuracy:.4f}")
    return 0


def _cmd_export(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "encoder_export.bin")
    export_encoder_file(args.ckpt, out_path)
    print(out_path)
    return 0


def _cmd_eval_cloze(args) -> int:
    ck = load_checkpoint(args.ckpt)
    vocab = Vocab.load(args.vocab)
    res = evaluate_cloze(ck, vocab, _read_lines(args.corpus), args.seed)
    print(f"cloze_top1={res.accuracy:.4f} predictions={res.n_predictions} "
          f"sequences={res.n_sequences}")
    return 0


def _cmd_flops(args) -> int:
    cfg = load_config(args.config)
    s = args.seq_len or cfg.model.max_seq_len
    report = flops_estimate(cfg.model, args.phase, s)
    baseline = None
    if args.baseline:
        bcfg = load_config(args.baseline)
        baseline = flops_estimate(bcfg.model, args.phase, args.seq_len or bcfg.model.max_seq_len)
    sys.stdout.write(report.format(baseline))
    return 0


def _cmd_gradcheck(args) -> int:
    from .data import BatchStream
    from .decoder import pretrain_forward_loss

    cfg = load_config(args.config)
    hub = RngHub(args.seed)
    params = init_params(cfg.model, hub.generator("init"), np.float64)
    corpus = generate_corpus(n_lines=max(4, cfg.train.batch_size),
                             seed=args.seed + 1)
    vocab = build_vocab(corpus, cfg.model.vocab_size)
    stream = BatchStream(corpus, vocab, MaskingPolicy(), 1,
                         cfg.effective_seq_len(), hub)
    batch = stream.batch(0)

    def f():
        loss, _ = pretrain_forward_loss(batch, params, cfg.model, hub, 0)
        return loss

    report = finite_diff_check(f, params)
    print(report)
    ok = report.max_rel_err < GRADCHECK_TOL
    print(f"gradcheck {'PASS' if ok else 'FAIL'} "
          f"(max_rel_err={report.max_rel_err:.3e}, threshold={GRADCHECK_TOL})")
    return 0 if ok else 2


def _cmd_mask_stats(args) -> int:
    lines = _read_lines(args.corpus) if args.corpus else generate_corpus(n_lines=4000)
    vocab = build_vocab(lines, args.vocab_size)
    stats = mask_stats(lines, vocab, MaskingPolicy(), args.seq_len,
                       RngHub(args.seed), min_tokens=args.tokens)
    sys.stdout.write(format_mask_stats(stats))
    return 0


def _cmd_attn_dump(args) -> int:
    ck = load_checkpoint(args.ckpt)
    vocab = Vocab.load(args.vocab)
    w, notes = attn_heatmap(ck, vocab, args.text, args.stack, args.layer,
                            args.head, args.apply_unmasking, args.seed)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "heatmap.csv")
    write_heatmap_csv(out_path, w, notes)
    print(out_path)
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "export-encoder": _cmd_export,
    "eval-cloze": _cmd_eval_cloze,
    "flops": _cmd_flops,
    "gradcheck": _cmd_gradcheck,
    "mask-stats": _cmd_mask_stats,
    "attn-dump": _cmd_attn_dump,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MLMLAB_LOG_LEVEL", "WARNING"))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:          # argparse exits for --help/--version/usage
        return int(e.code or 0)
    try:
        return _COMMANDS[args.cmd](args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # runtime failure contract: message + exit 2
        log.debug("traceback", exc_info=True)
        print(f"mlmlab {args.cmd}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
