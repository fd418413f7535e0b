"""Bundled synthetic language: an order-2 Markov chain over 64 symbols.

The corpus ships as a deterministic generator rather than a committed text
file; the same (seed, size) always yields byte-identical lines.

Symbols are digit pairs sXY with X, Y in 0..7.  From state (prev, cur) the
next symbol is built compositionally:

    next.X = cur.Y                      (deterministic copy)
    next.Y = SIGMA[prev.X]  w.p. 0.9, else a uniform digit

so the chain is genuinely order-2 (the Y digit reaches back two symbols) with
per-token conditional entropy H = -(0.9125 ln 0.9125 + 7*0.0125 ln 0.0125)
~= 0.467 nats.  Crucially for masked prediction, an interior symbol is exactly
recoverable from its immediate neighbours regardless of the noise draws:
X = left.Y and Y = right.X (both copies are deterministic), so a desk-scale
model that learns to read two neighbouring positions can drive its MLM loss
toward the residual entropy of masked-neighbour cases.  A flat random
transition table over all 64^2 contexts, by contrast, gives a small model no
foothold (each context is seen a couple dozen times in a short run).
"""
from __future__ import annotations

import numpy as np

__all__ = ["generate_corpus", "write_lines", "make_order_task"]

N_SYMBOLS = 64
_N_DIGITS = 8
_P_MAIN = 0.9                   # probability the Y digit follows SIGMA
_MIN_LEN, _MAX_LEN = 48, 62     # dense lines: _MAX_LEN + [CLS]/[SEP] fills seq 64
SIGMA = (3, 6, 1, 7, 0, 5, 2, 4)   # fixed digit permutation (order-2 hop)


def _symbol(x: int, y: int) -> str:
    return f"s{x}{y}"


def _walk(rng: np.random.Generator, length: int) -> list[str]:
    px, _ = rng.integers(0, _N_DIGITS, size=2)          # prev digits (only X used)
    cx, cy = rng.integers(0, _N_DIGITS, size=2)         # cur digits
    toks = [_symbol(cx, cy)]
    for _ in range(length - 1):
        nx = cy
        ny = SIGMA[px] if rng.random() < _P_MAIN else int(rng.integers(0, _N_DIGITS))
        toks.append(_symbol(nx, ny))
        px, (cx, cy) = cx, (nx, ny)
    return toks


def generate_corpus(n_lines: int = 50_000, seed: int = 20240) -> list[str]:
    """Deterministic corpus of n_lines whitespace-tokenised sequences."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    lines = []
    for _ in range(n_lines):
        length = int(rng.integers(_MIN_LEN, _MAX_LEN + 1))
        lines.append(" ".join(_walk(rng, length)))
    return lines


def write_lines(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def make_order_task(n_examples: int, seed: int = 7, *,
                    alpha: str = "s00", beta: str = "s77") -> list[str]:
    """Two-class task lines "<label>\\t<text>": does alpha occur before beta?

    Positives carry an inserted alpha and then beta; negatives carry beta
    only.  Natural occurrences of either marker are stripped from the carrier
    walk first, so the inserted markers determine the label exactly and a
    logistic-regression-on-counts oracle separates the classes (~1.0).
    Markers default to in-vocabulary symbols so finetuning a pretrained
    checkpoint sees no [UNK].
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = []
    for _ in range(n_examples):
        length = int(rng.integers(16, 32))
        words = [w for w in _walk(rng, length) if w not in (alpha, beta)]
        # random labels, not alternating: a deterministic every-Nth dev
        # split downstream must still see both classes
        label = int(rng.integers(0, 2))
        if label == 1:
            p = int(rng.integers(0, len(words)))
            words.insert(p, alpha)
            q = int(rng.integers(p + 1, len(words) + 1))
            words.insert(q, beta)
        else:
            q = int(rng.integers(0, len(words) + 1))
            words.insert(q, beta)
        out.append(f"{label}\t{' '.join(words)}")
    return out
