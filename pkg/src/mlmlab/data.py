"""Corpus -> masked batches: vocab, encoding, MLM masking, batch stream.

Reserved ids: [PAD]=0 [UNK]=1 [CLS]=2 [SEP]=3 [MASK]=4; corpus tokens start
at 5.  Special and pad positions are never selected for masking, and the
base attention key-block is (masked positions | pad positions).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PAD_ID", "UNK_ID", "CLS_ID", "SEP_ID", "MASK_ID", "N_RESERVED",
    "Vocab", "MaskingPolicy", "MaskedSequence", "MaskedBatch",
    "NoMaskableTokens", "build_vocab", "encode_line", "apply_mlm_masking",
    "make_base_key_block", "BatchStream", "mask_stats",
]

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
N_RESERVED = 5
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


class NoMaskableTokens(ValueError):
    """Sequence has no position eligible for masking; callers skip it."""


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]                  # corpus tokens, id = index + N_RESERVED
    _ids: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_ids",
                           {t: i + N_RESERVED for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return N_RESERVED + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, tid: int) -> str:
        if 0 <= tid < N_RESERVED:
            return RESERVED_TOKENS[tid]
        return self.tokens[tid - N_RESERVED]

    def save(self, path: str) -> None:
        # one token per line; line number = id - N_RESERVED
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            toks = tuple(line.rstrip("\n") for line in fh if line.rstrip("\n"))
        return cls(toks)


def build_vocab(lines, max_size: int) -> Vocab:
    """Whitespace tokens by descending frequency, ties lexicographic ascending.

    max_size caps the *total* id space including the 5 reserved ids.  Corpus
    tokens spelled like reserved markers are skipped (they encode as [UNK]).
    """
    if max_size <= N_RESERVED:
        raise ValueError(f"max_size must exceed {N_RESERVED} reserved ids, got {max_size}")
    freq: dict[str, int] = {}
    for line in lines:
        for tok in line.split():
            if tok in RESERVED_TOKENS:
                continue
            freq[tok] = freq.get(tok, 0) + 1
    ranked = sorted(freq, key=lambda t: (-freq[t], t))
    return Vocab(tuple(ranked[: max_size - N_RESERVED]))


def encode_line(line: str, vocab: Vocab, seq_len: int) -> np.ndarray:
    """[CLS] tokens [SEP], truncated (keeping [CLS] and a final [SEP]) and
    right-padded with [PAD] to exactly seq_len."""
    if seq_len < 3:
        raise ValueError(f"seq_len must be >= 3, got {seq_len}")
    body = [vocab.id_of(t) for t in line.split()][: seq_len - 2]
    ids = np.full(seq_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:1 + len(body)] = body
    ids[1 + len(body)] = SEP_ID
    return ids


@dataclass(frozen=True)
class MaskingPolicy:
    select_rate: float = 0.15
    mask_frac: float = 0.8     # -> [MASK]
    keep_frac: float = 0.1     # -> unchanged (still predicted, still key-blocked)
    random_frac: float = 0.1   # -> uniform random non-special id

    def __post_init__(self):
        if not 0.0 < self.select_rate <= 1.0:
            raise ValueError(f"select_rate must be in (0, 1], got {self.select_rate}")
        if abs(self.mask_frac + self.keep_frac + self.random_frac - 1.0) > 1e-9:
            raise ValueError("mask/keep/random fractions must sum to 1")


@dataclass(frozen=True)
class MaskedSequence:
    input_ids: np.ndarray   # int64[s], corrupted
    labels: np.ndarray      # int64[s], original id at selected positions, -1 elsewhere
    masked: np.ndarray      # bool[s], selected positions
    pad: np.ndarray         # bool[s]


@dataclass(frozen=True)
class MaskedBatch:
    input_ids: np.ndarray   # int64[b, s]
    labels: np.ndarray      # int64[b, s]
    masked: np.ndarray      # bool[b, s]
    pad: np.ndarray         # bool[b, s]

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]

    def sequence(self, i: int) -> MaskedSequence:
        return MaskedSequence(self.input_ids[i], self.labels[i],
                              self.masked[i], self.pad[i])


def _maskable(ids: np.ndarray) -> np.ndarray:
    return ids >= N_RESERVED   # never [CLS]/[SEP]/[PAD]/[UNK]/[MASK]


def apply_mlm_masking(ids: np.ndarray, vocab_size: int, policy: MaskingPolicy,
                      rng: np.random.Generator) -> MaskedSequence:
    """Select exactly max(1, round_half_up(rate * n_maskable)) positions, then
    80/10/10 mask/keep/random per position (independent draws, position order)."""
    ids = np.asarray(ids, dtype=np.int64)
    eligible = np.flatnonzero(_maskable(ids))
    if eligible.size == 0:
        raise NoMaskableTokens("sequence has no maskable token")
    # half-up, not banker's: round(1.5)=2, round(2.5)=3
    k = max(1, int(math.floor(policy.select_rate * eligible.size + 0.5)))
    chosen = np.sort(rng.choice(eligible, size=k, replace=False))

    out = ids.copy()
    labels = np.full_like(ids, -1)
    labels[chosen] = ids[chosen]
    for p in chosen:
        u = rng.random()
        if u < policy.mask_frac:
            out[p] = MASK_ID
        elif u < policy.mask_frac + policy.keep_frac:
            pass                                    # kept, still predicted
        else:
            out[p] = rng.integers(N_RESERVED, vocab_size)
    masked = np.zeros(ids.shape, dtype=bool)
    masked[chosen] = True
    return MaskedSequence(out, labels, masked, ids == PAD_ID)


def make_base_key_block(masked: np.ndarray, pad: np.ndarray) -> np.ndarray:
    """Base encoder key-block: masked ∪ pad. Rejects fully-blocked sequences."""
    masked = np.asarray(masked, dtype=bool)
    pad = np.asarray(pad, dtype=bool)
    if masked.shape != pad.shape:
        raise ValueError(f"shape mismatch: masked {masked.shape} vs pad {pad.shape}")
    block = masked | pad
    if block.all():
        raise ValueError("all positions blocked; sequence has no visible key")
    return block


class BatchStream:
    """Deterministic masked-batch stream over a fixed corpus.

    Batch t is a pure function of (corpus, vocab, policy, seed, t): epoch
    e = t // batches_per_epoch is shuffled by the generator derived from
    ("data", e), and each sequence slot masks with ("masking", t, slot).
    Resuming at any t therefore reproduces an uninterrupted run exactly.
    Lines that encode to zero maskable tokens are skipped up front.
    """

    def __init__(self, lines, vocab: Vocab, policy: MaskingPolicy,
                 batch_size: int, seq_len: int, hub):
        self.vocab = vocab
        self.policy = policy
        self.batch_size = batch_size
        self.hub = hub
        self.encoded: list[np.ndarray] = []
        self.n_skipped = 0
        for line in lines:
            ids = encode_line(line, vocab, seq_len)
            if _maskable(ids).any():
                self.encoded.append(ids)
            else:
                self.n_skipped += 1
        if len(self.encoded) < batch_size:
            raise ValueError(f"corpus has {len(self.encoded)} usable lines, "
                             f"fewer than one batch of {batch_size}")
        self.batches_per_epoch = len(self.encoded) // batch_size

    def _perm(self, epoch: int) -> np.ndarray:
        return self.hub.generator("data", epoch).permutation(len(self.encoded))

    def batch(self, t: int) -> MaskedBatch:
        epoch, i = divmod(t, self.batches_per_epoch)
        order = self._perm(epoch)[i * self.batch_size:(i + 1) * self.batch_size]
        seqs = [apply_mlm_masking(self.encoded[j], self.vocab.size, self.policy,
                                  self.hub.generator("masking", t, slot))
                for slot, j in enumerate(order)]
        return MaskedBatch(np.stack([q.input_ids for q in seqs]),
                           np.stack([q.labels for q in seqs]),
                           np.stack([q.masked for q in seqs]),
                           np.stack([q.pad for q in seqs]))

    def __iter__(self):
        t = 0
        while True:
            yield self.batch(t)
            t += 1


def mask_stats(lines, vocab: Vocab, policy: MaskingPolicy, seq_len: int,
               hub, min_tokens: int = 0) -> dict[str, float]:
    """Empirical masking statistics as a flat key=value-able dict.

    Runs the real masking path over the corpus (cycling if needed) until at
    least min_tokens maskable tokens were seen.
    """
    totals = {"n_sequences": 0, "n_maskable": 0, "n_selected": 0,
              "n_to_mask": 0, "n_kept": 0, "n_random": 0}
    encoded = []
    for line in lines:
        ids = encode_line(line, vocab, seq_len)
        if _maskable(ids).any():
            encoded.append(ids)
    if not encoded:
        raise ValueError("no usable lines for mask statistics")
    i = 0
    while totals["n_maskable"] < max(min_tokens, 1) or i < len(encoded):
        ids = encoded[i % len(encoded)]
        seq = apply_mlm_masking(ids, vocab.size, policy, hub.generator("masking", i))
        sel = seq.masked
        totals["n_sequences"] += 1
        totals["n_maskable"] += int(_maskable(ids).sum())
        totals["n_selected"] += int(sel.sum())
        totals["n_to_mask"] += int((seq.input_ids[sel] == MASK_ID).sum())
        # a random replacement that happens to redraw the original counts as
        # "kept" here; the bias is random_frac/(V-5), far below reporting noise
        totals["n_kept"] += int((seq.input_ids[sel] == ids[sel]).sum())
        totals["n_random"] += int(((seq.input_ids[sel] != MASK_ID)
                                   & (seq.input_ids[sel] != ids[sel])).sum())
        i += 1

    n_sel = totals["n_selected"]
    stats: dict[str, float] = dict(totals)
    stats["select_rate"] = totals["n_selected"] / totals["n_maskable"]
    stats["mask_rate"] = totals["n_to_mask"] / n_sel
    stats["keep_rate"] = totals["n_kept"] / n_sel
    stats["random_rate"] = totals["n_random"] / n_sel
    # binomial standard errors at the nominal rates
    stats["select_rate_stderr"] = math.sqrt(
        policy.select_rate * (1 - policy.select_rate) / totals["n_maskable"])
    stats["category_stderr"] = math.sqrt(
        policy.mask_frac * (1 - policy.mask_frac) / n_sel)
    return stats


def format_mask_stats(stats: dict[str, float]) -> str:
    lines = []
    for k in sorted(stats):
        v = stats[k]
        lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"
