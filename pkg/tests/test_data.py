"""Vocab, encoding, MLM corruption counts/categories, batch stream."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlmlab.data import (CLS_ID, MASK_ID, N_RESERVED, PAD_ID, SEP_ID, UNK_ID,
                         BatchStream, MaskingPolicy, NoMaskableTokens, Vocab,
                         apply_mlm_masking, build_vocab, encode_line,
                         make_base_key_block, mask_stats)
from mlmlab.rng import RngHub


class TestVocab:
    def test_frequency_order(self):
        v = build_vocab(["a a b", "a c c"], max_size=64)
        assert v.tokens == ("a", "c", "b")          # 3, 2, 1 occurrences
        assert v.id_of("a") == N_RESERVED

    def test_lexicographic_tie_break(self):
        v = build_vocab(["y x", "x y"], max_size=64)
        assert v.tokens == ("x", "y")

    def test_cap_includes_reserved_ids(self):
        v = build_vocab(["a b c d e"], max_size=6)
        assert len(v.tokens) == 1 and v.size == 6

    def test_cap_must_exceed_reserved(self):
        with pytest.raises(ValueError, match="max_size"):
            build_vocab(["a"], max_size=5)

    def test_reserved_spellings_skipped(self):
        v = build_vocab(["a [MASK] b [PAD]"], max_size=64)
        assert "[MASK]" not in v.tokens and "[PAD]" not in v.tokens
        assert v.id_of("[MASK]") == UNK_ID           # encodes as unknown

    def test_token_of_round_trip(self):
        v = build_vocab(["alpha beta"], max_size=64)
        for t in v.tokens:
            assert v.token_of(v.id_of(t)) == t
        assert v.token_of(MASK_ID) == "[MASK]"

    def test_save_load_round_trip(self, tmp_path):
        v = build_vocab(["c a b a"], max_size=64)
        p = str(tmp_path / "vocab.txt")
        v.save(p)
        assert Vocab.load(p) == v


class TestEncodeLine:
    def test_basic_layout(self):
        v = build_vocab(["a b"], max_size=64)
        ids = encode_line("a b", v, 6)
        assert ids.tolist() == [CLS_ID, v.id_of("a"), v.id_of("b"), SEP_ID,
                                PAD_ID, PAD_ID]

    def test_truncation_keeps_cls_and_sep(self):
        v = build_vocab(["a b c d e f"], max_size=64)
        ids = encode_line("a b c d e f", v, 5)
        assert ids[0] == CLS_ID and ids[4] == SEP_ID
        assert len(ids) == 5 and (ids >= 0).all()

    def test_unknown_token_becomes_unk(self):
        v = build_vocab(["a"], max_size=64)
        ids = encode_line("a zzz", v, 6)
        assert ids[2] == UNK_ID

    def test_min_seq_len_enforced(self):
        v = build_vocab(["a"], max_size=64)
        with pytest.raises(ValueError, match="seq_len"):
            encode_line("a", v, 2)


def _ids_with_body(n: int, seq_len: int | None = None) -> np.ndarray:
    """[CLS] n maskable tokens [SEP] (+ optional padding)."""
    s = seq_len or (n + 2)
    ids = np.full(s, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:1 + n] = np.arange(N_RESERVED, N_RESERVED + n)
    ids[1 + n] = SEP_ID
    return ids


class TestMasking:
    # (maskable count, expected selections): 15% with half-up rounding, min 1
    @pytest.mark.parametrize("n,k", [(1, 1), (3, 1), (10, 2), (20, 3),
                                     (30, 5), (40, 6), (63, 9), (100, 15)])
    def test_exact_selection_count(self, n, k):
        seq = apply_mlm_masking(_ids_with_body(n, n + 4), vocab_size=200,
                                policy=MaskingPolicy(),
                                rng=np.random.default_rng(0))
        assert int(seq.masked.sum()) == k
        assert int((seq.labels >= 0).sum()) == k

    def test_specials_and_padding_never_selected(self):
        ids = _ids_with_body(8, 16)
        for s in range(25):
            seq = apply_mlm_masking(ids, 200, MaskingPolicy(),
                                    np.random.default_rng(s))
            special = ~((ids >= N_RESERVED))
            assert not seq.masked[special].any()
            assert (seq.input_ids[special] == ids[special]).all()

    def test_labels_hold_originals_only_at_selected(self):
        ids = _ids_with_body(20)
        seq = apply_mlm_masking(ids, 200, MaskingPolicy(),
                                np.random.default_rng(1))
        assert (seq.labels[seq.masked] == ids[seq.masked]).all()
        assert (seq.labels[~seq.masked] == -1).all()

    def test_corruption_only_at_selected(self):
        ids = _ids_with_body(20)
        seq = apply_mlm_masking(ids, 200, MaskingPolicy(),
                                np.random.default_rng(2))
        assert (seq.input_ids[~seq.masked] == ids[~seq.masked]).all()

    def test_replacements_are_mask_keep_or_random_nonspecial(self):
        ids = _ids_with_body(50, 60)
        for s in range(20):
            seq = apply_mlm_masking(ids, 64, MaskingPolicy(),
                                    np.random.default_rng(s))
            sel = seq.input_ids[seq.masked]
            ok = (sel == MASK_ID) | (sel >= N_RESERVED)
            assert ok.all()                 # never PAD/UNK/CLS/SEP
            assert (sel < 64).all()

    def test_no_maskable_raises(self):
        ids = np.array([CLS_ID, UNK_ID, SEP_ID, PAD_ID])
        with pytest.raises(NoMaskableTokens):
            apply_mlm_masking(ids, 64, MaskingPolicy(), np.random.default_rng(0))

    def test_same_rng_reproduces(self):
        ids = _ids_with_body(30)
        a = apply_mlm_masking(ids, 64, MaskingPolicy(), np.random.default_rng(9))
        b = apply_mlm_masking(ids, 64, MaskingPolicy(), np.random.default_rng(9))
        assert (a.input_ids == b.input_ids).all() and (a.masked == b.masked).all()

    @settings(deadline=None, max_examples=60)
    @given(st.integers(1, 80), st.integers(0, 10_000))
    def test_structural_invariants(self, n, seed):
        ids = _ids_with_body(n, n + 2 + seed % 3)
        seq = apply_mlm_masking(ids, 100, MaskingPolicy(),
                                np.random.default_rng(seed))
        assert ((seq.labels >= 0) == seq.masked).all()
        assert (seq.pad == (ids == PAD_ID)).all()
        changed = seq.input_ids != ids
        assert seq.masked[changed].all()    # changes only at selected

    def test_policy_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MaskingPolicy(mask_frac=0.8, keep_frac=0.3, random_frac=0.1)


class TestKeyBlock:
    def test_union_semantics(self):
        masked = np.array([0, 1, 0, 0], bool)
        pad = np.array([0, 0, 0, 1], bool)
        assert make_base_key_block(masked, pad).tolist() == [False, True, False, True]

    def test_fully_blocked_rejected(self):
        with pytest.raises(ValueError, match="no visible key"):
            make_base_key_block(np.array([1, 0], bool), np.array([0, 1], bool))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            make_base_key_block(np.zeros(3, bool), np.zeros(4, bool))


def _corpus(n_lines: int = 40) -> list[str]:
    rng = np.random.default_rng(1234)
    return [" ".join(f"w{rng.integers(0, 30):02d}" for _ in range(rng.integers(8, 14)))
            for _ in range(n_lines)]


class TestBatchStream:
    def _stream(self, seed=3, lines=None, batch_size=4):
        lines = lines if lines is not None else _corpus()
        v = build_vocab(lines, max_size=64)
        return BatchStream(lines, v, MaskingPolicy(), batch_size, 16, RngHub(seed))

    def test_same_seed_identical_batches(self):
        a, b = self._stream(7), self._stream(7)
        for t in (0, 1, 5, 11):
            ba, bb = a.batch(t), b.batch(t)
            assert (ba.input_ids == bb.input_ids).all()
            assert (ba.masked == bb.masked).all()

    def test_different_seed_differs(self):
        a, b = self._stream(7), self._stream(8)
        assert (a.batch(0).masked != b.batch(0).masked).any()

    def test_epoch_boundary_reshuffles(self):
        s = self._stream()
        per = s.batches_per_epoch
        first_epoch = [s.batch(t).input_ids for t in range(per)]
        second_epoch = [s.batch(per + t).input_ids for t in range(per)]
        assert any((x != y).any() for x, y in zip(first_epoch, second_epoch))

    def test_random_access_equals_iteration(self):
        s = self._stream()
        it = iter(s)
        for t in range(7):
            assert (next(it).input_ids == s.batch(t).input_ids).all()

    def test_too_small_corpus_rejected(self):
        with pytest.raises(ValueError, match="fewer than one batch"):
            self._stream(lines=_corpus(3), batch_size=8)

    def test_unmaskable_lines_skipped(self):
        lines = _corpus(12) + ["zzz unk1 unk2"]     # all-[UNK] line
        v = build_vocab(_corpus(12), max_size=64)   # vocab without those tokens
        s = BatchStream(lines, v, MaskingPolicy(), 4, 16, RngHub(0))
        assert s.n_skipped == 1


class TestMaskStats:
    def test_rates_near_nominal(self):
        lines = _corpus(200)
        v = build_vocab(lines, max_size=64)
        stats = mask_stats(lines, v, MaskingPolicy(), 16, RngHub(5),
                           min_tokens=30_000)
        assert stats["n_maskable"] >= 30_000
        assert abs(stats["select_rate"] - 0.15) < 0.01
        assert abs(stats["mask_rate"] - 0.80) < 0.02
        assert abs(stats["keep_rate"] - 0.10) < 0.02
        assert abs(stats["random_rate"] - 0.10) < 0.02

    def test_formatted_output_is_sorted_key_value(self):
        from mlmlab.data import format_mask_stats
        out = format_mask_stats({"b_rate": 0.5, "a_n": 3})
        assert out.splitlines() == ["a_n=3", "b_rate=0.500000"]
