"""Encoder blocks: attention oracle, key-block semantics, embeddings."""
import numpy as np
import pytest

from mlmlab.config import ModelConfig
from mlmlab.model import embed, encoder_forward, multi_head_attention, transformer_block
from mlmlab.rng import RngHub
from mlmlab.tensor import ParamStore, Tensor
from mlmlab.train import init_params

CFG = ModelConfig(encoder_layers=2, hidden=8, ffn=16, heads=2, head_size=4,
                  vocab_size=16, max_seq_len=12)


def _params(cfg=CFG, dtype=np.float64, seed=5) -> ParamStore:
    return init_params(cfg, RngHub(seed).generator("init"), dtype,
                       with_mlm_head=False)


def _naive_attention(params, prefix, X, key_block, nh, d):
    """Straight numpy re-implementation, one head at a time."""
    s = X.shape[0]
    out_heads = []
    for hidx in range(nh):
        sl = slice(hidx * d, (hidx + 1) * d)
        q = (X @ params[f"{prefix}.attn.wq"].data + params[f"{prefix}.attn.bq"].data)[:, sl]
        k = (X @ params[f"{prefix}.attn.wk"].data + params[f"{prefix}.attn.bk"].data)[:, sl]
        v = (X @ params[f"{prefix}.attn.wv"].data + params[f"{prefix}.attn.bv"].data)[:, sl]
        scores = q @ k.T / np.sqrt(d)
        scores[:, key_block] = -1e9
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out_heads.append(w @ v)
    ctx = np.concatenate(out_heads, axis=1)
    return ctx @ params[f"{prefix}.attn.wo"].data + params[f"{prefix}.attn.bo"].data


class TestAttention:
    def test_matches_naive_oracle_unblocked(self):
        params = _params()
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 8))
        block = np.zeros(6, bool)
        got = multi_head_attention(params, "encoder.layer.0", Tensor(X), block, CFG)
        want = _naive_attention(params, "encoder.layer.0", X, block, 2, 4)
        np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-12)

    def test_matches_naive_oracle_blocked(self):
        params = _params()
        rng = np.random.default_rng(1)
        X = rng.normal(size=(7, 8))
        block = np.array([0, 1, 0, 0, 1, 0, 1], dtype=bool)
        got = multi_head_attention(params, "encoder.layer.0", Tensor(X), block, CFG)
        want = _naive_attention(params, "encoder.layer.0", X, block, 2, 4)
        np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-12)

    def test_blocked_columns_exactly_zero_rows_sum_one(self):
        params = _params()
        X = np.random.default_rng(2).normal(size=(9, 8))
        block = np.zeros(9, bool)
        block[[2, 5, 6]] = True
        cap = []
        multi_head_attention(params, "encoder.layer.0", Tensor(X), block, CFG,
                             capture=cap)
        w = cap[0][1]                      # [nh, s, s]
        assert (w[:, :, block] == 0.0).all()          # exact, not approximate
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_blocked_query_rows_stay_active(self):
        params = _params()
        X = np.random.default_rng(3).normal(size=(5, 8))
        block = np.array([0, 1, 0, 0, 0], dtype=bool)
        cap = []
        multi_head_attention(params, "encoder.layer.0", Tensor(X), block, CFG,
                             capture=cap)
        w = cap[0][1]
        # the blocked position still distributes its own attention
        np.testing.assert_allclose(w[:, 1, :].sum(axis=-1), 1.0, atol=1e-6)
        assert (w[:, 1, ~block] > 0).all()

    def test_perturbation_at_blocked_key_isolated(self):
        # changing a blocked position's content must not change any other row,
        # even through a full multi-layer encoder
        params = _params()
        rng = np.random.default_rng(4)
        X = rng.normal(size=(8, 8))
        block = np.zeros(8, bool)
        block[3] = True
        out1 = encoder_forward(params, Tensor(X), block, CFG).data
        X2 = X.copy()
        X2[3] += rng.normal(size=8)
        out2 = encoder_forward(params, Tensor(X2), block, CFG).data
        others = np.arange(8) != 3
        np.testing.assert_allclose(out1[others], out2[others], atol=1e-9)
        assert np.abs(out1[3] - out2[3]).max() > 1e-3   # its own row does move

    def test_all_blocked_rejected(self):
        params = _params()
        with pytest.raises(ValueError, match="every attention key is blocked"):
            multi_head_attention(params, "encoder.layer.0",
                                 Tensor(np.zeros((3, 8))), np.ones(3, bool), CFG)

    def test_wrong_block_shape_rejected(self):
        params = _params()
        with pytest.raises(ValueError, match="key_block"):
            multi_head_attention(params, "encoder.layer.0",
                                 Tensor(np.zeros((3, 8))), np.zeros(4, bool), CFG)


class TestBlocksAndStack:
    def test_pre_and_post_placement_differ(self):
        pre_cfg = ModelConfig(encoder_layers=1, hidden=8, ffn=16, heads=2,
                              head_size=4, vocab_size=16, max_seq_len=12,
                              ln_placement="pre")
        params = _params()
        X = Tensor(np.random.default_rng(5).normal(size=(6, 8)))
        block = np.zeros(6, bool)
        post = transformer_block(params, "encoder.layer.0", X, block, CFG)
        pre = transformer_block(params, "encoder.layer.0", X, block, pre_cfg)
        assert np.abs(post.data - pre.data).max() > 1e-3

    def test_same_param_names_for_both_placements(self):
        # one checkpoint layout regardless of wiring
        for placement in ("post", "pre"):
            cfg = ModelConfig(encoder_layers=1, hidden=8, ffn=16, heads=2,
                              head_size=4, vocab_size=16, max_seq_len=12,
                              ln_placement=placement)
            names = _params(cfg).names()
            assert any(n == "encoder.layer.0.ln1.gamma" for n in names)
            assert any(n == "encoder.layer.0.ln2.beta" for n in names)

    def test_zero_layer_encoder_is_identity(self):
        cfg = ModelConfig(encoder_layers=0, hidden=8, ffn=16, heads=2,
                          head_size=4, vocab_size=16, max_seq_len=12)
        params = _params(cfg)
        X = Tensor(np.random.default_rng(6).normal(size=(4, 8)))
        out = encoder_forward(params, X, np.zeros(4, bool), cfg)
        assert out is X

    def test_capture_collects_every_layer(self):
        params = _params()
        X = Tensor(np.random.default_rng(7).normal(size=(5, 8)))
        cap = []
        encoder_forward(params, X, np.zeros(5, bool), CFG, capture=cap)
        assert [p for p, _ in cap] == ["encoder.layer.0", "encoder.layer.1"]
        assert all(w.shape == (2, 5, 5) for _, w in cap)


class TestEmbed:
    def test_matches_manual_computation(self):
        params = _params()
        ids = np.array([2, 7, 9, 3])
        got = embed(params, ids, CFG).data
        tok = params["embed.tok"].data[ids]
        pos = params["embed.pos"].data[:4]
        seg = params["embed.seg"].data[0]
        x = tok + pos + seg
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        want = ((x - mu) / np.sqrt(var + 1e-5) * params["embed.ln.gamma"].data
                + params["embed.ln.beta"].data)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_too_long_sequence_rejected(self):
        with pytest.raises(ValueError, match="exceeds max_seq_len"):
            embed(_params(), np.zeros(13, dtype=np.int64), CFG)

    def test_out_of_vocab_id_reports_position(self):
        ids = np.array([2, 7, 99, 3])
        with pytest.raises(ValueError, match="token id 99 at position 2"):
            embed(_params(), ids, CFG)

    def test_negative_id_rejected(self):
        with pytest.raises(ValueError, match="position 1"):
            embed(_params(), np.array([2, -1, 3]), CFG)
