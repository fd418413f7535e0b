"""Config parsing, validation diagnostics, canonical round-trip."""
import glob
import os

import pytest
from hypothesis import given, settings, strategies as st

from mlmlab.config import (Config, ConfigError, ModelConfig, TrainConfig,
                           canonical_text, load_config, parse_config_text)

MINIMAL = """\
encoder_layers = 2
hidden = 8
ffn = 16
heads = 2
head_size = 4
vocab_size = 32
max_seq_len = 16
"""


def _with(extra: str) -> str:
    return MINIMAL + extra + "\n"


class TestParsing:
    def test_minimal_parses_with_defaults(self):
        cfg = parse_config_text(MINIMAL)
        assert cfg.model.encoder_layers == 2
        assert cfg.model.decoder_layers == 0
        assert cfg.model.ln_placement == "post"
        assert cfg.model.mix_decoder_prob == 0.8
        assert cfg.train.batch_size == 8
        assert cfg.train.dtype == "f32"
        assert cfg.effective_seq_len() == 16  # seq_len=0 falls back to max

    def test_comments_and_blank_lines_ignored(self):
        text = "# header\n\n" + MINIMAL.replace(
            "hidden = 8", "hidden = 8   # trailing comment")
        assert parse_config_text(text).model.hidden == 8

    def test_list_values(self):
        cfg = parse_config_text(_with(
            "decoder_layers = 2\ngua_layers = 1,2\ngua_rates = 0.5,1.0"))
        assert cfg.model.gua_layers == (1, 2)
        assert cfg.model.gua_rates == (0.5, 1.0)
        assert cfg.model.unmask_schedule() == ((1, 0.5), (2, 1.0))

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match=r"line 8: unknown key 'hiden'"):
            parse_config_text(_with("hiden = 3"))

    def test_duplicate_key_reports_both_lines(self):
        with pytest.raises(ConfigError, match=r"line 8: duplicate key 'hidden' \(first at line 2\)"):
            parse_config_text(_with("hidden = 9"))

    def test_bad_value_reports_key_and_line(self):
        with pytest.raises(ConfigError, match=r"line 2: bad value for key 'hidden': 'eight'"):
            parse_config_text(MINIMAL.replace("hidden = 8", "hidden = eight"))

    def test_missing_required_keys_listed_sorted(self):
        text = "\n".join(l for l in MINIMAL.splitlines()
                         if not l.startswith(("ffn", "hidden")))
        with pytest.raises(ConfigError, match=r"missing required key\(s\): ffn, hidden"):
            parse_config_text(text)

    def test_line_without_equals_rejected(self):
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_config_text(_with("just some words"))

    def test_source_name_appears_in_errors(self):
        with pytest.raises(ConfigError, match="myfile.cfg"):
            parse_config_text(_with("hiden = 3"), source="myfile.cfg")


class TestValidation:
    @pytest.mark.parametrize("patch,needle", [
        ("heads = 3", "'heads'.*'head_size'.*'hidden'"),
        ("vocab_size = 5", "5 reserved"),
        ("max_seq_len = 2", "max_seq_len"),
        ("ln_placement = mid", "'post' or 'pre'"),
        ("mix_decoder_prob = 1.5", "mix_decoder_prob"),
        ("warmup_frac = 1.0", "warmup_frac"),
        ("dtype = f16", "'f32' or 'f64'"),
        ("lr = 0.0", "positive"),
        ("steps = 0", "steps"),
        ("seq_len = 17", r"\[3, 16\]"),
        ("attn_dropout = 1.0", "attn_dropout"),
    ])
    def test_invariant_violations_name_the_key(self, patch, needle):
        key = patch.split(" =")[0]
        base = "\n".join(l for l in MINIMAL.splitlines()
                         if not l.startswith(key))
        with pytest.raises(ConfigError, match=needle):
            parse_config_text(base + "\n" + patch + "\n")

    @pytest.mark.parametrize("extra,needle", [
        ("gua_layers = 1\ngua_rates = 1.0", "decoder_layers = 0"),
        ("decoder_layers = 2\ngua_layers = 3\ngua_rates = 1.0", r"\[1, 2\]"),
        ("decoder_layers = 2\ngua_layers = 2,1\ngua_rates = 0.5,1.0",
         "strictly increasing"),
        ("decoder_layers = 2\ngua_layers = 1,2\ngua_rates = 0.9,0.5",
         "non-decreasing"),
        ("decoder_layers = 2\ngua_layers = 1,2\ngua_rates = 0.3,0.9",
         "final rate must be 1.0"),
        ("decoder_layers = 2\ngua_layers = 1,2\ngua_rates = 1.0",
         "equal length"),
        ("decoder_layers = 1\ngua_layers = 1\ngua_rates = 1.5", r"\[0, 1\]"),
    ])
    def test_unmask_schedule_invariants(self, extra, needle):
        with pytest.raises(ConfigError, match=needle):
            parse_config_text(_with(extra))

    def test_schedule_valid_degenerate_rate_zero(self):
        cfg = parse_config_text(_with(
            "decoder_layers = 3\ngua_layers = 1,3\ngua_rates = 0.0,1.0"))
        assert cfg.model.unmask_schedule() == ((1, 0.0), (3, 1.0))


class TestCanonical:
    def test_round_trip_equality(self):
        cfg = parse_config_text(_with(
            "decoder_layers = 2\ngua_layers = 1,2\ngua_rates = 0.5,1.0\nlr = 0.002"))
        text = canonical_text(cfg)
        assert parse_config_text(text) == cfg
        assert canonical_text(parse_config_text(text)) == text

    def test_lines_are_sorted_and_complete(self):
        cfg = parse_config_text(MINIMAL)
        keys = [l.split(" =")[0] for l in canonical_text(cfg).splitlines()]
        assert keys == sorted(keys)
        assert "adam_beta1" in keys and "gua_layers" in keys

    def test_bundled_configs_parse_and_round_trip(self):
        paths = sorted(glob.glob(os.path.join(
            os.path.dirname(__file__), "..", "configs", "*.cfg")))
        assert len(paths) >= 4
        for p in paths:
            cfg = load_config(p)
            assert parse_config_text(canonical_text(cfg)) == cfg

    @settings(deadline=None, max_examples=60)
    @given(st.data())
    def test_random_valid_configs_round_trip(self, data):
        heads = data.draw(st.integers(1, 4), label="heads")
        head_size = data.draw(st.integers(1, 8).filter(
            lambda hs: heads * hs >= 2), label="head_size")
        dec = data.draw(st.integers(0, 3), label="decoder_layers")
        model = dict(
            encoder_layers=data.draw(st.integers(0, 4)),
            hidden=heads * head_size, ffn=data.draw(st.integers(1, 32)),
            heads=heads, head_size=head_size,
            vocab_size=data.draw(st.integers(6, 200)),
            max_seq_len=data.draw(st.integers(3, 64)),
            ln_placement=data.draw(st.sampled_from(["post", "pre"])),
            decoder_layers=dec,
            mix_decoder_prob=data.draw(
                st.floats(0, 1, allow_nan=False)),
        )
        if dec and data.draw(st.booleans(), label="scheduled"):
            layers = sorted(data.draw(st.sets(st.integers(1, dec), min_size=1)))
            rates = sorted(data.draw(st.lists(
                st.floats(0, 1), min_size=len(layers) - 1,
                max_size=len(layers) - 1))) + [1.0]
            model["gua_layers"] = tuple(layers)
            model["gua_rates"] = tuple(rates)
        cfg = Config(ModelConfig(**model), TrainConfig(
            lr=data.draw(st.floats(1e-6, 10.0)),
            warmup_frac=data.draw(st.floats(0, 0.99)),
        ))
        text = canonical_text(cfg)
        assert parse_config_text(text) == cfg
