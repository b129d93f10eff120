"""Asymmetric tokenization: counts, layout, round-trips, embedding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from televit.errors import ConfigError, ShapeError
from televit.model import ModelConfig, TeleViTModel
from televit.tokenization import (
    TokenizationSpec,
    detokenize,
    embed_sequence,
    sequence_layout,
    tokenize_global,
    tokenize_indices,
    tokenize_local,
)

PAPER_SPEC = TokenizationSpec(local_patch=(1, 16, 16), global_patch=(1, 30, 30), embed_dim=768)


class TestLocalTokens:
    def test_paper_scale_token_count(self):
        x = np.zeros((14, 80, 80), dtype=np.float32)
        ts = tokenize_local(x, PAPER_SPEC)
        assert ts.n_tokens == 25
        assert ts.grid_shape == (5, 5)

    def test_token_dim_from_rule(self):
        x = np.zeros((14, 80, 80), dtype=np.float32)
        assert tokenize_local(x, PAPER_SPEC).token_dim == 14 * 16 * 16

    def test_degenerate_single_token(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        spec = TokenizationSpec(local_patch=(1, 8, 8), embed_dim=16)
        ts = tokenize_local(x, spec)
        assert ts.n_tokens == 1
        np.testing.assert_array_equal(ts.tokens[0], x.ravel())

    def test_hand_enumerated_layout(self):
        # (2, 4, 4) input, 2x2 patches: token 0 is the flattened top-left
        # block of both channels, channel-major then row then column.
        x = np.arange(32, dtype=np.float64).reshape(2, 4, 4)
        spec = TokenizationSpec(local_patch=(1, 2, 2), embed_dim=8)
        ts = tokenize_local(x, spec)
        assert ts.n_tokens == 4
        expected_token0 = np.array(
            [x[0, 0, 0], x[0, 0, 1], x[0, 1, 0], x[0, 1, 1],
             x[1, 0, 0], x[1, 0, 1], x[1, 1, 0], x[1, 1, 1]]
        )
        np.testing.assert_array_equal(ts.tokens[0], expected_token0)
        # Row-major enumeration: token 1 is the top-right block.
        np.testing.assert_array_equal(
            ts.tokens[1], x[:, 0:2, 2:4].ravel()
        )

    def test_non_divisible_names_axis(self):
        with pytest.raises(ShapeError, match="height 81"):
            tokenize_local(np.zeros((14, 81, 80)), PAPER_SPEC)
        with pytest.raises(ShapeError, match="width 73"):
            tokenize_local(np.zeros((14, 80, 73)), PAPER_SPEC)


class TestGlobalTokens:
    def test_paper_scale_count(self):
        # 360 longitudes x 180 latitudes at 30x30 patches: 72 tokens.
        x = np.zeros((14, 180, 360), dtype=np.float32)
        ts = tokenize_global(x, PAPER_SPEC)
        assert ts.n_tokens == 72
        assert ts.token_dim == 14 * 30 * 30 == 12600

    def test_constant_field_identical_tokens(self):
        x = np.full((14, 180, 360), 3.5, dtype=np.float32)
        ts = tokenize_global(x, PAPER_SPEC)
        assert (ts.tokens == ts.tokens[0]).all()


class TestIndexTokens:
    def test_paper_scale_count(self):
        ts = tokenize_indices(np.zeros((10, 10), dtype=np.float32))
        assert ts.n_tokens == 100
        assert ts.token_dim == 1

    def test_singleton(self):
        ts = tokenize_indices(np.array([[7.25]]))
        assert ts.n_tokens == 1
        assert ts.tokens[0, 0] == 7.25

    def test_enumerated_order_index_major(self):
        x = np.array([[0.0, 1.0, 2.0], [10.0, 11.0, 12.0]])
        ts = tokenize_indices(x)
        np.testing.assert_array_equal(
            ts.tokens.ravel(), [0.0, 1.0, 2.0, 10.0, 11.0, 12.0]
        )
        assert ts.grid_shape == (2, 3)


class TestRoundTrip:
    def test_local_bit_exact(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((14, 80, 80)).astype(np.float32)
        ts = tokenize_local(x, PAPER_SPEC)
        back = detokenize(ts)
        assert back.dtype == x.dtype
        np.testing.assert_array_equal(back, x)

    def test_indices_bit_exact(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((10, 10)).astype(np.float32)
        np.testing.assert_array_equal(detokenize(tokenize_indices(x)), x)

    @settings(max_examples=40, deadline=None)
    @given(
        channels=st.integers(1, 5),
        rows=st.integers(1, 6),
        cols=st.integers(1, 6),
        ph=st.integers(1, 5),
        pw=st.integers(1, 5),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_property_counts_and_roundtrip(self, channels, rows, cols, ph, pw, seed):
        h, w = rows * ph, cols * pw
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((channels, h, w))
        spec = TokenizationSpec(local_patch=(1, ph, pw), embed_dim=4)
        ts = tokenize_local(x, spec)
        assert ts.n_tokens == (h // ph) * (w // pw)
        np.testing.assert_array_equal(detokenize(ts), x)


def _make_model(variant):
    return TeleViTModel(
        ModelConfig.desk_scale(
            variant,
            global_shape=(14, 180, 360),
            spec=TokenizationSpec((1, 16, 16), (1, 30, 30), embed_dim=64),
        ),
        seed=3,
    )


@pytest.fixture(scope="module")
def models():
    return {v: _make_model(v) for v in (
        "local_only", "with_indices", "with_global", "with_indices_and_global")}


class TestEmbedSequence:

    def _token_sets(self, model, rng):
        sets = [tokenize_local(rng.standard_normal((14, 80, 80)), model.config.spec)]
        if "indices" in model.config.sources:
            sets.append(tokenize_indices(rng.standard_normal((10, 10))))
        if "global" in model.config.sources:
            sets.append(tokenize_global(rng.standard_normal((14, 180, 360)), model.config.spec))
        return sets

    @pytest.mark.parametrize("variant,length", [
        ("local_only", 26),
        ("with_indices", 126),
        ("with_global", 98),
        ("with_indices_and_global", 198),
    ])
    def test_sequence_lengths(self, models, variant, length):
        model = models[variant]
        rng = np.random.default_rng(4)
        seq = embed_sequence(self._token_sets(model, rng), model)
        assert seq.length == length
        assert seq.segment_map[0] == "cls"
        assert len(seq.segment_map) == length

    def test_segment_order_fixed(self, models):
        model = models["with_indices_and_global"]
        rng = np.random.default_rng(5)
        seq = embed_sequence(self._token_sets(model, rng), model)
        assert seq.spans == {
            "cls": (0, 1),
            "local": (1, 26),
            "indices": (26, 126),
            "global": (126, 198),
        }

    def test_zero_positional_table_is_pure_projection(self, models):
        model = models["with_indices"]
        model.pos_table.data = np.zeros_like(model.pos_table.data)
        rng = np.random.default_rng(6)
        sets = self._token_sets(model, rng)
        seq = embed_sequence(sets, model)
        w, b = model.projections["local"]
        expected = sets[0].tokens @ w.data + b.data
        np.testing.assert_allclose(seq.embeddings.data[1:26], expected, atol=1e-12)
        np.testing.assert_array_equal(seq.embeddings.data[0], model.cls_token.data)

    def test_determinism_bitwise(self, models):
        model = models["with_indices_and_global"]
        rng = np.random.default_rng(7)
        sets = self._token_sets(model, rng)
        a = embed_sequence(sets, model).embeddings.data
        b = embed_sequence(sets, model).embeddings.data
        np.testing.assert_array_equal(a, b)

    def test_projection_linearity(self, models):
        # embed(a*x) - pos - cls row == a * (embed(x) - pos - cls row)
        model = models["local_only"]
        rng = np.random.default_rng(8)
        x = rng.standard_normal((14, 80, 80))
        spec = model.config.spec
        one = embed_sequence([tokenize_local(x, spec)], model).embeddings.data
        three = embed_sequence([tokenize_local(3.0 * x, spec)], model).embeddings.data
        pos = model.pos_table.data
        np.testing.assert_allclose(
            three[1:] - pos[1:], 3.0 * (one[1:] - pos[1:]), atol=1e-9
        )

    def test_missing_source_rejected(self, models):
        model = models["with_indices"]
        rng = np.random.default_rng(9)
        with pytest.raises(ConfigError, match="indices"):
            embed_sequence([tokenize_local(rng.standard_normal((14, 80, 80)),
                                           model.config.spec)], model)

    def test_token_dim_mismatch_rejected(self, models):
        model = models["local_only"]
        bad_spec = TokenizationSpec(local_patch=(1, 8, 8), embed_dim=64)
        rng = np.random.default_rng(10)
        with pytest.raises(ConfigError, match="token_dim"):
            embed_sequence(
                [tokenize_local(rng.standard_normal((14, 80, 80)), bad_spec)], model
            )


def test_sequence_layout_rejects_unknown_variant():
    with pytest.raises(ConfigError):
        sequence_layout({"local": 4}, "with_everything")


def test_spec_validation():
    with pytest.raises(ConfigError):
        TokenizationSpec(local_patch=(2, 16, 16))
    with pytest.raises(ConfigError):
        TokenizationSpec(embed_dim=0)
    with pytest.raises(ConfigError):
        TokenizationSpec(index_token=3)
