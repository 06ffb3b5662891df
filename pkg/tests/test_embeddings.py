import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlpretrain import embeddings as emb
from vlpretrain import numerics as nx
from vlpretrain.embeddings import RegionSet, TokenSequence, Vocabulary
from vlpretrain.encoder import encoder_forward
from vlpretrain.model import init_params


@pytest.fixture
def small_vocab():
    tokens = list(emb.RESERVED) + [f"pad{i}" for i in range(4)] + ["a", "dog"]
    return Vocabulary(tokens)


def regions(n, d_vis=6, seed=0, size=(100, 200)):
    rng = np.random.default_rng(seed)
    boxes = [[10 + i, 20, 60 + i, 120] for i in range(n)]
    return RegionSet(rng.normal(size=(n, d_vis)), boxes, np.arange(n) % 3, np.linspace(0.9, 0.5, n), size)


class TestVocabulary:
    def test_reserved_order_enforced(self):
        with pytest.raises(ValueError):
            Vocabulary(["[UNK]", "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[IMG]"])

    def test_file_round_trip(self, tmp_path, small_vocab):
        small_vocab.save(tmp_path / "vocab.txt")
        lines = (tmp_path / "vocab.txt").read_text().splitlines()
        assert lines[:6] == list(emb.RESERVED)
        assert Vocabulary.load(tmp_path / "vocab.txt").tokens == small_vocab.tokens


class TestTokenize:
    def test_lookup(self, small_vocab):
        assert emb.tokenize("a dog", small_vocab).ids == [10, 11]

    def test_unknown(self, small_vocab):
        assert emb.tokenize("a zyxxy", small_vocab).ids == [10, emb.UNK]

    def test_normalization(self, small_vocab):
        assert emb.tokenize("A  Dog.", small_vocab).ids == [10, 11]

    @pytest.mark.parametrize("text", ["", "   ", "\t\n"])
    def test_empty(self, small_vocab, text):
        with pytest.raises(emb.EmptyInputError):
            emb.tokenize(text, small_vocab)


class TestLocationVector:
    def test_full_image(self):
        np.testing.assert_allclose(emb.location_vector((0, 0, 640, 480), (640, 480)), [0, 0, 1, 1, 1])

    def test_hand_value(self):
        np.testing.assert_allclose(emb.location_vector((10, 20, 60, 120), (100, 200)), [0.1, 0.1, 0.6, 0.6, 0.25])

    def test_degenerate(self):
        with pytest.raises(emb.InvalidBoxError):
            emb.location_vector((5, 5, 5, 9), (10, 10))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 90), st.floats(0, 90), st.floats(1, 10), st.floats(1, 10), st.floats(0, 5))
    def test_area_identity_and_monotone(self, x1, y1, w, h, grow):
        box = (x1, y1, x1 + w, y1 + h)
        b = emb.location_vector(box, (100, 100))
        assert np.all(b[:4] >= 0) and np.all(b[:4] <= 1)
        assert 0 < b[4] <= 1
        assert b[4] == pytest.approx((b[2] - b[0]) * (b[3] - b[1]))
        bigger = (x1, y1, min(100, x1 + w + grow), min(100, y1 + h + grow))
        assert emb.location_vector(bigger, (100, 100))[4] >= b[4]


class TestEmbedText:
    def test_position_is_the_only_difference(self, tiny_params):
        pre = emb.text_sum([7, 7], tiny_params).data
        pos = tiny_params["embeddings.position"].data
        np.testing.assert_allclose(pre[0] - pre[1], pos[0] - pos[1], atol=1e-6)

    def test_zero_tables_give_beta(self, tiny_params):
        p = tiny_params.copy()
        for name in ("embeddings.word", "embeddings.position", "embeddings.segment"):
            p[name].data[:] = 0
        p["embeddings.text_ln.beta"].data[:] = np.arange(16)
        out = emb.embed_text([2, 8, 9, 3], p).data
        np.testing.assert_allclose(out, np.tile(np.arange(16), (4, 1)), atol=1e-6)

    @pytest.mark.parametrize("length", [1, 5, 24])
    def test_shape(self, tiny_params, length):
        assert emb.embed_text(np.full(length, 8), tiny_params).shape == (length, 16)

    def test_out_of_range_id(self, tiny_params):
        with pytest.raises(IndexError):
            emb.embed_text([9999], tiny_params)


class TestEmbedRegions:
    def test_identical_regions_embed_identically(self, tiny_params):
        r = RegionSet(np.ones((2, 6)), [[1, 1, 5, 5], [1, 1, 5, 5]], [0, 0], [0.9, 0.9], (10, 10))
        out = emb.embed_regions(r, tiny_params).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_zero_features_reduce_to_location_terms(self, tiny_params):
        r = RegionSet(np.zeros((3, 6)), [[0, 0, 5, 5], [2, 2, 9, 9], [1, 0, 3, 7]], [0, 1, 2], [.5] * 3, (10, 10))
        got = emb.embed_regions(r, tiny_params).data
        p = tiny_params
        loc = r.locations() @ p["embeddings.location.weight"].data + p["embeddings.location.bias"].data
        pre = loc + p["embeddings.word"].data[emb.IMG] + p["embeddings.segment"].data[1]
        want = nx.layer_norm(nx.Tensor(pre), p["embeddings.region_ln.gamma"], p["embeddings.region_ln.beta"]).data
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_shape(self, tiny_params):
        assert emb.embed_regions(regions(4), tiny_params).shape == (4, 16)

    def test_width_mismatch(self, tiny_params):
        with pytest.raises(nx.DimensionError):
            emb.embed_regions(regions(2, d_vis=7), tiny_params)

    def test_permutation_equivariant(self, tiny_params):
        r = regions(5)
        perm = np.array([3, 0, 4, 1, 2])
        base = emb.embed_regions(r, tiny_params).data
        np.testing.assert_allclose(emb.embed_regions(r.subset(perm), tiny_params).data, base[perm], atol=1e-6)


class TestInjectReferences:
    def test_empty_map(self):
        rows = nx.Tensor(np.ones((3, 4)))
        assert emb.inject_references(rows, {}, nx.Tensor(np.ones((2, 4)))) is rows

    def test_zero_region_embedding(self):
        rows = nx.Tensor(np.arange(12.0).reshape(3, 4))
        out = emb.inject_references(rows, {1: 0}, nx.Tensor(np.zeros((2, 4))))
        np.testing.assert_array_equal(out.data, rows.data)

    def test_same_object_same_term(self):
        rows = nx.Tensor(np.zeros((3, 4)))
        reg = nx.Tensor(np.arange(8.0).reshape(2, 4))
        out = emb.inject_references(rows, {0: 1, 2: 1}, reg).data
        np.testing.assert_array_equal(out[0], out[2])
        np.testing.assert_array_equal(out[1], np.zeros(4))

    def test_dangling(self):
        with pytest.raises(ReferenceError):
            emb.inject_references(nx.Tensor(np.zeros((2, 4))), {0: 5}, nx.Tensor(np.zeros((2, 4))))


class TestAssemble:
    def test_layout(self, tiny_params):
        a = emb.assemble(TokenSequence([8, 9]), regions(3), tiny_params, max_seq_len=24)
        assert a.embedded.shape == (7, 16)
        assert a.roles.tolist() == [emb.ROLE_CLS, emb.ROLE_TEXT, emb.ROLE_TEXT, emb.ROLE_SEP] + [emb.ROLE_REGION] * 3
        assert a.token_ids[:4].tolist() == [emb.CLS, 8, 9, emb.SEP]
        assert a.region_index.tolist() == [-1] * 4 + [0, 1, 2]

    def test_mask_counts_real_positions(self, tiny_params):
        a = emb.assemble(TokenSequence([8, 9]), regions(3), tiny_params, max_seq_len=24, pad_to=10)
        assert a.mask.sum() == 1 + 2 + 1 + 3
        assert not a.mask[7:].any()

    def test_truncation_policy(self):
        # 40 tokens, 10 regions, budget 30: text keeps max(30 - 10 - 2, 16) = 18, regions get the remaining 10
        assert emb.plan_lengths(40, 10, 30) == (18, 10)
        # text already short enough: everything fits
        assert emb.plan_lengths(5, 10, 30) == (5, 10)
        # many regions: text floor of 16 wins, regions capped to what is left
        assert emb.plan_lengths(40, 50, 30) == (16, 12)
        # tiny budget: floor limited by the room available
        assert emb.plan_lengths(10, 10, 5) == (3, 0)

    def test_overlong_pair_is_truncated_from_the_tail(self, tiny_params):
        tokens = TokenSequence(list(range(6, 36)))
        a = emb.assemble(tokens, regions(10), tiny_params, max_seq_len=24)
        t, i = emb.plan_lengths(30, 10, 24)
        assert (t, i) == (16, 6)
        assert a.token_ids[1:1 + t].tolist() == list(range(6, 6 + t))
        assert len(a.mask) == 24 and a.region_index.max() == i - 1

    def test_empty_input(self, tiny_params):
        with pytest.raises(emb.EmptyInputError):
            emb.collate([emb.SequenceItem([], None)], 24, 6)

    def test_padding_never_leaks(self, tiny_model, tiny_params):
        a = emb.assemble(TokenSequence([8, 9, 10]), regions(2), tiny_params, max_seq_len=24, pad_to=12)
        base = encoder_forward(a.embedded, a.mask, tiny_model.encoder, tiny_params).data
        noisy = a.embedded.data.copy()
        noisy[~a.mask] = np.random.default_rng(0).normal(size=((~a.mask).sum(), 16)) * 10
        out = encoder_forward(nx.Tensor(noisy), a.mask, tiny_model.encoder, tiny_params).data
        np.testing.assert_allclose(out[a.mask], base[a.mask], atol=1e-5)

    def test_batch_matches_single(self, tiny_model, tiny_params):
        items = [emb.SequenceItem([8, 9, 10], regions(2)), emb.SequenceItem([11], regions(4, seed=1))]
        batch = emb.collate(items, 24, 6)
        joint = emb.embed_batch(batch, tiny_params).data
        for k, it in enumerate(items):
            single = emb.assemble(TokenSequence(it.token_ids), it.regions, tiny_params, 24).embedded.data
            np.testing.assert_allclose(joint[k, :len(single)], single, atol=1e-6)
