import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vlpretrain import numerics as nx
from vlpretrain import retrieval as rt
from vlpretrain.model import init_params
from vlpretrain.numerics import Tensor
from vlpretrain.retrieval import RetrievalConfig, ScoreMatrix


def brute_force_recall(scores, truth, k):
    """Sort every row in full and check membership, written independently of ranking()."""
    hits = 0
    for q, row in enumerate(scores):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += any(c in truth[q] for c in order[:k])
    return hits / len(scores)


class TestTriplet:
    @pytest.mark.parametrize("pos, negs, want", [
        (0.9, [0.1, 0.2, 0.3], 0.0),
        (0.5, [0.1, 0.6, 0.2], 0.3),
        (0.4, [0.4], 0.2),
    ])
    def test_values(self, pos, negs, want):
        got = rt.hardest_triplet_loss(Tensor(np.array(pos), dtype=np.float64), np.array(negs), 0.2).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_no_negatives(self):
        with pytest.raises(ValueError):
            rt.hardest_triplet_loss(0.5, np.zeros(0))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(0, 1)),
           st.floats(0.01, 1))
    def test_nonnegative_and_zero_iff_margin_met(self, pos, negs, margin):
        loss = rt.hardest_triplet_loss(Tensor(np.array(pos), dtype=np.float64), negs, margin).item()
        assert loss >= 0
        assert (loss == 0) == (pos >= negs.max() + margin)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(0, 1)), st.floats(0, 1))
    def test_easier_negative_changes_nothing(self, pos, negs, frac):
        extra = negs.max() * frac
        a = rt.hardest_triplet_loss(Tensor(np.array(pos), dtype=np.float64), negs).item()
        b = rt.hardest_triplet_loss(Tensor(np.array(pos), dtype=np.float64), np.append(negs, extra)).item()
        assert a == b

    def test_gradient_reaches_hardest_only(self):
        negs = Tensor(np.array([0.1, 0.6, 0.2]), requires_grad=True, dtype=np.float64)
        pos = Tensor(np.array(0.5), requires_grad=True, dtype=np.float64)
        nx.backward(rt.hardest_triplet_loss(pos, negs))
        np.testing.assert_array_equal(negs.grad, [0, 1, 0])
        assert pos.grad == -1

    def test_bidirectional(self):
        pos = np.array([0.5])
        t2i, i2t = np.array([[0.4]]), np.array([[0.35]])  # 0.1 and 0.05 after the 0.2 margin
        both = rt.bidirectional_loss(pos, t2i, i2t, RetrievalConfig()).item()
        assert both == pytest.approx(0.15, abs=1e-6)
        only = rt.bidirectional_loss(pos, t2i, i2t, RetrievalConfig(image_to_text_weight=0.0)).item()
        assert only == pytest.approx(0.1, abs=1e-6)
        assert rt.bidirectional_loss(pos, [[0.1]], [[0.2]]).item() == 0.0


class TestRecall:
    def test_identity_dominant(self):
        m = ScoreMatrix(np.eye(3) + 0.1, [{0}, {1}, {2}])
        assert rt.recall_at_k(m, 1) == 1.0

    def test_correct_always_second(self):
        scores = np.array([[0.5, 0.9, 0.1], [0.2, 0.3, 0.8], [0.7, 0.1, 0.6]])
        m = ScoreMatrix(scores, [{0}, {1}, {2}])
        assert rt.recall_at_k(m, 1) == 0.0
        assert rt.recall_at_k(m, 2) == 1.0
        assert rt.recall_at_k(m, 5) == 1.0

    def test_single_query_clamped(self):
        assert rt.recall_at_k(ScoreMatrix([[0.1, 0.9]], [{0}]), 10) == 1.0

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            rt.recall_at_k(ScoreMatrix([[0.1]], [{0}]), 0)

    def test_ties_go_to_lower_index(self):
        m = ScoreMatrix([[0.5, 0.5, 0.5]], [{1}])
        assert rt.recall_at_k(m, 1) == 0.0
        assert rt.recall_at_k(m, 2) == 1.0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scores = np.round(rng.random((20, 20)), 1)  # rounding forces ties
            truth = [set(rng.choice(20, size=rng.integers(1, 3), replace=False).tolist()) for _ in range(20)]
            m = ScoreMatrix(scores, truth)
            for k in (1, 5, 10):
                assert rt.recall_at_k(m, k) == brute_force_recall(scores, truth, k)

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.int64, (6, 7), elements=st.integers(-20, 20)), st.integers(1, 7))
    def test_monotone_transform_invariance(self, grid, k):
        # a coarse grid keeps the transforms strictly increasing in floating point
        scores = grid / 4.0
        truth = [{q % 7} for q in range(6)]
        base = rt.recall_at_k(ScoreMatrix(scores, truth), k)
        assert rt.recall_at_k(ScoreMatrix(1 / (1 + np.exp(-scores)), truth), k) == base
        assert rt.recall_at_k(ScoreMatrix(3 * scores + 1, truth), k) == base

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
    def test_non_decreasing_in_k(self, scores):
        m = ScoreMatrix(scores, [{i} for i in range(5)])
        values = [rt.recall_at_k(m, k) for k in range(1, 6)]
        assert values == sorted(values) and values[-1] == 1.0

    def test_random_scores_near_chance(self):
        rng = np.random.default_rng(1)
        d = 50
        r1 = np.mean([rt.recall_at_k(ScoreMatrix(rng.random((d, d)), [{i} for i in range(d)]), 1) for _ in range(200)])
        assert r1 == pytest.approx(1 / d, abs=0.01)


class TestEvaluate:
    def test_report_fields_and_determinism(self, tiny_model, tiny_params, examples):
        a = rt.evaluate_retrieval(examples[:6], tiny_model, tiny_params, (1, 5), "ck", 3)
        b = rt.evaluate_retrieval(examples[:6], tiny_model, tiny_params, (1, 5), "ck", 3)
        assert a == b
        assert len(a) == 4
        assert set(a[0]) == {"direction", "K", "recall", "num_queries", "num_candidates", "checkpoint_id", "seed"}
        assert {r["direction"] for r in a} == {"sentence_retrieval", "image_retrieval"}

    def test_multi_caption_images(self, tiny_model, tiny_params, examples):
        from dataclasses import replace
        data = [examples[0], replace(examples[1], image_id=examples[0].image_id, regions=examples[0].regions),
                examples[2]]
        mats = rt.retrieval_matrices(data, tiny_model, tiny_params)
        assert mats["sentence_retrieval"].scores.shape == (2, 3)
        assert mats["sentence_retrieval"].truth == [{0, 1}, {2}]
        assert mats["image_retrieval"].truth == [{0}, {0}, {1}]

    def test_zero_shot_protocol(self, tiny_model, tiny_params, examples):
        with pytest.raises(rt.ProtocolError):
            rt.zero_shot_eval(tiny_params, tiny_model, examples[:4], "finetuned-retrieval")
        shared = rt.zero_shot_eval(tiny_params, tiny_model, examples[:4], "pretrained", (1,))
        assert shared == rt.evaluate_retrieval(examples[:4], tiny_model, tiny_params, (1,))

    def test_score_is_probability(self, tiny_model, tiny_params, examples):
        s = rt.score_pair(examples[0].tokens, examples[0].regions, tiny_model, tiny_params)
        assert 0 < s < 1
        zero = init_params(tiny_model)
        assert rt.score_pair(examples[0].tokens, examples[0].regions, tiny_model, zero) == pytest.approx(0.5)


class TestRetrievalLoss:
    def test_negatives_avoid_own_image(self, examples, rng):
        for i in range(len(examples)):
            caps, imgs = rt.sample_negatives(examples, i, rng, 3)
            assert all(examples[j].image_id != examples[i].image_id for j in (*caps, *imgs))

    def test_gradient_through_encoder(self, tiny_model, tiny_params, examples):
        rcfg = RetrievalConfig(margin=1.5, negatives_per_positive=2)  # wide margin keeps the relu active
        negatives = [rt.sample_negatives(examples, i, np.random.default_rng(i), 2) for i in (0, 1)]
        err = nx.grad_check(lambda p: rt.retrieval_loss(examples, [0, 1], tiny_model, p, rcfg, None, False, negatives),
                            tiny_params, coords_per_param=4)
        assert err <= 1e-4
