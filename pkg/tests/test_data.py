import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlpretrain import data as dt
from vlpretrain.embeddings import RegionSet
from vlpretrain.data import Manifest, PairRecord, SynthConfig


def crafted_regions(n, scores, d_vis=4):
    boxes = [[i, i, i + 5, i + 5] for i in range(n)]
    return RegionSet(np.arange(n * d_vis, dtype=np.float32).reshape(n, d_vis), boxes, np.zeros(n, dtype=int),
                     scores, (400, 400))


def same_record(a: PairRecord, b: PairRecord):
    assert (a.pair_id, a.image_id, a.caption) == (b.pair_id, b.image_id, b.caption)
    r, s = a.regions, b.regions
    assert r.features.astype("<f4").tobytes() == s.features.astype("<f4").tobytes()
    np.testing.assert_array_equal(r.boxes, s.boxes)
    np.testing.assert_array_equal(r.label_ids, s.label_ids)
    np.testing.assert_array_equal(r.scores, s.scores)
    assert tuple(r.image_size) == tuple(s.image_size)


def write_manifest(tmp_path, d_vis, num_labels=8, **kw):
    (tmp_path / "vocab.txt").write_text("\n".join(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[IMG]", "a"]))
    m = Manifest(d_vis=d_vis, num_labels=num_labels, vocab="vocab.txt", root=tmp_path, **kw)
    m.save(tmp_path / "manifest.json")
    return Manifest.load(tmp_path)


class TestRegionSelection:
    def test_150_regions_120_eligible(self):
        rng = np.random.default_rng(0)
        scores = np.concatenate([rng.uniform(0.25, 1.0, 120), rng.uniform(0.0, 0.15, 30)])
        rng.shuffle(scores)
        kept = dt.select_regions(crafted_regions(150, scores), cap=100, threshold=0.2)
        assert len(kept) == 100
        want = np.sort(np.argsort(-scores, kind="stable")[:100])
        np.testing.assert_array_equal(kept.scores, scores[want])

    def test_fewer_eligible_than_cap(self):
        scores = np.array([0.9, 0.1, 0.05, 0.15, 0.3])
        kept = dt.select_regions(crafted_regions(5, scores), cap=3, threshold=0.2)
        np.testing.assert_array_equal(kept.scores, [0.9, 0.15, 0.3])

    def test_below_cap_untouched(self):
        r = crafted_regions(5, np.linspace(0.1, 0.5, 5))
        assert dt.select_regions(r, cap=100) is r

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 20))
    def test_cap_and_no_inversions(self, scores, cap):
        scores = np.array(scores)
        kept = dt.select_regions(crafted_regions(len(scores), scores), cap=cap)
        assert len(kept) == min(cap, len(scores))
        if len(kept) < len(scores):
            dropped = np.setdiff1d(np.arange(len(scores)), (kept.boxes[:, 0]).astype(int))
            assert scores[dropped].max() <= kept.scores.min()


class TestPairFiles:
    def test_round_trip_inline_and_sidecar(self, tmp_path):
        cfg = SynthConfig(pairs=100, num_concepts=10, d_vis=5, seed=2)
        records = dt.generate_synthetic(cfg)
        m = write_manifest(tmp_path, 5, 10, region_cap=100)
        dt.write_pairs(records, tmp_path / "inline.jsonl")
        for a, b in zip(records, dt.load_pairs(tmp_path / "inline.jsonl", m), strict=True):
            same_record(a, b)
        dt.write_pairs(records, tmp_path / "side.jsonl", tmp_path / "feats.f32")
        m.features = "feats.f32"
        for a, b in zip(records, dt.load_pairs(tmp_path / "side.jsonl", m), strict=True):
            same_record(a, b)
        first = json.loads((tmp_path / "side.jsonl").read_text().splitlines()[0])
        assert "feature_ref" in first["regions"][0]

    def test_line_numbered_parse_error(self, tmp_path):
        m = write_manifest(tmp_path, 4)
        dt.write_pairs([PairRecord("p", "i", "a", crafted_regions(2, [0.5, 0.5]))], tmp_path / "p.jsonl")
        with open(tmp_path / "p.jsonl", "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(dt.ParseError, match=":2:"):
            dt.load_pairs(tmp_path / "p.jsonl", m)

    def test_width_mismatch(self, tmp_path):
        m = write_manifest(tmp_path, 7)
        dt.write_pairs([PairRecord("p", "i", "a", crafted_regions(2, [0.5, 0.5]))], tmp_path / "p.jsonl")
        with pytest.raises(dt.SchemaError, match="d_vis"):
            dt.load_pairs(tmp_path / "p.jsonl", m)

    def test_empty_caption(self):
        with pytest.raises(dt.SchemaError):
            PairRecord("p", "i", "   ", crafted_regions(1, [0.5]))

    def test_cap_applied_on_load(self, tmp_path):
        m = write_manifest(tmp_path, 4, region_cap=3)
        dt.write_pairs([PairRecord("p", "i", "a", crafted_regions(6, np.linspace(0.9, 0.4, 6)))], tmp_path / "p.jsonl")
        assert len(dt.load_pairs(tmp_path / "p.jsonl", m)[0].regions) == 3
        assert len(dt.load_pairs(tmp_path / "p.jsonl", m, cap=100)[0].regions) == 6

    def test_fraction_is_deterministic(self, tmp_path):
        cfg = SynthConfig(pairs=200, num_concepts=10, d_vis=4, seed=1)
        m = write_manifest(tmp_path, 4, 10)
        dt.write_pairs(dt.generate_synthetic(cfg), tmp_path / "p.jsonl")
        a = [r.pair_id for r in dt.load_pairs(tmp_path / "p.jsonl", m, fraction=0.5)]
        b = [r.pair_id for r in dt.load_pairs(tmp_path / "p.jsonl", m, fraction=0.5)]
        quarter = {r.pair_id for r in dt.load_pairs(tmp_path / "p.jsonl", m, fraction=0.25)}
        assert a == b
        assert 70 < len(a) < 130
        assert quarter <= set(a)


class TestBatches:
    def test_sizes(self, examples):
        sizes = [len(idx) for idx, _ in dt.make_batches(examples[:10], 4, 24, 6, np.random.default_rng(0))]
        assert sizes == [4, 4, 2]

    def test_masks_are_prefixes(self, examples):
        for idx, batch in dt.make_batches(examples, 5, 24, 6, np.random.default_rng(1)):
            for b in range(len(idx)):
                n = int(batch.mask[b].sum())
                assert batch.mask[b, :n].all() and not batch.mask[b, n:].any()
            assert batch.mask.shape[1] == batch.mask.sum(axis=1).max() <= 24

    def test_seeded_order(self, examples):
        order = lambda s: [i.tolist() for i in dt.batch_indices(len(examples), 3, np.random.default_rng(s))]
        assert order(4) == order(4)
        assert order(4) != order(5)
        assert sorted(sum(order(4), [])) == list(range(len(examples)))

    def test_unshuffled(self):
        assert [i.tolist() for i in dt.batch_indices(5, 2, None, shuffle=False)] == [[0, 1], [2, 3], [4]]


class TestSynthetic:
    def test_deterministic(self):
        cfg = SynthConfig(pairs=20, seed=3)
        a, b = dt.generate_synthetic(cfg), dt.generate_synthetic(cfg)
        for x, y in zip(a, b):
            same_record(x, y)

    def test_structure(self, synth_cfg, vocab):
        names = dt.concept_names(synth_cfg.num_concepts)
        assert len({vocab.id(n) for n in names}) == len(names)
        for rec in dt.generate_synthetic(synth_cfg):
            assert 2 <= len(rec.regions) <= 5
            for c in rec.regions.label_ids:
                assert names[c] in rec.caption.split()

    def test_shared_concepts_share_prototypes(self):
        cfg = SynthConfig(pairs=40, d_vis=16, noise=0.1, seed=4)
        protos = dt.concept_prototypes(cfg)
        for rec in dt.generate_synthetic(cfg):
            dist = np.linalg.norm(rec.regions.features - protos[rec.regions.label_ids], axis=1)
            assert dist.max() < 0.1 * (np.sqrt(16) + 5)

    def test_linear_probe(self):
        cfg = SynthConfig(pairs=300, num_concepts=8, d_vis=16, seed=6, unique_concept_sets=False)
        recs = dt.generate_synthetic(cfg)
        x = np.concatenate([r.regions.features for r in recs])
        y = np.concatenate([r.regions.label_ids for r in recs])
        half = len(y) // 2
        design = np.hstack([x, np.ones((len(x), 1))])
        w, *_ = np.linalg.lstsq(design[:half], np.eye(cfg.num_concepts)[y[:half]], rcond=None)
        acc = np.mean(np.argmax(design[half:] @ w, axis=1) == y[half:])
        assert acc >= 0.99

    def test_too_many_unique_sets(self):
        with pytest.raises(ValueError, match="distinct"):
            dt.generate_synthetic(SynthConfig(pairs=300, num_concepts=8))

    def test_unique_sets(self):
        recs = dt.generate_synthetic(SynthConfig(pairs=100, num_concepts=8, seed=0))
        sets = {frozenset(r.regions.label_ids.tolist()) for r in recs}
        assert len(sets) == 100

    def test_corpus_directory(self, tmp_path):
        cfg = SynthConfig(pairs=10, seed=0)
        m = dt.write_corpus(dt.generate_synthetic(cfg), cfg, tmp_path)
        loaded = Manifest.load(tmp_path / "manifest.json")
        assert (loaded.d_vis, loaded.num_labels, loaded.records) == (cfg.d_vis, cfg.num_concepts, 10)
        assert len(dt.load_pairs(loaded.resolve(loaded.pairs), loaded)) == 10
        assert loaded.vocabulary().tokens == m.vocabulary().tokens
