import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrhp.dataset import (Dataset, DatasetError, ProductRecord, ReviewRecord, RoiFeatureMatrix,
                          SyntheticSpec, batch_iter, build_vocab, encode_text, generate_synthetic,
                          load_dataset, load_roi_features, make_ranking_pairs, roi_input,
                          topic_overlap, validate, write_dataset, write_roi_features)

SMALL = dict(n_products=2, reviews_per_product=3, vocab_size=30, l_p=4, l_r=5, m=2, dim=4, topic_size=5)


def feature_bytes(m, dim, values, magic=b"MRHPFEAT", version=1):
    return struct.pack("<8sIII", magic, version, m, dim) + np.asarray(values, "<f4").tobytes()


def review(rid, label, n_img=1, dim=4):
    imgs = [RoiFeatureMatrix(np.ones((1, dim)))] * n_img
    return ReviewRecord(rid, [1, 2, 3], imgs, label)


class TestRoiFeatures:
    def test_hand_fixture(self, tmp_path):
        f = tmp_path / "a.bin"
        f.write_bytes(feature_bytes(1, 4, [1, 2, 3, 4]))
        feats = load_roi_features(f)
        assert feats.values.shape == (1, 4)
        assert feats.values.dtype == np.float64
        assert feats.values.tolist() == [[1.0, 2.0, 3.0, 4.0]]

    def test_truncated(self, tmp_path):
        f = tmp_path / "a.bin"
        f.write_bytes(feature_bytes(2, 4, [1, 2, 3, 4]))
        with pytest.raises(DatasetError, match="truncated"):
            load_roi_features(f)

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "a.bin"
        f.write_bytes(feature_bytes(1, 1, [1], magic=b"NOTAFEAT"))
        with pytest.raises(DatasetError, match="magic"):
            load_roi_features(f)

    def test_zero_objects(self, tmp_path):
        f = tmp_path / "a.bin"
        f.write_bytes(feature_bytes(0, 4, []))
        with pytest.raises(DatasetError):
            load_roi_features(f)

    def test_dim_mismatch(self, tmp_path):
        f = tmp_path / "a.bin"
        f.write_bytes(feature_bytes(1, 4, [1, 2, 3, 4]))
        with pytest.raises(DatasetError, match="dim"):
            load_roi_features(f, expected_dim=8)

    def test_non_finite(self, tmp_path):
        f = tmp_path / "a.bin"
        f.write_bytes(feature_bytes(1, 2, [1, np.nan]))
        with pytest.raises(DatasetError, match="finite"):
            load_roi_features(f)

    def test_write_is_byte_stable(self, tmp_path):
        raw = feature_bytes(2, 3, np.arange(6) / 7)
        (tmp_path / "a.bin").write_bytes(raw)
        write_roi_features(tmp_path / "b.bin", load_roi_features(tmp_path / "a.bin"))
        assert (tmp_path / "b.bin").read_bytes() == raw

    def test_record_invariants(self):
        with pytest.raises(DatasetError):
            RoiFeatureMatrix(np.zeros((0, 3)))
        with pytest.raises(DatasetError):
            RoiFeatureMatrix(np.array([[np.inf]]))


class TestManifest:
    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(**SMALL))
        write_dataset(tmp_path / "d.jsonl", ds)
        back = load_dataset(tmp_path / "d.jsonl")
        assert back == ds

    def test_write_load_write_bytes(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(**SMALL))
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        write_dataset(tmp_path / "a" / "d.jsonl", ds)
        write_dataset(tmp_path / "b" / "d.jsonl", load_dataset(tmp_path / "a" / "d.jsonl"))
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def _rewrite(self, path, fn):
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        fn(rec)
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")

    def test_label_out_of_range_names_review(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(path, generate_synthetic(SyntheticSpec(**SMALL)))
        self._rewrite(path, lambda rec: rec["reviews"][1].update(label=7))
        with pytest.raises(DatasetError, match="p00000-r001.*label"):
            load_dataset(path)

    def test_missing_feature_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(path, generate_synthetic(SyntheticSpec(**SMALL)))
        self._rewrite(path, lambda rec: rec.update(images=["nowhere.bin"]))
        with pytest.raises(DatasetError, match="missing feature file"):
            load_dataset(path)

    def test_feature_file_with_zero_objects(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(path, generate_synthetic(SyntheticSpec(**SMALL)))
        (tmp_path / "d_features" / "p00000_img0.bin").write_bytes(feature_bytes(0, 4, []))
        with pytest.raises(DatasetError, match="p00000"):
            load_dataset(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"vocab_size": 5, "feature_dim": 2}\n{"product_id": \n')
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(path)

    def test_dim_mismatch_against_header(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(path, generate_synthetic(SyntheticSpec(**SMALL)))
        lines = path.read_text().splitlines()
        lines[0] = json.dumps({"vocab_size": 30, "feature_dim": 8})
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="dim"):
            load_dataset(path)


class TestValidate:
    def _ds(self, reviews, tokens=(1, 2, 3)):
        return Dataset(10, 4, [ProductRecord("p", list(tokens), [], reviews)])

    def test_single_review_rejected(self):
        with pytest.raises(DatasetError, match="reviews"):
            validate(self._ds([review("a", 1)]))

    def test_short_text_rejected(self):
        with pytest.raises(DatasetError, match="tokens"):
            validate(self._ds([review("a", 1), review("b", 2)], tokens=(1, 2)))

    def test_token_out_of_vocab(self):
        with pytest.raises(DatasetError, match="'p'.*tokens"):
            validate(self._ds([review("a", 1), review("b", 2)], tokens=(1, 2, 10)))

    def test_duplicate_review_id(self):
        with pytest.raises(DatasetError, match="duplicate"):
            validate(self._ds([review("a", 1), review("a", 2)]))


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(**SMALL, seed=5)
        assert generate_synthetic(spec) == generate_synthetic(spec)

    def test_seed_changes_data(self):
        assert generate_synthetic(SyntheticSpec(**SMALL, seed=1)) != generate_synthetic(SyntheticSpec(**SMALL, seed=2))

    def test_generated_data_loads(self, tmp_path):
        write_dataset(tmp_path / "d.jsonl", generate_synthetic(SyntheticSpec(**SMALL)))
        load_dataset(tmp_path / "d.jsonl")

    def test_no_signal_matches_chance(self):
        # Under signal 0 every review token is uniform on 1..V-1, so hits on the
        # product's token set are Binomial(l_r, |set| / (V - 1)) per review.
        spec = SyntheticSpec(n_products=150, reviews_per_product=10, vocab_size=200, dim=4,
                             signal_strength=0.0, seed=3)
        ds = generate_synthetic(spec)
        hits, mean, var = 0.0, 0.0, 0.0
        for p in ds.products:
            q = len(set(p.tokens)) / (spec.vocab_size - 1)
            for r in p.reviews:
                hits += sum(t in set(p.tokens) for t in r.tokens)
                mean += spec.l_r * q
                var += spec.l_r * q * (1 - q)
        assert abs(hits - mean) <= 3 * np.sqrt(var)

    def test_label4_overlaps_more_than_label0(self):
        ds = generate_synthetic(SyntheticSpec(n_products=100, dim=4, seed=4))
        by_label = {0: [], 4: []}
        for p in ds.products:
            for r in p.reviews:
                if r.label in by_label:
                    by_label[r.label].append(topic_overlap(p, r))
        assert np.mean(by_label[4]) > np.mean(by_label[0])

    @pytest.mark.parametrize("signal", [0.5, 1.0])
    def test_label_overlap_correlation(self, signal):
        ds = generate_synthetic(SyntheticSpec(n_products=120, dim=4, signal_strength=signal, seed=11))
        labels, overlaps = zip(*[(r.label, topic_overlap(p, r)) for p in ds.products for r in p.reviews])
        assert len(labels) >= 1000
        assert np.corrcoef(labels, overlaps)[0, 1] > 0.3

    def test_image_signal_tracks_label(self):
        ds = generate_synthetic(SyntheticSpec(n_products=60, dim=64, seed=2))
        proj = {0: [], 4: []}
        for p in ds.products:
            direction = p.image_features[0].values.mean(axis=0)
            direction /= np.linalg.norm(direction)
            for r in p.reviews:
                if r.label in proj:
                    proj[r.label].append(float(r.image_features[0].values.mean(axis=0) @ direction))
        assert np.mean(proj[4]) > np.mean(proj[0]) + 0.5

    def test_spec_validation(self):
        with pytest.raises(DatasetError):
            SyntheticSpec(signal_strength=1.5)
        with pytest.raises(DatasetError):
            SyntheticSpec(n_products=0)
        with pytest.raises(DatasetError):
            SyntheticSpec(label_distribution=[1.0, 0.0])

    def test_spec_from_json(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"n_products": 3, "seed": 9}))
        spec = SyntheticSpec.from_json(tmp_path / "s.json")
        assert (spec.n_products, spec.seed, spec.dim) == (3, 9, 2048)


class TestRankingPairs:
    def product(self, labels):
        return ProductRecord("p", [1, 2, 3], [], [review(f"r{i}", lab) for i, lab in enumerate(labels)])

    def test_only_valid_pairs(self):
        p = self.product([4, 1, 1])
        r1, r2, r3 = p.reviews
        pairs = make_ranking_pairs(p, np.random.default_rng(0))
        assert {(a.review_id, b.review_id) for a, b in pairs} == {("r0", "r1"), ("r0", "r2")}
        assert all((a, b) in [(r1, r2), (r1, r3)] for a, b in pairs)

    def test_ties_give_nothing(self):
        assert make_ranking_pairs(self.product([2, 2]), np.random.default_rng(0)) == []

    def test_forced_pair(self):
        p = self.product([3, 1])
        assert make_ranking_pairs(p, np.random.default_rng(0)) == [(p.reviews[0], p.reviews[1])]

    @given(st.lists(st.integers(0, 4), min_size=2, max_size=10), st.integers(1, 8), st.integers(0, 99))
    def test_pairs_strictly_ordered_and_capped(self, labels, cap, seed):
        pairs = make_ranking_pairs(self.product(labels), np.random.default_rng(seed), cap)
        n_valid = sum(a > b for a in labels for b in labels)
        assert len(pairs) == min(cap, n_valid)
        assert all(a.label > b.label for a, b in pairs)
        assert len({(id(a), id(b)) for a, b in pairs}) == len(pairs)


class TestBatchIter:
    def test_sizes(self):
        assert [len(b) for b in batch_iter(list(range(10)), 4, seed=0)] == [4, 4, 2]

    def test_same_seed_same_order(self):
        assert list(batch_iter(list(range(10)), 4, 3)) == list(batch_iter(list(range(10)), 4, 3))

    def test_epochs_differ(self):
        orders = [tuple(x for b in batch_iter(list(range(10)), 4, 0, epoch=e) for x in b) for e in range(5)]
        assert len(set(orders)) == 5

    def test_every_sample_once(self):
        out = [x for b in batch_iter(list(range(37)), 5, 1, epoch=2) for x in b]
        assert sorted(out) == list(range(37))

    def test_batch_size_one(self):
        with pytest.raises(ValueError):
            list(batch_iter([1, 2, 3], 1, 0))

    @settings(max_examples=30)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.integers(2, 9), st.integers(0, 50))
    def test_groups_contiguous(self, keys, bsz, seed):
        samples = list(enumerate(keys))
        flat = [s for b in batch_iter(samples, bsz, seed, group_key=lambda s: s[1]) for s in b]
        assert sorted(flat) == samples
        seen_keys = [k for _, k in flat]
        runs = [k for i, k in enumerate(seen_keys) if i == 0 or seen_keys[i - 1] != k]
        assert len(runs) == len(set(keys))


class TestText:
    def test_vocab_min_freq(self):
        vocab = build_vocab(["good phone good", "bad phone", "rare"])
        assert vocab == {"<unk>": 0, "good": 1, "phone": 2}

    def test_encode_unknown(self):
        vocab = build_vocab(["a a b b"])
        assert encode_text("A b zzz", vocab) == [1, 2, 0]


class TestRoiInput:
    def test_no_images_single_zero_row(self):
        assert roi_input([], 3).tolist() == [[0.0, 0.0, 0.0]]

    def test_concat_and_cap(self):
        imgs = [RoiFeatureMatrix(np.full((20, 2), k)) for k in range(2)]
        out = roi_input(imgs, 2)
        assert out.shape == (32, 2)
        assert out[19].tolist() == [0.0, 0.0] and out[20].tolist() == [1.0, 1.0]
