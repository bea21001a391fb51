import dataclasses
import logging

import numpy as np
import pytest

from mrhp import autodiff as ad
from mrhp.config import ConfigError, TrainConfig
from mrhp.dataset import (DatasetError, ProductRecord, ReviewRecord, RoiFeatureMatrix, SyntheticSpec,
                          generate_synthetic)
from mrhp.harness import training
from mrhp.harness.checkpoint import Checkpoint, CheckpointError
from mrhp.harness.evaluation import (distance_analysis, evaluate, predict_scores, random_scores,
                                     report_from_scores, score_dataset, sort_scores, token_distances)
from mrhp.harness.training import TrainingDiverged, in_batch_pairs, negative_mask, split_dataset, train
from mrhp.model import MRHPModel

TINY = TrainConfig(d=8, d_emb=6, depth=1, batch_size=6, epochs=1, heads=2, seed=0)
SPEC = SyntheticSpec(n_products=12, reviews_per_product=4, vocab_size=40, l_p=5, l_r=5, m=2, dim=6,
                     topic_size=6, seed=0)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SPEC)


@pytest.fixture(scope="module")
def trained(data):
    train_ds, _ = split_dataset(data, 0.25, 0)
    return train(dataclasses.replace(TINY, epochs=2), train_ds)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.d, cfg.d_emb, cfg.depth, cfg.batch_size, cfg.margin, cfg.o_p, cfg.o_n, cfg.tau) == \
            (128, 300, 5, 32, 1.0, 2.0, 0.0, 3)

    def test_round_trip(self, tmp_path):
        import json
        (tmp_path / "c.json").write_text(json.dumps(TINY.to_dict()))
        assert TrainConfig.from_json(tmp_path / "c.json") == TINY

    @pytest.mark.parametrize("kw", [dict(batch_size=1), dict(d=10, heads=4), dict(contrastive="x"),
                                    dict(o_p=0.0, o_n=1.0), dict(tau=5), dict(lr=0.0)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})


class TestModel:
    def test_mixed_shapes_keep_input_order(self):
        rng = np.random.default_rng(0)
        prod = ProductRecord("p", [1, 2, 3], [RoiFeatureMatrix(rng.standard_normal((2, 6)))], [])
        reviews = [ReviewRecord(f"r{i}", list(range(1, 4 + i % 2)), [RoiFeatureMatrix(rng.standard_normal((1 + i % 3, 6)))], 2)
                   for i in range(5)]
        prod.reviews = reviews
        model = MRHPModel(TINY, 40, 6)
        joint = model.score_samples([(prod, r) for r in reviews])
        single = [model.score_samples([(prod, r)])[0] for r in reviews]
        np.testing.assert_allclose(joint, single, atol=1e-13)

    def test_score_independent_of_other_reviews(self, data):
        model = MRHPModel(TINY, data.vocab_size, data.feature_dim)
        p = data.products[0]
        alone = model.score_samples([(p, p.reviews[0])])[0]
        together = model.score_samples([(p, r) for r in p.reviews])[0]
        assert alone == pytest.approx(together, abs=1e-13)

    def test_vocab_mismatch(self, data):
        model = MRHPModel(TINY, 3, data.feature_dim)
        with pytest.raises(ValueError, match="vocabulary"):
            model.score_samples([(data.products[0], data.products[0].reviews[0])])

    def test_same_seed_same_init(self):
        a = dict(MRHPModel(TINY, 10, 6).named_parameters())
        b = dict(MRHPModel(TINY, 10, 6).named_parameters())
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_image_less_review(self):
        p = ProductRecord("p", [1, 2, 3], [], [ReviewRecord("r", [1, 2, 3], [], 1)])
        assert np.isfinite(MRHPModel(TINY, 10, 6).score_samples([(p, p.reviews[0])])).all()


class TestTraining:
    def test_split_is_deterministic_and_disjoint(self, data):
        tr1, te1 = split_dataset(data, 0.25, 3)
        tr2, te2 = split_dataset(data, 0.25, 3)
        assert [p.product_id for p in te1.products] == [p.product_id for p in te2.products]
        ids_tr = {p.product_id for p in tr1.products}
        ids_te = {p.product_id for p in te1.products}
        assert not ids_tr & ids_te and len(ids_tr | ids_te) == len(data.products)
        assert len(ids_te) == 3

    def test_in_batch_pairs(self, data):
        p = data.products[0]
        batch = [(p, r) for r in p.reviews] + [(data.products[1], data.products[1].reviews[0])]
        pairs = in_batch_pairs(batch, np.random.default_rng(0), 5)
        for a, b in pairs:
            assert batch[a][0] is batch[b][0]
            assert batch[a][1].label > batch[b][1].label

    def test_negative_mask_drops_same_product(self, data):
        p, q = data.products[:2]
        batch = [(p, p.reviews[0]), (q, q.reviews[0]), (p, p.reviews[1])]
        mask = negative_mask(batch, [0, 1, 2], TINY)
        assert mask.tolist() == [[False, True, False], [True, False, True], [False, True, False]]
        assert negative_mask(batch, [0, 2], TINY).tolist() == [[False, False], [False, False]]
        assert negative_mask(batch, [0, 1], dataclasses.replace(TINY, same_product_negatives=True)) is None

    def test_same_product_negatives_change_training(self, data):
        a = train(TINY, data).checkpoint.tensors
        b = train(dataclasses.replace(TINY, same_product_negatives=True), data).checkpoint.tensors
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_zero_epochs_is_initialization(self, data):
        cfg = dataclasses.replace(TINY, epochs=0)
        res = train(cfg, data)
        init = dict(MRHPModel(cfg, data.vocab_size, data.feature_dim).named_parameters())
        assert res.history == []
        assert all(np.array_equal(res.checkpoint.tensors[k], init[k].data) for k in init)

    def test_deterministic(self, data):
        a = train(TINY, data)
        b = train(TINY, data)
        assert a.history_dicts() == b.history_dicts()
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()

    def test_history_fields(self, trained):
        assert [h.epoch for h in trained.history] == [1, 2]
        assert all(h.n_batches > 0 and np.isfinite(h.total) for h in trained.history)
        assert trained.checkpoint.step == sum(h.n_batches for h in trained.history)

    def test_divergence_reports_batch(self, data, monkeypatch):
        real = training.train_step
        calls = {"n": 0}

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 3:
                raise ad.NonFiniteError("mul produced non-finite values")
            return real(*args, **kw)

        monkeypatch.setattr(training, "train_step", flaky)
        with pytest.raises(TrainingDiverged, match="batch 2"):
            train(TINY, data)

    def test_contrastive_modes_change_training(self, data):
        a = train(TINY, data).checkpoint.tensors
        b = train(dataclasses.replace(TINY, contrastive="none"), data).checkpoint.tensors
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_ranking_loss_falls(self):
        # planted signal: epoch-5 ranking loss below epoch-1 in a majority of seeds
        spec = dataclasses.replace(SPEC, n_products=20)
        wins = 0
        for seed in range(5):
            ds = generate_synthetic(dataclasses.replace(spec, seed=seed))
            hist = train(dataclasses.replace(TINY, epochs=5, seed=seed, lr=3e-3), ds).history
            wins += hist[4].ranking < hist[0].ranking
        assert wins >= 3


class TestCheckpoint:
    def test_byte_round_trip(self, trained, tmp_path):
        trained.checkpoint.save(tmp_path / "a.bin")
        Checkpoint.load(tmp_path / "a.bin").save(tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_eval_after_round_trip_bitwise(self, trained, data, tmp_path):
        trained.checkpoint.save(tmp_path / "a.bin")
        before = score_dataset(trained.model, data)
        after = score_dataset(Checkpoint.load(tmp_path / "a.bin"), data)
        assert before == after

    def test_header_layout(self, trained):
        import struct
        raw = trained.checkpoint.to_bytes()
        magic, version, mlen = struct.unpack_from("<8sIQ", raw)
        assert magic == b"MRHPCKPT" and version == 1
        import json
        manifest = json.loads(raw[20:20 + mlen])
        assert manifest["config"] == TINY.to_dict() | {"epochs": 2}
        total = sum(e["nbytes"] for e in manifest["tensors"])
        assert len(raw) == 20 + mlen + total

    def test_bad_magic(self, trained):
        raw = bytearray(trained.checkpoint.to_bytes())
        raw[:8] = b"XXXXXXXX"
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(bytes(raw))

    def test_truncated(self, trained):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(trained.checkpoint.to_bytes()[:-8])

    def test_layout_mismatch(self, trained):
        ck = Checkpoint.from_bytes(trained.checkpoint.to_bytes())
        ck.config = dataclasses.replace(ck.config, depth=2)
        with pytest.raises(CheckpointError):
            ck.to_model()


class TestEvaluation:
    def test_sort_scores(self):
        assert sort_scores([("b", 1.0), ("a", 1.0), ("c", 2.0)]) == [("c", 2.0), ("a", 1.0), ("b", 1.0)]

    def test_predict_sorted_and_permutation_invariant(self, trained, data):
        p = data.products[0]
        out = predict_scores(trained.checkpoint, p)
        assert [s for _, s in out] == sorted((s for _, s in out), reverse=True)
        shuffled = dataclasses.replace(p, reviews=p.reviews[::-1])
        assert predict_scores(trained.checkpoint, shuffled) == out

    def test_predict_matches_direct_score(self, trained, data):
        p = data.products[1]
        got = dict(predict_scores(trained.model, p))
        for r in p.reviews:
            arrays = trained.model.sample_arrays(p, r)
            direct = trained.model.score_arrays(*arrays).item()
            assert got[r.review_id] == pytest.approx(direct, abs=1e-12)

    def test_report_contents(self, trained, data):
        rep = evaluate(trained.model, data)
        js = rep.to_json()
        assert {"MAP", "NDCG@3", "NDCG@5"} <= set(js)
        assert all(0.0 <= js[k] <= 1.0 for k in ("MAP", "NDCG@3", "NDCG@5"))
        assert js["n_products"] == len(data.products)

    def test_vocab_mismatch(self, trained, data):
        other = dataclasses.replace(data, vocab_size=data.vocab_size + 1)
        with pytest.raises(DatasetError, match="vocabulary"):
            evaluate(trained.model, other)

    def test_random_baseline_reproducible(self, data):
        a = report_from_scores(random_scores(data, 1), data).MAP
        assert a == report_from_scores(random_scores(data, 1), data).MAP


class TestDistances:
    def test_identical(self):
        x = np.random.default_rng(0).standard_normal((1, 5))
        cs, l2 = token_distances(x, x)
        assert cs == pytest.approx(1.0) and l2 == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal(self):
        cs, _ = token_distances(np.array([[1.0, 0.0]]), np.array([[0.0, 3.0]]))
        assert cs == 0.0

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        cs = [x[i] @ y[j] / np.linalg.norm(x[i]) / np.linalg.norm(y[j]) for i in range(2) for j in range(2)]
        l2 = [np.linalg.norm(x[i] - y[j]) for i in range(2) for j in range(2)]
        got = token_distances(x, y)
        assert got[0] == pytest.approx(np.mean(cs), abs=1e-14)
        assert got[1] == pytest.approx(np.mean(l2), abs=1e-12)

    def test_report_shape(self, trained, data):
        rep = distance_analysis(trained.model, data, {"helpful": [3, 4], "unhelpful": [0, 1, 2]})
        assert set(rep) == {"helpful", "unhelpful"}
        for rels in rep.values():
            assert set(rels) == {"intra-modal", "inter-modal", "intra-review"}
            for v in rels.values():
                assert -1 <= v["CS_mean"] <= 1 and v["L2_mean"] >= 0

    def test_empty_group_omitted(self, trained, data, caplog):
        with caplog.at_level(logging.WARNING, logger="mrhp"):
            rep = distance_analysis(trained.model, data, {"none": [9], "all": [0, 1, 2, 3, 4]})
        assert "none" not in rep and "all" in rep
        assert "none" in caplog.text
