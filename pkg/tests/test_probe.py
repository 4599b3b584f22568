import math

import numpy as np
import pytest

from protodistill import probe as P
from protodistill import train
from protodistill.loss import PrototypeBank
from protodistill.tensor import Tensor


def _table(rows, labels):
    return P.FeatureTable(np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64))


@pytest.fixture
def init_ck(tiny_cfg):
    return train.to_checkpoint(train.init_state(tiny_cfg))


class TestFeatures:
    def test_shape_and_determinism(self, init_ck, tiny_corpus, tiny_cfg):
        a = P.extract_features(init_ck, tiny_corpus)
        b = P.extract_features(init_ck, tiny_corpus)
        assert a.rows.shape == (len(tiny_corpus), tiny_cfg.width)
        np.testing.assert_array_equal(a.rows, b.rows)

    def test_toy_width_table(self):
        from protodistill.config import TrainConfig
        from protodistill.data import synth_corpus

        cfg = TrainConfig(corpus_size=100)
        ck = train.to_checkpoint(train.init_state(cfg))
        assert P.extract_features(ck, synth_corpus(100, 4, 32, 7)).rows.shape == (100, 64)

    def test_trained_features_differ_from_init(self, init_ck, tiny_cfg, tiny_corpus):
        trained = train.pretrain(tiny_cfg.replace(epochs=1), tiny_corpus)
        a = P.extract_features(init_ck, tiny_corpus).rows
        b = P.extract_features(trained, tiny_corpus).rows
        assert not np.array_equal(a, b)

    def test_side_mismatch(self, init_ck):
        from protodistill.data import synth_corpus

        with pytest.raises(P.ProbeError):
            P.extract_features(init_ck, synth_corpus(8, 4, 16, 0))

    def test_table_roundtrip(self, init_ck, tiny_corpus):
        t = P.extract_features(init_ck, tiny_corpus, source="x.ckpt")
        back = P.FeatureTable.from_bytes(t.to_bytes())
        np.testing.assert_array_equal(back.rows, t.rows.astype(np.float32))
        np.testing.assert_array_equal(back.labels, t.labels)
        assert back.source == "x.ckpt"


class TestSplit:
    def test_stratified_ratios(self):
        labels = np.repeat(np.arange(4), [30, 25, 40, 11])
        tr, te = P.stratified_split(labels, seed=3)
        assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == len(labels)
        for c, n in zip(range(4), [30, 25, 40, 11]):
            assert abs(np.sum(labels[te] == c) - 0.2 * n) <= 1

    def test_deterministic(self):
        labels = np.arange(50) % 5
        a = P.stratified_split(labels, 1)
        b = P.stratified_split(labels, 1)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestKnn:
    def test_self_match(self):
        rng = np.random.default_rng(0)
        table = _table(rng.normal(size=(40, 6)), np.arange(40) % 4)
        assert P.knn_probe(table, k=1, train_is_test=True).accuracy == 1.0

    def test_random_features_random_labels_stay_near_chance(self):
        # binomial oracle: per run, accuracy ~ Bin(n_test, 1/4) / n_test; 3 sigma band on the 10-run mean
        n, classes, runs = 400, 4, 10
        accs = []
        for seed in range(runs):
            rng = np.random.default_rng(100 + seed)
            table = _table(rng.normal(size=(n, 16)), rng.permutation(np.arange(n) % classes))
            accs.append(P.knn_probe(table, k=5, seed=seed).accuracy)
        n_test = 80
        sigma = math.sqrt(0.25 * 0.75 / (n_test * runs))
        assert abs(np.mean(accs) - 0.25) <= 3 * sigma

    def test_tie_goes_to_smallest_class(self):
        train_x = np.array([[1.0, 0.0], [1.0, 0.01]])
        pred = P.knn_predict(train_x, np.array([1, 0]), np.array([[1.0, 0.005]]), k=2)
        assert pred[0] == 0

    def test_k_out_of_range(self):
        table = _table(np.eye(10), np.arange(10) % 2)
        with pytest.raises(P.ProbeError):
            P.knn_probe(table, k=100)

    def test_accuracy_is_count_weighted_mean_of_per_class(self):
        rng = np.random.default_rng(2)
        labels = np.repeat(np.arange(3), [30, 50, 20])
        table = _table(rng.normal(size=(100, 4)) + labels[:, None] * 0.5, labels)
        res = P.knn_probe(table, k=3, seed=0)
        _, te = P.stratified_split(labels, 0)
        counts = np.bincount(labels[te])
        weighted = sum(res.per_class[c] * counts[c] for c in range(3)) / counts.sum()
        assert res.accuracy == pytest.approx(weighted, abs=1e-12)


class TestLinear:
    def test_separable_two_class(self):
        rng = np.random.default_rng(3)
        x = np.vstack([rng.normal(-3, 0.5, size=(50, 2)), rng.normal(3, 0.5, size=(50, 2))])
        table = _table(x, [0] * 50 + [1] * 50)
        assert P.linear_probe(table, epochs=100, lr=0.5, seed=0).accuracy == 1.0

    def test_zero_epochs_predicts_class_zero(self):
        # zero weights give uniform logits, argmax picks class 0 for every test row
        labels = np.repeat(np.arange(3), [20, 40, 40])
        table = _table(np.random.default_rng(4).normal(size=(100, 5)), labels)
        res = P.linear_probe(table, epochs=0, seed=0)
        _, te = P.stratified_split(labels, 0)
        assert res.accuracy == pytest.approx(float(np.mean(labels[te] == 0)))

    def test_non_finite_loss_is_reported(self):
        rows = np.random.default_rng(5).normal(size=(40, 3))
        rows[3, 1] = np.nan
        with pytest.raises(P.ProbeError, match="diverged"):
            P.linear_probe(_table(rows, np.arange(40) % 2), epochs=5, seed=0)

    def test_deterministic(self):
        table = _table(np.random.default_rng(6).normal(size=(60, 4)), np.arange(60) % 3)
        assert P.linear_probe(table, 20, 0.1, 1).to_json() == P.linear_probe(table, 20, 0.1, 1).to_json()


class TestPrototypeNN:
    def test_each_prototype_maps_to_its_equal(self):
        feats = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.0, 0.8]])
        res = P.prototype_nn(feats[[2, 1]], feats)
        assert res.nearest == [2, 1]

    def test_usage_counts_partition_the_rows(self):
        rng = np.random.default_rng(7)
        res = P.prototype_nn(rng.normal(size=(5, 4)), rng.normal(size=(30, 4)))
        assert sum(res.usage) == 30 and len(res.usage) == 5

    def test_identical_prototypes_have_zero_usage_entropy(self):
        rng = np.random.default_rng(8)
        bank = np.tile(rng.normal(size=(1, 4)), (6, 1))
        assert P.prototype_nn(bank, rng.normal(size=(20, 4))).usage_entropy == 0.0

    def test_invariant_to_bank_scaling(self):
        rng = np.random.default_rng(9)
        bank, feats = rng.normal(size=(5, 4)), rng.normal(size=(25, 4))
        a, b = P.prototype_nn(bank, feats), P.prototype_nn(PrototypeBank(Tensor(bank * 7.5)), feats)
        assert a == b

    def test_empty_table(self):
        with pytest.raises(P.ProbeError):
            P.prototype_nn(np.eye(2), np.zeros((0, 2)))
