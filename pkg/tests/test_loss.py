import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protodistill import loss as L
from protodistill import tensor as T
from protodistill.gradcheck import loss_case
from protodistill.tensor import Tape, Tensor, grad_check


def _sinkhorn_knopp_oracle(kernel, iters=10_000):
    """Pure-Python alternating scaling to convergence; columns target rows/K."""
    q = [list(r) for r in kernel]
    rows, k = len(q), len(q[0])
    for _ in range(iters):
        q = [[x / sum(r) for x in r] for r in q]
        cols = [sum(q[i][j] for i in range(rows)) for j in range(k)]
        q = [[q[i][j] * (rows / k) / cols[j] for j in range(k)] for i in range(rows)]
    return np.array([[x / sum(r) for x in r] for r in q])


def _bank(rows):
    return L.PrototypeBank(Tensor(np.asarray(rows, dtype=np.float64), requires_grad=True))


class TestPrototypes:
    def test_init_bounds_and_determinism(self):
        a = L.init_prototypes(64, 32, seed=3)
        b = L.init_prototypes(64, 32, seed=3)
        bound = 1 / math.sqrt(32)
        assert a.p.shape == (64, 32)
        assert np.all(np.abs(a.p.data) <= bound)
        np.testing.assert_array_equal(a.p.data, b.p.data)

    def test_reference_bank_shape(self):
        bank = L.init_prototypes(1024, 256, seed=0)
        assert (bank.K, bank.d) == (1024, 256)
        assert np.abs(bank.p.data).max() <= 1 / 16

    def test_orthonormal_two_prototype_prediction(self):
        out = L.predict(_bank(np.eye(2)), Tensor([1.0, 0.0]), 1.0).data
        e = math.e
        np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
        np.testing.assert_allclose(out, [0.7311, 0.2689], atol=5e-5)

    def test_equidistant_feature_is_uniform(self):
        bank = _bank(np.eye(4))
        out = L.predict(bank, Tensor(np.full(4, 0.5)), 0.1).data
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_row_scaling_does_not_change_prediction(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(5, 3))
        f = T.l2_normalize(Tensor(rng.normal(size=3))).data
        a = L.predict(_bank(p), f, 0.1).data
        p[2] *= 5.0
        np.testing.assert_allclose(L.predict(_bank(p), f, 0.1).data, a, atol=1e-15)

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            L.predict(_bank(np.eye(2)), Tensor([1.0, 0.0]), 0.0)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ValueError):
            L.prototype_logits(_bank(np.eye(3)), Tensor([1.0, 0.0]))


class TestTeacherSharpen:
    def test_zero_iterations_is_softmax(self):
        logits = np.random.default_rng(1).normal(size=(6, 5))
        np.testing.assert_allclose(L.sinkhorn(logits, 0.3, 0), L.softmax_rows(logits, 0.3), atol=1e-15)

    def test_identity_two_by_two_matches_scaling_oracle(self):
        q = L.sinkhorn(np.eye(2), 1.0, 10)
        oracle = _sinkhorn_knopp_oracle(np.exp(np.eye(2)))
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(q.sum(axis=0), 1.0, atol=1e-6)
        a = q[0, 0]
        assert a > 0.5
        np.testing.assert_allclose(q, [[a, 1 - a], [1 - a, a]], atol=1e-12)
        np.testing.assert_allclose(q, oracle, atol=1e-12)
        # frozen oracle value: e / (1 + e)
        assert a == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_random_matrix_against_scaling_oracle(self):
        logits = np.random.default_rng(2).uniform(-1, 1, size=(6, 3))
        np.testing.assert_allclose(L.sinkhorn(logits, 0.5, 300),
                                   _sinkhorn_knopp_oracle(np.exp(logits / 0.5), iters=300), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(3, 10))
    def test_columns_within_ten_percent_after_three_rounds(self, seed, iters):
        rng = np.random.default_rng(seed)
        logits = np.log(rng.uniform(0.5, 2.0, size=(16, 4)))
        q = L.sinkhorn(logits, 1.0, iters)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)
        target = 16 / 4
        assert np.all(np.abs(q.sum(axis=0) - target) <= 0.1 * target)

    def test_centering_with_zero_center_is_softmax(self):
        logits = np.random.default_rng(3).normal(size=(4, 6))
        op = L.TeacherOp("centering", center=np.zeros(6))
        np.testing.assert_allclose(op.sharpen(logits, 0.04), L.softmax_rows(logits, 0.04), atol=1e-15)

    def test_centering_updates_ema(self):
        logits = np.random.default_rng(4).normal(size=(4, 3))
        op = L.TeacherOp("centering", center_momentum=0.9, center=np.ones(3))
        op.sharpen(logits, 0.1)
        np.testing.assert_allclose(op.center, 0.9 + 0.1 * logits.mean(axis=0), atol=1e-15)

    def test_centering_subtracts_center(self):
        logits = np.random.default_rng(5).normal(size=(2, 3))
        c = np.array([0.3, -0.2, 0.1])
        op = L.TeacherOp("centering", center=c.copy())
        np.testing.assert_allclose(op.sharpen(logits, 0.5, update=False), L.softmax_rows(logits - c, 0.5), atol=1e-15)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            L.TeacherOp().sharpen(np.zeros((0, 4)), 0.1)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            L.TeacherOp("whitening")


class TestCrossEntropy:
    def test_matching_one_hots_give_zero(self):
        t = np.array([[0.0, 1.0, 0.0]])
        s = Tensor([[0.0, 1.0, 0.0]])
        assert L.cross_entropy_pairs(t, s).item() == pytest.approx(0.0, abs=1e-15)

    def test_uniform_pair_is_log_four(self):
        ce = L.cross_entropy_pairs(np.full((1, 4), 0.25), Tensor(np.full((1, 4), 0.25))).item()
        assert ce == pytest.approx(math.log(4), abs=1e-15)
        assert ce == pytest.approx(1.3863, abs=5e-5)

    def test_mean_over_six_pairs(self):
        rng = np.random.default_rng(6)
        t = L.softmax_rows(rng.normal(size=(2, 4)), 1.0)
        s = L.softmax_rows(rng.normal(size=(3, 4)), 1.0)
        terms = [[-float(np.sum(t[m] * np.log(s[n]))) for n in range(3)] for m in range(2)]
        assert L.cross_entropy_pairs(t, Tensor(s)).item() == pytest.approx(sum(map(sum, terms)) / 6, abs=1e-14)
        mask = np.ones((2, 3))
        mask[1, 2] = 0
        dropped = (sum(map(sum, terms)) - terms[1][2]) / 5
        assert L.cross_entropy_pairs(t, Tensor(s), mask).item() == pytest.approx(dropped, abs=1e-14)

    def test_zero_student_probability_is_clamped(self):
        ce = L.cross_entropy_pairs(np.array([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item()
        assert ce == pytest.approx(-math.log(1e-12), rel=1e-12)


class TestEntropyReg:
    def test_uniform_is_log_k(self):
        assert L.entropy_reg(Tensor(np.full((3, 5), 0.2))).item() == pytest.approx(math.log(5), abs=1e-14)

    def test_identical_one_hots_are_zero(self):
        s = np.zeros((4, 3))
        s[:, 1] = 1.0
        assert L.entropy_reg(Tensor(s)).item() == pytest.approx(0.0, abs=1e-10)

    def test_two_different_one_hots_are_log_two(self):
        assert L.entropy_reg(Tensor(np.eye(2))).item() == pytest.approx(math.log(2), abs=1e-14)

    def test_literal_mode_is_the_unlogged_average(self):
        rng = np.random.default_rng(7)
        s = L.softmax_rows(rng.normal(size=(2, 3, 4)), 1.0)  # B=2, N=3, K=4
        assert L.entropy_reg(Tensor(s), "literal").item() == pytest.approx(6 / 8, abs=1e-14)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            L.entropy_reg(Tensor(np.eye(2)), "renyi")


def _random_batch(seed, b=3, m=2, n=4, k=5):
    rng = np.random.default_rng(seed)
    teacher = L.softmax_rows(rng.normal(size=(b, m, k)), 0.2)
    student = L.softmax_rows(rng.normal(size=(b, n, k)), 0.5)
    return teacher, student


class TestTotalLoss:
    def test_structure_total_is_ce_minus_reg(self):
        t, s = _random_batch(0)
        out = L.total_loss(t, Tensor(s), lambda_reg=0.7)
        assert out.total.item() == pytest.approx(out.ce - 0.7 * out.entropy, abs=1e-14)
        assert out.pair_ce.shape == (3, 2, 4)

    def test_lambda_zero_is_ce(self):
        t, s = _random_batch(1)
        out = L.total_loss(t, Tensor(s), lambda_reg=0.0)
        assert out.total.item() == out.ce

    def test_student_equal_to_teacher_gives_teacher_entropy(self):
        rng = np.random.default_rng(2)
        t = L.softmax_rows(rng.normal(size=(2, 1, 6)), 0.3)
        out = L.total_loss(t, Tensor(t.copy()), lambda_reg=0.0)
        assert out.ce == pytest.approx(float(L.entropy(t).mean()), abs=1e-14)

    def test_shape_mismatch(self):
        t, s = _random_batch(3)
        with pytest.raises(ValueError):
            L.total_loss(t[:, :, :4], Tensor(s))

    def test_batch_permutation_invariance(self):
        t, s = _random_batch(4, b=6)
        perm = np.random.default_rng(5).permutation(6)
        a = L.total_loss(t, Tensor(s)).total.item()
        b = L.total_loss(t[perm], Tensor(s[perm])).total.item()
        assert abs(a - b) < 1e-10

    def test_prototype_scale_invariance(self):
        rng = np.random.default_rng(6)
        feats = T.l2_normalize(Tensor(rng.normal(size=(2, 3, 4)))).data
        protos = rng.normal(size=(5, 4))
        t = L.softmax_rows(rng.normal(size=(2, 1, 5)), 0.1)

        def value(scale):
            probs = L.predict(_bank(protos * scale), feats, 0.1)
            return probs.data, L.total_loss(t, probs).total.item()

        p1, v1 = value(1.0)
        p2, v2 = value(3.7)
        np.testing.assert_allclose(p2, p1, atol=1e-14)
        assert v2 == pytest.approx(v1, abs=1e-12)

    def test_distributions_are_valid(self):
        rng = np.random.default_rng(7)
        feats = T.l2_normalize(Tensor(rng.normal(size=(10, 8)))).data
        probs = L.predict(L.init_prototypes(16, 8, 0), feats, 0.1).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-8)
        assert np.all(probs > 0)

    def test_gradient_on_micro_instance(self):
        f, xs = loss_case(np.random.default_rng(8), M=1, N=2)
        assert xs[-1].shape == (4, 4)  # K = 4 prototypes
        assert grad_check(f, xs, 1e-5) < 1e-4

    def test_gradient_reaches_prototypes_only_through_student(self):
        rng = np.random.default_rng(9)
        bank = L.init_prototypes(4, 3, seed=1)
        feats = Tensor(T.l2_normalize(Tensor(rng.normal(size=(1, 2, 3)))).data, requires_grad=True)
        teacher_feats = Tensor(T.l2_normalize(Tensor(rng.normal(size=(1, 3)))).data, requires_grad=True)
        with Tape() as tape:
            t = L.TeacherOp().sharpen(L.prototype_logits(bank, teacher_feats).data, 0.05)
            out = L.total_loss(t.reshape(1, 1, 4), L.predict(bank, feats, 0.1))
        tape.backward(out.total)
        assert teacher_feats.grad is None
        assert feats.grad is not None and bank.p.grad is not None


def test_usage_entropy():
    assert L.usage_entropy(np.array([0, 1, 2, 3]), 4) == pytest.approx(math.log(4))
    assert L.usage_entropy(np.array([2, 2, 2]), 4) == pytest.approx(0.0)
