import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsal import numerics as nm
from capsal.numerics import ContractError, DimensionError, Tensor


def naive_matmul(a, b):
    """Triple-loop reference with the same (inner-k) summation order."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(np.eye(2), a)
        assert np.array_equal(out.data, a)

    def test_projection(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        v = np.array([[5.0], [7.0]])
        assert np.array_equal(nm.matmul(p, v).data, [[5.0], [0.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        got = nm.matmul(a, b).data
        assert np.allclose(got, naive_matmul(a, b), rtol=0.0, atol=1e-12)

    def test_random_shapes_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            m, k, n = rng.integers(1, 8, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            assert np.allclose(nm.matmul(a, b).data, naive_matmul(a, b),
                               rtol=0.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


class TestSoftmax:
    def test_symmetry(self):
        out = nm.softmax(np.zeros(3)).data
        assert np.allclose(out, 1.0 / 3.0, rtol=0.0, atol=1e-15)

    def test_shift_by_ln2(self):
        c = 13.7
        out = nm.softmax(np.array([c, c + np.log(2.0)])).data
        assert np.allclose(out, [1.0 / 3.0, 2.0 / 3.0], rtol=0.0, atol=1e-12)

    def test_direct_evaluation(self):
        out = nm.softmax(np.array([1.0, 2.0, 3.0])).data
        assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_empty_input(self):
        with pytest.raises(DimensionError):
            nm.softmax(np.array([]))

    @given(st.lists(st.floats(-50.0, 50.0), min_size=1, max_size=12))
    def test_sums_to_one(self, logits):
        out = nm.softmax(np.array(logits)).data
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.all(out > 0.0)

    @given(
        st.lists(st.floats(-30.0, 30.0), min_size=2, max_size=10),
        st.floats(-100.0, 100.0),
    )
    def test_shift_invariance(self, logits, c):
        base = nm.softmax(np.array(logits)).data
        shifted = nm.softmax(np.array(logits) + c).data
        assert np.abs(base - shifted).max() < 1e-9


class TestKlDivergence:
    def test_identical_is_zero(self):
        p = np.array([0.7, 0.3])
        assert nm.kl_divergence(p, p) == 0.0

    def test_onehot_case(self):
        assert nm.kl_divergence([1.0, 0.0], [0.25, 0.75]) == pytest.approx(
            np.log(4.0), abs=1e-12)

    def test_hand_evaluation(self):
        got = nm.kl_divergence([0.5, 0.5], [0.9, 0.1])
        want = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.510826, abs=1e-6)

    def test_mismatched_support(self):
        with pytest.raises(DimensionError):
            nm.kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_nonpositive_q(self):
        with pytest.raises(ContractError):
            nm.kl_divergence([0.5, 0.5], [1.0, 0.0])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=200)
    def test_gibbs_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 10))
        p = nm.softmax_values(rng.normal(scale=3.0, size=n))
        q = nm.softmax_values(rng.normal(scale=3.0, size=n))
        assert nm.kl_divergence(p, q) >= 0.0


class TestBackward:
    def test_sum_of_squares(self):
        p = Tensor(np.array([[1.0, -2.0], [3.0, 0.5]]), requires_grad=True)
        loss = nm.tensor_sum(p * p)
        loss.backward()
        assert np.allclose(p.grad, 2.0 * p.data, rtol=0.0, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (p * p).backward()

    def test_chain_through_activations(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)

        def loss_fn():
            h = nm.tanh(x @ w + b)
            s = nm.sigmoid(h)
            return nm.tensor_sum(s * s)

        errs = nm.gradient_check(loss_fn, {"w": w, "x": x, "b": b})
        assert max(errs.values()) < 1e-6

    def test_softmax_log_getitem_gradient(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(1, 6)), requires_grad=True)

        def loss_fn():
            return -nm.log(nm.softmax(logits)[0, 2])

        errs = nm.gradient_check(loss_fn, {"logits": logits})
        assert errs["logits"] < 1e-7
        # analytic softmax-CE gradient: p - onehot
        logits.zero_grad()
        loss_fn().backward()
        p = nm.softmax_values(logits.data[0])
        want = p.copy()
        want[2] -= 1.0
        assert np.allclose(logits.grad[0], want, atol=1e-12)

    def test_take_rows_accumulates_repeats(self):
        emb = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = nm.take_rows(emb, [1, 1, 2])
        nm.tensor_sum(out).backward()
        assert np.array_equal(emb.grad, [[0, 0], [2, 2], [1, 1]])

    def test_concat_and_reshape_gradients(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 5)), requires_grad=True)

        def loss_fn():
            u = nm.concat([a, b], axis=1)
            v = nm.reshape(u, (4, 4))
            return nm.tensor_sum(v * v)

        errs = nm.gradient_check(loss_fn, {"a": a, "b": b})
        assert max(errs.values()) < 1e-7

    def test_batched_matmul_and_axis_sum_gradients(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)

        def loss_fn():
            prod = a @ w
            pooled = nm.tensor_sum(prod, axis=1)
            return nm.tensor_sum(pooled * pooled)

        errs = nm.gradient_check(loss_fn, {"a": a, "w": w})
        assert max(errs.values()) < 1e-6

    def test_zero_weight_lstm_zero_gradients_through_hidden(self):
        from capsal.seq2seq import LSTMCell

        cell = LSTMCell(3, 4)  # weights start at zero
        x = Tensor(np.zeros((1, 3)))
        h = Tensor(np.zeros((1, 4)))
        c = Tensor(np.zeros((1, 4)))
        h2, c2 = cell.step(x, h, c)
        nm.tensor_sum(h2 * h2).backward()
        for gate in LSTMCell.GATES:
            w = getattr(cell, f"w_{gate}")
            assert w.grad is None or np.allclose(w.grad, 0.0)


class TestFiniteDifference:
    def test_quadratic(self):
        p = Tensor(np.array([1.5, -0.5]), requires_grad=True)

        def f():
            with nm.no_grad():
                return float((p.data**2).sum())

        fd = nm.finite_difference_grad(f, p, step=1e-5)
        assert np.allclose(fd, 2.0 * p.data, atol=1e-8)


def test_global_norm():
    arrays = [np.array([3.0]), np.array([4.0])]
    assert nm.global_norm(arrays) == pytest.approx(5.0, abs=1e-12)
