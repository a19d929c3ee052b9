import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ugnn import tensor as T
from ugnn.gradcheck import GRADCHECK_TOL, gradcheck, registered_ops, run_suite
from ugnn.graph import SparseAdjacency
from ugnn.tensor import Tensor


def naive_conv3d(x, w, b):
    c_out, c_in, k, _, _ = w.shape
    _, d, h, wd = x.shape
    out = np.zeros((c_out, d - k + 1, h - k + 1, wd - k + 1))
    for o in range(c_out):
        for z in range(d - k + 1):
            for y in range(h - k + 1):
                for xx in range(wd - k + 1):
                    acc = b[o]
                    for c in range(c_in):
                        for i in range(k):
                            for j in range(k):
                                for l in range(k):
                                    acc += w[o, c, i, j, l] * x[c, z + i, y + j, xx + l]
                    out[o, z, y, xx] = acc
    return out


def blockwise_max(x):
    c, d, h, w = x.shape
    out = np.empty((c, d // 2, h // 2, w // 2))
    for ch in range(c):
        for z in range(d // 2):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[ch, z, y, xx] = x[ch, 2 * z:2 * z + 2, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2].max()
    return out


class TestConv:
    def test_constant_field(self):
        out = T.conv3d_valid(Tensor(np.ones((1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 3, 3, 3)
        np.testing.assert_array_equal(out.data, 27.0)

    def test_delta_kernel_is_center_crop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 6, 5, 7))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        out = T.conv3d_valid(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data[0], x[0, 1:-1, 1:-1, 1:-1])

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, size=(3, 6, 5, 7))
        w = rng.uniform(-1, 1, size=(2, 3, 3, 3, 3))
        b = rng.uniform(-1, 1, size=2)
        out = T.conv3d_valid(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - naive_conv3d(x, w, b)).max() < 1e-9

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv3d_valid(Tensor(np.ones((2, 4, 4, 4))), Tensor(np.ones((1, 3, 3, 3, 3))))

    def test_too_small(self):
        with pytest.raises(ValueError):
            T.conv3d_valid(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3, 3))))


class TestPoolUpsample:
    def test_block_of_1_to_8(self):
        x = np.arange(1, 9, dtype=float).reshape(1, 2, 2, 2)
        assert T.maxpool3d_2(Tensor(x)).data.item() == 8.0

    def test_constant(self):
        out = T.maxpool3d_2(Tensor(np.full((2, 4, 6, 2), 3.5)))
        assert out.shape == (2, 2, 3, 1)
        np.testing.assert_array_equal(out.data, 3.5)

    def test_random_vs_blockwise(self):
        x = np.random.default_rng(3).normal(size=(2, 6, 4, 8))
        np.testing.assert_array_equal(T.maxpool3d_2(Tensor(x)).data, blockwise_max(x))

    def test_odd_extent(self):
        with pytest.raises(ValueError):
            T.maxpool3d_2(Tensor(np.ones((1, 3, 4, 4))))

    def test_tie_goes_to_first_in_scan_order(self):
        x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        T.backward(T.sum(T.maxpool3d_2(x)))
        expected = np.zeros((1, 2, 2, 2))
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_upsample_single_voxel(self):
        out = T.upsample_nearest3d_2(Tensor(np.full((1, 1, 1, 1), 4.0)))
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, 4.0)

    def test_upsample_depth_order(self):
        x = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
        out = T.upsample_nearest3d_2(Tensor(x)).data
        np.testing.assert_array_equal(out[0, :2], 1.0)
        np.testing.assert_array_equal(out[0, 2:], 2.0)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
                  elements=st.floats(-10, 10)))
    def test_pool_inverts_upsample(self, x):
        up = T.upsample_nearest3d_2(Tensor(x))
        np.testing.assert_array_equal(T.maxpool3d_2(up).data, x)
        up2 = T.upsample_nearest3d_2(T.maxpool3d_2(up))
        np.testing.assert_array_equal(up2.data, up.data)


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_relu_grad_at_zero_is_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        T.backward(T.sum(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_sigmoid(self):
        assert T.sigmoid(Tensor(0.0)).data == 0.5
        x = np.random.default_rng(0).normal(scale=5, size=100)
        s = T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data
        assert np.abs(s - 1).max() < 1e-12

    def test_activation_dispatch(self):
        with pytest.raises(ValueError):
            T.activation(Tensor([1.0]), "tanh")


class TestMatmulSpmm:
    def test_identity_and_zero(self):
        a = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(3))).data, a)
        np.testing.assert_array_equal(T.matmul(Tensor(np.zeros((2, 4))), Tensor(a)).data, 0.0)

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        ref = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(3)] for i in range(7)])
        assert np.abs(T.matmul(Tensor(a), Tensor(b)).data - ref).max() < 1e-12

    def test_matmul_shape_error(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_spmm_empty(self):
        adj = SparseAdjacency.from_lists([[], [], []])
        out = T.spmm(adj, Tensor(np.ones((3, 2))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_spmm_constant_rows(self):
        adj = SparseAdjacency.from_lists([[1, 2], [0], [], [0, 1, 2]])
        out = T.spmm(adj, Tensor(np.full((4, 3), 2.5)), normalize=True).data
        np.testing.assert_allclose(out[[0, 1, 3]], 2.5)
        np.testing.assert_array_equal(out[2], 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_spmm_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dense = rng.random((30, 30)) < 0.2
        np.fill_diagonal(dense, False)
        h = rng.normal(size=(30, 4))
        deg = np.maximum(dense.sum(1), 1)
        ref = np.diag(1.0 / deg) @ dense.astype(float) @ h
        out = T.spmm(SparseAdjacency.from_dense(dense), Tensor(h), normalize=True).data
        assert np.abs(out - ref).max() < 1e-10
        out_plain = T.spmm(SparseAdjacency.from_dense(dense), Tensor(h), normalize=False).data
        assert np.abs(out_plain - dense.astype(float) @ h).max() < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_spmm_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        n = 12
        dense = rng.random((n, n)) < 0.3
        np.fill_diagonal(dense, False)
        h = rng.normal(size=(n, 3))
        out = T.spmm(SparseAdjacency.from_dense(dense), Tensor(h)).data
        for i in range(n):
            nb = np.flatnonzero(dense[i])
            if nb.size:
                assert np.all(out[i] >= h[nb].min(axis=0) - 1e-12)
                assert np.all(out[i] <= h[nb].max(axis=0) + 1e-12)

    def test_spmm_row_mismatch(self):
        with pytest.raises(ValueError):
            T.spmm(SparseAdjacency.from_lists([[], []]), Tensor(np.ones((3, 1))))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square_grad(self):
        xv = np.random.default_rng(1).normal(size=(5,))
        x = Tensor(xv, requires_grad=True)
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * xv)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(T.mul(x, 2.0))

    def test_second_backward_is_an_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.sum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(T.TapeConsumedError):
            T.backward(loss)

    def test_inputs_not_mutated(self):
        xv = np.random.default_rng(2).normal(size=(2, 4, 4, 4))
        keep = xv.copy()
        x = Tensor(xv, requires_grad=True)
        T.backward(T.sum(T.sigmoid(T.maxpool3d_2(T.relu(x)))))
        np.testing.assert_array_equal(xv, keep)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = T.mul(x, 3.0)
        T.backward(T.sum(T.add(y, y)))
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad and y._node is None


class TestGradcheck:
    def test_linear_closure_is_exact(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        assert gradcheck(lambda t: T.sum(T.mul(t, 3.0)), [x]) < 1e-10

    def test_relu_away_from_zero(self):
        rng = np.random.default_rng(1)
        xv = rng.uniform(0.1, 1.0, size=(4, 4)) * rng.choice([-1, 1], size=(4, 4))
        assert gradcheck(lambda t: T.sum(T.mul(T.relu(t), t)), [Tensor(xv)]) < 1e-6

    def test_non_scalar_closure(self):
        with pytest.raises(ValueError):
            gradcheck(lambda t: T.mul(t, 2.0), [Tensor(np.ones(2))])

    def test_suite_all_ops_pass(self):
        results = run_suite(seed=0)
        assert [r.op for r in results] == registered_ops()
        assert len(set(r.op for r in results)) == len(results)
        for r in results:
            assert r.error < GRADCHECK_TOL, (r.op, r.error)

    @pytest.mark.parametrize("op", ["conv3d_valid", "spmm", "layer_norm"])
    def test_fault_is_detected(self, op):
        with T.inject_grad_fault(op):
            results = {r.op: r for r in run_suite(seed=0)}
        assert not results[op].passed
        assert all(r.passed for name, r in results.items() if name != op)
