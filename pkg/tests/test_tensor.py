import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vbranch import tensor as T
from vbranch.errors import ShapeError
from vbranch.verify import GRAD_TOL, gradcheck, gradient_cases

CASES = gradient_cases(np.random.default_rng(1234))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    build, arrays_ = CASES[name]
    assert gradcheck(build, arrays_) < GRAD_TOL


class TestGraph:
    def test_shared_node_gets_summed_gradient(self):
        x = T.Value(np.array([1.5, -2.0]))
        y = T.vsum(T.add(T.mul(x, x), x))
        y.backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data + 1)

    def test_broadcast_gradient_is_reduced(self):
        a = T.Value(np.ones((3, 4)))
        b = T.Value(np.ones((1, 4)))
        T.vsum(T.mul(a, b)).backward()
        assert b.grad.shape == (1, 4)
        np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            T.add(T.Value(np.ones((2, 3))), T.Value(np.ones((3, 2))))

    def test_no_grad_records_nothing(self):
        x = T.Value(np.ones(3))
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert y._parents == ()

    def test_deep_chain_does_not_recurse(self):
        x = T.Value(np.array(1.0))
        y = x
        for _ in range(5000):
            y = T.add(y, 0.0)
        y.backward()
        assert x.grad == 1.0


class TestReductions:
    def test_masked_max_ties_go_to_first(self):
        x = T.Value(np.array([[3.0, 1.0, 3.0]]))
        out = T.masked_max(x, np.array([[True, True, True]]), axis=1)
        out.backward(np.ones(1))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])

    def test_masked_min_ignores_masked_entries(self):
        x = T.Value(np.array([[0.0, 5.0, 2.0]]))
        out = T.masked_min(x, np.array([[False, True, True]]), axis=1)
        assert out.data[0] == 2.0

    def test_mean_keepdims(self):
        x = T.Value(np.arange(6.0).reshape(2, 3))
        assert T.mean(x, axis=1, keepdims=True).shape == (2, 1)


def _naive_conv_same(x, k):
    n, h, w, _ = x.shape
    kh, kw, _, co = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    out = np.zeros((n, h, w, co))
    for i in range(h):
        for j in range(w):
            patch = xp[:, i : i + kh, j : j + kw, :]
            out[:, i, j, :] = np.tensordot(patch, k, axes=([1, 2, 3], [0, 1, 2]))
    return out


class TestLayers:
    def test_conv2d_matches_loops(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 4, 3))
        k = rng.normal(size=(3, 3, 3, 2))
        got = T.conv2d(T.Value(x), T.Value(k)).data
        np.testing.assert_allclose(got, _naive_conv_same(x, k), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("size,k,stride,padding,expected", [
        (32, 3, 1, "same", 32), (32, 3, 2, "same", 16), (15, 3, 2, "same", 8), (8, 3, 1, "valid", 6),
    ])
    def test_conv_output_size(self, size, k, stride, padding, expected):
        assert T.conv_output_size(size, k, stride, padding) == expected

    def test_dense_shapes(self):
        out = T.dense(T.Value(np.ones((4, 3))), T.Value(np.ones((3, 5))), T.Value(np.zeros(5)))
        assert out.shape == (4, 5)
        assert np.all(out.data == 3.0)

    def test_batchnorm_train_normalizes(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, size=(64, 6))
        out = T.batchnorm(T.Value(x), T.Value(np.ones(6)), T.Value(np.zeros(6)), mode="train")
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, rtol=1e-4)

    def test_batchnorm_infer_uses_running_stats(self):
        x = np.full((2, 3), 5.0)
        out = T.batchnorm(T.Value(x), T.Value(np.ones(3)), T.Value(np.zeros(3)), mode="infer",
                          running_mean=np.full(3, 4.0), running_var=np.full(3, 4.0))
        np.testing.assert_allclose(out.data, 1.0 / np.sqrt(4.0 + 1e-5))

    def test_running_stats_update(self):
        x = T.Value(np.array([[1.0], [3.0]]))
        rm, rv = T.updated_running_stats(x, np.zeros(1), np.ones(1), momentum=0.99)
        np.testing.assert_allclose(rm, [0.02])
        np.testing.assert_allclose(rv, [0.99 + 0.01 * 1.0])

    def test_resize_upsample_half_pixel(self):
        x = T.Value(np.array([[[0.0], [1.0]]]).reshape(1, 1, 2))
        out = T.bilinear_resize(x, (1, 4)).data.ravel()
        np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0])

    def test_resize_same_size_is_identity(self):
        x = T.Value(np.ones((2, 3, 4)))
        assert T.bilinear_resize(x, (3, 4)) is x

    def test_interpolation_rows_sum_to_one(self):
        m = T.interpolation_matrix(5, 8)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)

    def test_global_avg_pool(self):
        x = np.arange(2 * 2 * 3 * 4, dtype=float).reshape(2, 2, 3, 4)
        np.testing.assert_allclose(T.global_avg_pool(T.Value(x)).data, x.mean(axis=(1, 2)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 5)),
              elements=st.floats(-100, 100, allow_nan=False)))
def test_pairwise_l1_matches_numpy(e):
    d = T.pairwise_l1(T.Value(e)).data
    np.testing.assert_allclose(d, np.abs(e[:, None, :] - e[None, :, :]).sum(-1))
    np.testing.assert_array_equal(np.diag(d), 0.0)
    np.testing.assert_array_equal(d, d.T)


class TestFlops:
    def test_dense_count(self):
        with T.count_flops() as c:
            T.dense(T.Value(np.ones((2, 3))), T.Value(np.ones((3, 4))), T.Value(np.zeros(4)))
        assert c.total == 2 * 2 * 3 * 4 + 2 * 4

    def test_mask_and_take_are_free(self):
        x = T.Value(np.ones((2, 4)))
        with T.count_flops() as c:
            T.take(T.scale_mask(x, np.array([1.0, 0.0, 1.0, 0.0])), [0, 2], axis=1)
        assert c.total == 0


class TestParameter:
    def test_assign_checks_shape(self):
        p = T.Parameter("w", np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            p.assign(np.zeros(3))

    def test_assign_replaces_leaf(self):
        p = T.Parameter("w", np.zeros(2))
        p.assign(np.ones(2))
        np.testing.assert_array_equal(p.data, 1.0)
        assert p.grad is None
