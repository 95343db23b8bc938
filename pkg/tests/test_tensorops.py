import numpy as np
import pytest
from hypothesis import given, strategies as st

from hpss_uda import tensorops as T


def f64(a):
    return T.parameter(np.asarray(a, dtype=np.float64))


def conv_oracle(x, k, b):
    """Quadruple-loop 'same' cross-correlation."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + w] = x
    out = np.zeros((n, o, h, w))
    for i in range(n):
        for oc in range(o):
            for r in range(h):
                for q in range(w):
                    out[i, oc, r, q] = b[oc] + np.sum(xp[i, :, r:r + kh, q:q + kw] * k[oc])
    return out


class TestConv:
    def test_box_sum_of_ones(self, backend):
        y = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.zeros(1)))
        assert y.data[0, 0, 1, 1] == 9
        assert y.data[0, 0, 0, 0] == 4

    def test_zero_kernel_gives_bias(self, backend, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        y = T.conv2d(T.Tensor(x), T.Tensor(np.zeros((4, 3, 3, 3))), T.Tensor(np.arange(4.0)))
        for oc in range(4):
            assert np.all(y.data[:, oc] == oc)

    def test_matches_loop_oracle(self, backend, rng):
        x = rng.standard_normal((1, 2, 8, 8))
        k = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        y = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b))
        np.testing.assert_allclose(y.data, conv_oracle(x, k, b), atol=1e-6)

    @pytest.mark.parametrize("kshape", [(1, 5), (5, 1), (3, 3)])
    def test_elongated_kernels(self, backend, rng, kshape):
        x = rng.standard_normal((2, 3, 6, 7))
        k = rng.standard_normal((2, 3) + kshape)
        b = rng.standard_normal(2)
        y = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b))
        np.testing.assert_allclose(y.data, conv_oracle(x, k, b), atol=1e-6)

    def test_valid_padding_shape(self, rng):
        y = T.conv2d(T.Tensor(rng.standard_normal((1, 1, 8, 9))), T.Tensor(np.ones((2, 1, 3, 5))),
                     T.Tensor(np.zeros(2)), padding="valid")
        assert y.shape == (1, 2, 6, 5)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 3, 3))), T.Tensor(np.zeros(1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(T.Tensor(np.ones((1, 1, 4, 4))), T.Tensor(np.ones((1, 1, 2, 2))), T.Tensor(np.zeros(1)))

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linearity(self, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((2, 1, 2, 6, 6))
        k = T.Tensor(r.standard_normal((3, 2, 3, 3)))
        z = T.Tensor(np.zeros(3))
        lhs = T.conv2d(T.Tensor(a * x + b * y), k, z).data
        rhs = a * T.conv2d(T.Tensor(x), k, z).data + b * T.conv2d(T.Tensor(y), k, z).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6 * (1 + abs(a) + abs(b)) * 10)


class TestMaxPool:
    def test_single_window(self, backend):
        y = T.maxpool2d(T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert y.data.item() == 4

    def test_constant_routes_to_first(self, backend):
        x = T.parameter(np.full((1, 1, 4, 4), 2.5))
        y = T.maxpool2d(x)
        assert np.all(y.data == 2.5)
        T.backward(T.sum_all(y))
        expect = np.zeros((4, 4))
        expect[::2, ::2] = 1
        np.testing.assert_array_equal(x.grad[0, 0], expect)

    def test_matches_window_oracle(self, backend, rng):
        x = rng.standard_normal((1, 1, 6, 6))
        y = T.maxpool2d(T.Tensor(x)).data[0, 0]
        for i in range(3):
            for j in range(3):
                assert y[i, j] == x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            T.maxpool2d(T.Tensor(np.ones((1, 1, 5, 4))))


class TestDenseAndActivations:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        y = T.dense(T.Tensor(x), T.Tensor(np.eye(4)), T.Tensor(np.zeros(4)))
        np.testing.assert_allclose(y.data, x)

    def test_zero_weight(self, rng):
        y = T.dense(T.Tensor(rng.standard_normal((2, 4))), T.Tensor(np.zeros((4, 3))), T.Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(y.data, [[1, 2, 3], [1, 2, 3]])

    def test_dot_product_oracle(self, rng):
        x, w, b = rng.standard_normal((1, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        y = T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        for j in range(3):
            assert abs(y[0, j] - (sum(x[0, i] * w[i, j] for i in range(4)) + b[j])) < 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            T.dense(T.Tensor(np.ones((1, 4))), T.Tensor(np.ones((3, 2))), T.Tensor(np.zeros(2)))

    def test_relu_sigmoid_values(self):
        assert T.activation(T.Tensor([-1.0]), "relu").data[0] == 0
        assert T.activation(T.Tensor([2.0]), "relu").data[0] == 2
        assert T.activation(T.Tensor([0.0]), "sigmoid").data[0] == 0.5
        assert abs(T.activation(T.Tensor([2.0]), "sigmoid").data[0] - 1 / (1 + np.exp(-2))) < 1e-6
        np.testing.assert_array_equal(T.activation(T.Tensor([-2.0, 3.0]), "linear").data, [-2, 3])

    def test_sigmoid_strictly_inside_unit_interval(self):
        y = T.sigmoid(T.Tensor(np.array([-1e4, -40.0, 40.0, 1e4], dtype=np.float32))).data
        assert np.all(y > 0) and np.all(y < 1) and np.all(np.isfinite(y))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            T.activation(T.Tensor([1.0]), "tanh")

    @given(a=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_dense_linearity(self, a, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((2, 2, 5))
        w, z = T.Tensor(r.standard_normal((5, 3))), T.Tensor(np.zeros(3))
        lhs = T.dense(T.Tensor(a * x + y), w, z).data
        rhs = a * T.dense(T.Tensor(x), w, z).data + T.dense(T.Tensor(y), w, z).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestBackward:
    def test_sum_of_params(self, rng):
        p = [f64(rng.standard_normal(s)) for s in [(3,), (2, 2)]]
        T.backward(T.add(T.sum_all(p[0]), T.sum_all(p[1])))
        for q in p:
            np.testing.assert_array_equal(q.grad, np.ones(q.shape))

    def test_unused_param_gets_exact_zero(self, rng):
        a, b = f64(rng.standard_normal(3)), f64(rng.standard_normal(3))
        ga, gb = T.backward(T.sum_all(a), [a, b])
        assert np.all(gb == 0)

    def test_non_requested_leaves_untouched(self, rng):
        a, b = f64(rng.standard_normal(3)), f64(rng.standard_normal(3))
        b.grad = "sentinel"
        T.backward(T.sum_all(T.add(a, b.detach())))
        assert b.grad == "sentinel"

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError, match="forward"):
            T.backward(T.parameter(np.array(1.0)))

    def test_non_scalar_loss(self):
        with pytest.raises(ValueError):
            T.backward(T.scale(T.parameter(np.ones(3)), 2.0))

    def test_graph_topological_and_buffer_shapes(self, rng):
        w = f64(rng.standard_normal((2, 1, 3, 3)))
        b = f64(np.zeros(2))
        loss = T.sum_all(T.relu(T.conv2d(T.Tensor(rng.standard_normal((1, 1, 4, 4))), w, b)))
        g = T.Graph(loss)
        pos = {id(n): i for i, n in enumerate(g.nodes)}
        for n in g.nodes:
            for parent in n._parents:
                assert pos[id(parent)] < pos[id(n)]
        grads = g.backward()
        for leaf in g.leaves:
            assert grads[id(leaf)].shape == leaf.shape

    def test_detached_discriminator_untouched(self, rng):
        """A loss through a detached copy leaves the original gradients alone."""
        wc = f64(rng.standard_normal((4, 1)))
        wc.grad = None
        we = f64(rng.standard_normal((3, 4)))
        z = T.dense(T.Tensor(rng.standard_normal((2, 3))), we, T.Tensor(np.zeros(4)))
        p = T.sigmoid(T.dense(z, wc.detach(), T.Tensor(np.zeros(1))))
        T.backward(T.sum_all(p))
        assert wc.grad is None and we.grad is not None

    def test_determinism(self, rng):
        x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        k = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
        outs = [T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(np.zeros(3, np.float32))).data for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()


class TestLosses:
    def test_weighted_sse_scalar_example(self):
        est = T.Tensor(np.array([[[2.0, 0.0], [5.0, 5.0]]]))
        tgt = np.array([[[0.0, 0.0], [5.0, 5.0]]])
        assert T.weighted_sse(est, tgt, [0.5, 0.5]).item() == 2.0

    def test_bce_chance_level(self):
        v = T.binary_cross_entropy(T.Tensor(np.full(4, 0.5)), T.Tensor(np.full(4, 0.5))).item()
        assert abs(v - 2 * np.log(2)) < 1e-12

    def test_bce_empty_rejected(self):
        with pytest.raises(ValueError):
            T.binary_cross_entropy(T.Tensor(np.zeros(0)), T.Tensor(np.full(2, 0.5)))


class TestGradCheck:
    def test_epsilon_range(self):
        p = f64([1.0])
        with pytest.raises(ValueError):
            T.grad_check(lambda: T.sum_all(p), [p], epsilon=1e-2)

    def test_linear_net_is_exact(self, rng):
        w = f64(rng.standard_normal((4, 3)))
        b = f64(rng.standard_normal(3))
        x = T.Tensor(rng.standard_normal((5, 4)))
        err = T.grad_check(lambda: T.sum_all(T.dense(x, w, b)), [w, b])
        assert err < 1e-7

    def test_dense_sigmoid_bce(self, rng):
        w = f64(rng.standard_normal((6, 1)) * 0.5)
        b = f64([0.1])
        xa = T.Tensor(rng.standard_normal((4, 6)))
        xb = T.Tensor(rng.standard_normal((4, 6)) + 0.5)

        def loss():
            pa = T.reshape(T.sigmoid(T.dense(xa, w, b)), (-1,))
            pb = T.reshape(T.sigmoid(T.dense(xb, w, b)), (-1,))
            return T.binary_cross_entropy(pa, pb)

        assert T.grad_check(loss, [w, b]) < 1e-4

    def test_conv_relu_mse(self, rng):
        w = f64(rng.standard_normal((2, 1, 3, 3)))
        b = f64(rng.standard_normal(2) * 0.1)
        x = T.Tensor(rng.standard_normal((2, 1, 6, 6)))
        y = rng.standard_normal((2, 2, 6, 6))
        err = T.grad_check(lambda: T.weighted_sse(T.relu(T.conv2d(x, w, b)), y, [0.5, 0.5]), [w, b])
        assert err < 1e-4

    @pytest.mark.parametrize("op", ["maxpool", "upsample", "concat", "mul", "elongated"])
    def test_layer(self, backend, rng, op):
        w = f64(rng.standard_normal((2, 2, 3, 3)))
        wl = f64(rng.standard_normal((2, 2, 1, 5)))
        b = f64(rng.standard_normal(2))
        x = f64(rng.standard_normal((2, 2, 4, 6)))
        gate = rng.random((2, 1, 4, 6))

        def loss():
            h = T.conv2d(x, w, b)
            if op == "maxpool":
                h = T.maxpool2d(h)
            elif op == "upsample":
                h = T.upsample2x(h)
            elif op == "concat":
                h = T.concat_channels([h, T.conv2d(x, wl, b)])
            elif op == "mul":
                h = T.mul(T.sigmoid(h), T.Tensor(gate))
            else:
                h = T.conv2d(h, wl, b)
            return T.weighted_sse(h, np.zeros(h.shape), [0.5] * h.shape[1])

        assert T.grad_check(loss, [w, wl, b, x] if op in ("concat", "elongated") else [w, b, x]) < 1e-4
