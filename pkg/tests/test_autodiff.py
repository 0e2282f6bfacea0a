import numpy as np
import pytest

from noiseinit import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = f(x)
        flat[i] = orig - eps
        minus = f(x)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return g


def check_unary(build, x, rtol=1e-6, atol=1e-8):
    """Compare tape gradients of ``sum(build(p) * weights)`` with central differences."""
    weights = np.random.default_rng(99).normal(size=build(ad.Tape().const(x)).value.shape)

    def value(v):
        tape = ad.Tape()
        return float(np.sum(build(tape.const(v)).value * weights))

    tape = ad.Tape()
    p = tape.param("x", x.copy())
    loss = ad.reduce_sum(ad.mul(build(p), weights))
    grad = tape.backward(loss)["x"]
    np.testing.assert_allclose(grad, numeric_grad(value, x.copy()), rtol=rtol, atol=atol)


RNG = np.random.default_rng(0)


class TestClosedForms:
    def test_quadratic_form(self):
        rng = np.random.default_rng(1)
        w0, x = rng.normal(size=(3, 4)), rng.normal(size=(4, 1))
        tape = ad.Tape()
        w = tape.param("w", w0)
        y = ad.matmul(w, x)
        loss = ad.mul(ad.reduce_sum(ad.mul(y, y)), 1.0 / 3)
        grad = tape.backward(loss)["w"]
        np.testing.assert_allclose(grad, 2 * (w0 @ x) @ x.T / 3, atol=1e-10)

    def test_softmax_then_dot(self):
        rng = np.random.default_rng(2)
        z0, v = rng.normal(size=5), rng.normal(size=5)
        tape = ad.Tape()
        z = tape.param("z", z0)
        loss = ad.reduce_sum(ad.mul(ad.softmax(z), v))
        s = np.exp(z0 - z0.max())
        s /= s.sum()
        jac = np.diag(s) - np.outer(s, s)
        np.testing.assert_allclose(tape.backward(loss)["z"], jac @ v, atol=1e-10)

    def test_mse(self):
        rng = np.random.default_rng(3)
        p0, t = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        tape = ad.Tape()
        p = tape.param("p", p0)
        loss = ad.mse(p, t)
        assert float(loss.value) == pytest.approx(np.mean((p0 - t) ** 2), rel=1e-12)
        np.testing.assert_allclose(tape.backward(loss)["p"], 2 * (p0 - t) / 6, atol=1e-12)


class TestPrimitives:
    def test_add_sub_broadcast(self):
        b = RNG.normal(size=(1, 4))
        check_unary(lambda x: ad.sub(ad.add(x, b), ad.mul(x, 0.5)), RNG.normal(size=(3, 4)))
        a = RNG.normal(size=(3, 4))
        check_unary(lambda x: ad.add(a, x), RNG.normal(size=(1, 4)))

    def test_mul_both_sides(self):
        check_unary(lambda x: ad.mul(x, x), RNG.normal(size=(2, 3)))

    def test_matmul_batched(self):
        w = RNG.normal(size=(4, 5))
        check_unary(lambda x: ad.matmul(x, w), RNG.normal(size=(2, 3, 4)))
        x0 = RNG.normal(size=(2, 3, 4))
        check_unary(lambda w_: ad.matmul(x0, w_), RNG.normal(size=(4, 5)))

    def test_linear(self):
        w, b = RNG.normal(size=(3, 2)), RNG.normal(size=2)
        check_unary(lambda x: ad.linear(x, w, b), RNG.normal(size=(4, 3)))

    def test_constants_only_rejected(self):
        with pytest.raises(TypeError):
            ad.add(np.ones(2), np.ones(2))

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
    def test_reduce_sum(self, axis, keepdims):
        check_unary(lambda x: ad.reduce_sum(x, axis=axis, keepdims=keepdims), RNG.normal(size=(3, 4)))

    def test_mean_reshape_transpose(self):
        check_unary(lambda x: ad.mean(ad.transpose(ad.reshape(x, (2, 6)), (1, 0))), RNG.normal(size=(3, 4)))
        check_unary(lambda x: ad.transpose(x, (2, 0, 1)), RNG.normal(size=(2, 3, 4)))

    def test_gather_with_repeats(self):
        idx = np.array([[0, 2], [2, 2], [1, 0]])
        check_unary(lambda x: ad.gather(x, idx), RNG.normal(size=(3, 4)))

    def test_concat(self):
        other = RNG.normal(size=(2, 3))
        check_unary(lambda x: ad.concat([other, x, x], axis=1), RNG.normal(size=(2, 2)))

    def test_softmax_axis(self):
        check_unary(lambda x: ad.softmax(x, axis=0), RNG.normal(size=(4, 3)))

    def test_sigmoid_gelu(self):
        check_unary(ad.sigmoid, RNG.normal(size=7) * 3)
        check_unary(ad.gelu, RNG.normal(size=7) * 3)

    def test_gelu_values(self):
        x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
        tape = ad.Tape()
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(ad.gelu(tape.const(x)).value, ref, atol=1e-15)

    def test_layer_norm(self):
        check_unary(ad.layer_norm, RNG.normal(size=(3, 6)), rtol=1e-5)

    def test_dwconv3d_input_and_weight(self):
        w = RNG.normal(size=(2, 3, 3, 3))
        check_unary(lambda x: ad.dwconv3d(x, w), RNG.normal(size=(2, 3, 4, 3)))
        x0 = RNG.normal(size=(2, 3, 4, 3))
        check_unary(lambda w_: ad.dwconv3d(x0, w_), RNG.normal(size=(2, 3, 3, 3)))

    @pytest.mark.parametrize("mode", [1, 2, 3, 4])
    def test_mode_product_both_operands(self, mode):
        dims = (2, 3, 4, 3)
        a = RNG.normal(size=(5, dims[mode - 1]))
        check_unary(lambda x: ad.mode_product(x, a, mode), RNG.normal(size=dims))
        x0 = RNG.normal(size=dims)
        check_unary(lambda a_: ad.mode_product(x0, a_, mode), a.copy())


class TestTape:
    def _graph(self):
        rng = np.random.default_rng(4)
        tape = ad.Tape()
        w = tape.param("w", rng.normal(size=(3, 3)))
        x = tape.const(rng.normal(size=(2, 3)))
        h = ad.gelu(ad.matmul(x, w))
        loss = ad.mean(ad.mul(ad.softmax(h), h))
        return tape, w, loss

    def test_replay_bit_exact(self):
        tape, _, loss = self._graph()
        values = tape.replay()
        for node, value in zip(tape.nodes, values):
            np.testing.assert_array_equal(node.value, value)
        assert values[loss.index] == loss.value

    def test_replay_tracks_leaf_changes(self):
        tape, w, loss = self._graph()
        before = float(loss.value)
        w.value = w.value * 2
        assert tape.replay()[loss.index] != before

    def test_untouched_param_gets_zeros(self):
        tape = ad.Tape()
        a = tape.param("a", np.ones(3))
        tape.param("unused", np.ones((2, 2)))
        grads = tape.backward(ad.reduce_sum(a))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
        np.testing.assert_array_equal(grads["a"], np.ones(3))

    def test_param_reuse_accumulates(self):
        tape = ad.Tape()
        a = tape.param("a", np.array([2.0]))
        assert tape.param("a", np.array([9.0])) is a
        loss = ad.reduce_sum(ad.add(ad.mul(a, a), a))
        np.testing.assert_allclose(tape.backward(loss)["a"], [5.0])

    def test_off_tape_loss(self):
        tape, other = ad.Tape(), ad.Tape()
        loss = ad.reduce_sum(other.param("a", np.ones(2)))
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_non_scalar_loss(self):
        tape = ad.Tape()
        with pytest.raises(RuntimeError):
            tape.backward(ad.mul(tape.param("a", np.ones(2)), 2.0))

    def test_operator_overloads(self):
        tape = ad.Tape()
        a = tape.param("a", np.array([1.0, 2.0]))
        out = ad.reduce_sum((2.0 - a) * a + a @ np.eye(2) - (-a))
        grads = tape.backward(out)
        np.testing.assert_allclose(grads["a"], 2.0 - 2 * a.value + 2.0)
