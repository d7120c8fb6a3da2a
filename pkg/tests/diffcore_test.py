import jax
import jax.numpy as jnp
import numpy as np
import pytest

from ncflow import diffcore as dc
from ncflow.core import NestingError, NonFiniteError, ShapeError

POINT = np.array([0.3, -0.7, 1.1])
WEIGHT = np.array([[0.5, -1.2], [0.8, 0.3], [-0.4, 0.9]])


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        step = np.zeros_like(x)
        step[index] = h
        out[index] = (float(f(x + step)) - float(f(x - step))) / (2 * h)
    return out


def assert_close(actual, expected, rel=1e-4):
    actual, expected = np.asarray(actual), np.asarray(expected)
    scale = np.maximum(np.abs(expected), 1e-8)
    assert np.all(np.abs(actual - expected) / scale < rel)


@pytest.mark.parametrize("name", sorted(dc.UNARY_PRIMITIVES))
def test_unary_grad(name):
    primitive = dc.UNARY_PRIMITIVES[name]
    f = dc.DiffFunction(lambda x: dc.sum_(primitive(x)), (3,), name=name)
    assert_close(dc.grad(f, POINT), central_difference(f, POINT))


@pytest.mark.parametrize("name", sorted(dc.UNARY_PRIMITIVES))
def test_unary_jvp(name):
    primitive = dc.UNARY_PRIMITIVES[name]
    tangent = np.array([1.0, -2.0, 0.5])
    value, directional = dc.jvp(lambda x: dc.sum_(primitive(x)), POINT, tangent)
    expected = np.dot(central_difference(lambda x: dc.sum_(primitive(jnp.asarray(x))), POINT), tangent)
    assert float(value) == pytest.approx(float(dc.sum_(primitive(jnp.asarray(POINT)))))
    assert float(directional) == pytest.approx(expected, rel=1e-4)


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_binary_grad(name):
    primitive = dc.BINARY_PRIMITIVES[name]
    other = np.array([0.9, 0.2, -0.4])
    grads = dc.grad(lambda a, b: dc.sum_(dc.square(primitive(a, b))), POINT, other)
    assert_close(grads[0], central_difference(lambda a: dc.sum_(dc.square(primitive(jnp.asarray(a), jnp.asarray(other)))), POINT))
    assert_close(grads[1], central_difference(lambda b: dc.sum_(dc.square(primitive(jnp.asarray(POINT), jnp.asarray(b)))), other))


def test_matmul_grad():
    weight = np.arange(6.0).reshape(3, 2) / 10
    grad = dc.grad(lambda w: dc.sum_(dc.tanh(dc.matmul(jnp.asarray(POINT), w))), weight)
    assert_close(grad, central_difference(lambda w: dc.sum_(dc.tanh(dc.matmul(jnp.asarray(POINT), jnp.asarray(w)))), weight))


class TestShapes:
    def test_binary_mismatch(self):
        with pytest.raises(ShapeError):
            dc.add(jnp.ones(3), jnp.ones(2))

    def test_scalar_broadcast(self):
        assert dc.mul(jnp.ones(3), jnp.float64(2.0)).shape == (3,)

    def test_matmul_contraction(self):
        with pytest.raises(ShapeError):
            dc.matmul(jnp.ones((2, 3)), jnp.ones((2, 3)))

    def test_declared_signature(self):
        f = dc.DiffFunction(lambda x: dc.sum_(x), (3,))
        with pytest.raises(ShapeError):
            dc.evaluate(f, np.ones(4))

    def test_grad_needs_scalar(self):
        with pytest.raises(ShapeError):
            dc.grad(lambda x: dc.square(x), POINT)

    def test_jvp_tangent_shape(self):
        with pytest.raises(ShapeError):
            dc.jvp(dc.sin, POINT, np.ones(2))

    def test_reshape_and_slice(self):
        with pytest.raises(ShapeError):
            dc.reshape(jnp.ones(6), (4, 2))
        with pytest.raises(ShapeError):
            dc.slice_(jnp.ones(3), 1, 5)


class TestForwardMode:
    def test_evaluate_is_deterministic(self):
        f = lambda x: dc.sum_(dc.swish(x))
        assert float(dc.evaluate(f, POINT)) == float(dc.evaluate(f, POINT))

    def test_jvp_nested_square(self):
        at, tangent = np.array([0.5, -1.0]), np.array([0.25, 2.0])
        first, second = dc.jvp_nested(dc.square, at, tangent)
        np.testing.assert_allclose(first, 2 * at * tangent, rtol=1e-12)
        np.testing.assert_allclose(second, 2 * tangent * tangent - 2 * at * tangent, rtol=1e-12)

    def test_depth_is_restored(self):
        dc.jvp_nested(dc.sin, POINT, POINT)
        assert dc.forward_depth() == 0

    def test_three_levels_rejected(self):
        def level2(a):
            return dc.jvp(lambda b: dc.jvp(dc.sin, b, b)[1], a, a)[1]

        with pytest.raises(NestingError):
            dc.jvp(level2, POINT, POINT)
        assert dc.forward_depth() == 0

    def test_jvp_linear_in_tangent(self):
        f = lambda x: dc.tanh(dc.matmul(x, jnp.asarray(WEIGHT)))
        rng = np.random.default_rng(0)
        for _ in range(20):
            u, v = rng.standard_normal(3), rng.standard_normal(3)
            a, b = rng.standard_normal(2)
            combined = dc.jvp(f, POINT, a * u + b * v)[1]
            separate = a * dc.jvp(f, POINT, u)[1] + b * dc.jvp(f, POINT, v)[1]
            np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("target", [None, np.array([1.0, 0.2, -0.3])])
    def test_jvp_nested_matches_hessian(self, target):
        f = lambda x: dc.swish(dc.matmul(x, jnp.asarray(WEIGHT)))
        tangent = np.array([0.4, -0.1, 0.7])
        anchor = POINT + tangent if target is None else target
        first, second = dc.jvp_nested(f, POINT, tangent, target=target)

        jacobian = np.asarray(jax.jacobian(f)(jnp.asarray(POINT)))
        hessian = np.asarray(jax.hessian(f)(jnp.asarray(POINT)))
        offset = anchor - POINT
        np.testing.assert_allclose(first, jacobian @ offset, rtol=1e-12, atol=1e-14)
        expected = np.einsum("oij,i,j->o", hessian, offset, tangent) - jacobian @ tangent
        np.testing.assert_allclose(second, expected, rtol=1e-10, atol=1e-12)


class TestReverseMode:
    def test_grad_of_nested_jvp(self):
        def f(x):
            return dc.sum_(dc.jvp_nested(dc.sin, x, jnp.ones(3))[1])

        # second output is -sin(x) - cos(x) per component
        expected = -np.cos(POINT) + np.sin(POINT)
        np.testing.assert_allclose(dc.grad(f, POINT), expected, rtol=1e-10)

    def test_nan_is_reported(self):
        def f(x):
            big = dc.exp(dc.scale(x, 1000.0))
            return dc.sum_(dc.sub(big, big))

        with pytest.raises(NonFiniteError):
            dc.grad(f, np.array([1.0]))

    def test_mlp_mse_gradient(self):
        rng = np.random.default_rng(1)
        inputs, targets = rng.standard_normal((5, 3)), rng.standard_normal((5, 1))
        hidden, output = rng.standard_normal((3, 4)) / 2, rng.standard_normal((4, 1)) / 2

        def loss(w1, w2):
            prediction = dc.matmul(dc.tanh(dc.matmul(jnp.asarray(inputs), jnp.asarray(w1))), jnp.asarray(w2))
            return dc.mean(dc.square(dc.sub(prediction, jnp.asarray(targets))))

        grads = dc.grad(loss, hidden, output)
        assert_close(grads[0], central_difference(lambda w: loss(w, output), hidden), rel=1e-5)
        assert_close(grads[1], central_difference(lambda w: loss(hidden, w), output), rel=1e-5)
