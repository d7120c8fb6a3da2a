import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from ncflow.core import ConfigError, IntegrationError, NonFiniteError, ShapeError
from ncflow.odeint import (
    STATUS_NON_FINITE,
    STATUS_OK,
    STATUS_STEP_LIMIT,
    RK4,
    IntegratorSpec,
    Method,
    get_integrator,
    integrate,
    order_check,
    raise_for_status,
    solve,
)


def growth(x, args):
    return x


def decay(x, rate):
    return -rate * x


def lotka_volterra(x, args):
    u, v = x[0], x[1]
    return jnp.stack([0.5 * u - 0.75 * u * v, 0.75 * u * v - 0.5 * v])


class TestSpec:
    @pytest.mark.parametrize(
        "values",
        [
            {"method": "rk4"},
            {"method": "euler", "dt": -0.1},
            {"method": "dopri5", "rtol": 1e-3},
            {"method": "dopri5", "rtol": 0.0, "atol": 1e-6},
            {"method": "heun", "dt": 0.1},
            {"method": "rk4", "dt": 0.1, "max_steps": 0},
        ],
    )
    def test_rejected(self, values):
        with pytest.raises(ConfigError):
            IntegratorSpec(**values)

    def test_dict_round_trip(self):
        spec = IntegratorSpec("dopri5", rtol=1e-3, atol=1e-6, max_steps=64)
        assert IntegratorSpec.from_dict(spec.to_dict()) == spec
        assert "dt" not in spec.to_dict()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            IntegratorSpec.from_dict({"method": "rk4", "dt": 0.1, "order": 4})

    def test_method_lookup(self):
        assert Method.get_type("RK4") is Method.RK4
        assert Method.DOPRI5.adaptive and not Method.EULER.adaptive


class TestFixedStep:
    def test_rk4_order(self):
        for order in order_check("rk4"):
            assert order == pytest.approx(4.0, abs=0.2)

    def test_euler_order(self):
        for order in order_check("euler"):
            assert order == pytest.approx(1.0, abs=0.1)

    def test_order_check_needs_fixed_step(self):
        with pytest.raises(ConfigError):
            order_check("dopri5")

    def test_schedule_lands_on_outputs(self):
        steps, ends = RK4(IntegratorSpec("rk4", dt=0.3)).schedule(np.array([0.0, 0.5, 1.0]))
        np.testing.assert_allclose(np.cumsum(steps)[ends], [0.5, 1.0], atol=1e-15)
        assert np.all(steps <= 0.3 + 1e-15)

    def test_first_row_is_initial_state(self):
        x0 = np.array([0.7, -1.2])
        ys = integrate(decay, x0, np.array([0.0, 0.5, 1.0]), IntegratorSpec("rk4", dt=0.1), 2.0)
        assert ys.shape == (3, 2)
        np.testing.assert_array_equal(ys[0], x0)
        np.testing.assert_allclose(ys[-1], x0 * math.exp(-2.0), rtol=1e-6)

    @pytest.mark.parametrize("method", ["euler", "rk4"])
    def test_equilibrium_is_stationary(self, method):
        equilibrium = np.array([0.5 / 0.75, 0.5 / 0.75])
        ys = integrate(lotka_volterra, equilibrium, np.linspace(0.0, 10.0, 21), IntegratorSpec(method, dt=0.05))
        np.testing.assert_allclose(ys, np.broadcast_to(equilibrium, ys.shape), rtol=0, atol=1e-12)

    def test_single_output_time(self):
        ys = integrate(growth, np.ones(1), np.array([0.0]), IntegratorSpec("rk4", dt=0.1))
        np.testing.assert_array_equal(ys, [[1.0]])

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            integrate(lambda x, args: x * x, np.ones(1), np.array([0.0, 10.0]), IntegratorSpec("euler", dt=0.1))

    def test_gradient_through_solution(self):
        spec = IntegratorSpec("rk4", dt=0.01)
        derivative = jax.grad(lambda x0: integrate(decay, x0, np.array([0.0, 1.0]), spec, 1.0)[-1, 0])(jnp.ones(1))
        assert float(derivative[0]) == pytest.approx(math.exp(-1.0), rel=1e-8)

    def test_vmap_over_initial_states(self):
        spec = IntegratorSpec("rk4", dt=0.05)
        x0s = jnp.array([[1.0], [2.0], [3.0]])
        ys, stats = jax.vmap(lambda x0: solve(decay, x0, np.array([0.0, 0.5]), spec, 1.0))(x0s)
        assert ys.shape == (3, 2, 1)
        assert np.all(np.asarray(stats.status) == STATUS_OK)
        np.testing.assert_allclose(ys[:, 1, 0], np.array([1.0, 2.0, 3.0]) * math.exp(-0.5), rtol=1e-6)


class TestTimeGrid:
    @pytest.mark.parametrize("grid", [[0.0, 0.5, 0.5], [0.0, 1.0, 0.5], [[0.0, 1.0]], []])
    def test_rejected(self, grid):
        with pytest.raises(ShapeError):
            integrate(growth, np.ones(1), np.array(grid), IntegratorSpec("rk4", dt=0.1))


class TestDopri5:
    def test_against_fine_rk4(self):
        t = np.linspace(0.0, 9.5, 20)
        x0 = np.array([1.0, 0.5])
        reference = integrate(lotka_volterra, x0, t, IntegratorSpec("rk4", dt=1e-3))
        rtol = 1e-6
        ys = integrate(lotka_volterra, x0, t, IntegratorSpec("dopri5", rtol=rtol, atol=1e-9, max_steps=1000))
        scale = np.maximum(1.0, np.abs(np.asarray(reference)))
        assert np.all(np.abs(np.asarray(ys) - np.asarray(reference)) <= 10 * rtol * scale)

    def test_independent_of_capacity(self):
        t = np.linspace(0.0, 9.5, 20)
        x0 = np.array([1.0, 0.5])
        small = integrate(lotka_volterra, x0, t, IntegratorSpec("dopri5", rtol=1e-5, atol=1e-8, max_steps=256))
        large = integrate(lotka_volterra, x0, t, IntegratorSpec("dopri5", rtol=1e-5, atol=1e-8, max_steps=1024))
        np.testing.assert_allclose(small, large, rtol=0, atol=1e-13)

    def test_equilibrium_is_stationary(self):
        equilibrium = np.array([0.5 / 0.75, 0.5 / 0.75])
        spec = IntegratorSpec("dopri5", rtol=1e-6, atol=1e-9, max_steps=256)
        ys = integrate(lotka_volterra, equilibrium, np.linspace(0.0, 10.0, 21), spec)
        np.testing.assert_allclose(ys, np.broadcast_to(equilibrium, ys.shape), rtol=0, atol=1e-12)

    def test_exact_endpoints(self):
        ys = integrate(decay, np.array([2.0]), np.array([0.0, 0.3, 1.7]), IntegratorSpec("dopri5", rtol=1e-8, atol=1e-10), 1.0)
        assert float(ys[0, 0]) == 2.0
        assert float(ys[-1, 0]) == pytest.approx(2.0 * math.exp(-1.7), rel=1e-6)

    def test_step_limit(self):
        spec = IntegratorSpec("dopri5", rtol=1e-10, atol=1e-12, max_steps=2)
        with pytest.raises(IntegrationError) as info:
            integrate(decay, np.ones(1), np.array([0.0, 1.0]), spec, 1e4)
        assert info.value.last_time < 1.0

    def test_solve_reports_step_limit(self):
        spec = IntegratorSpec("dopri5", rtol=1e-10, atol=1e-12, max_steps=2)
        ys, stats = solve(decay, np.ones(1), np.array([0.0, 1.0]), spec, 1e4)
        assert int(stats.status) == STATUS_STEP_LIMIT
        assert np.all(np.isnan(np.asarray(ys)))

    def test_capacity_below_outputs(self):
        spec = IntegratorSpec("dopri5", rtol=1e-3, atol=1e-6, max_steps=2)
        with pytest.raises(ConfigError):
            solve(growth, np.ones(1), np.linspace(0.0, 1.0, 5), spec)

    def test_gradient_matches_finite_difference(self):
        spec = IntegratorSpec("dopri5", rtol=1e-8, atol=1e-10)
        t = np.array([0.0, 0.5, 1.0])

        def final(rate):
            return integrate(decay, jnp.ones(1), t, spec, rate)[-1, 0]

        derivative = float(jax.grad(final)(1.3))
        assert derivative == pytest.approx(-math.exp(-1.3), rel=1e-5)

    def test_integrator_call(self):
        integrator = get_integrator(IntegratorSpec("dopri5", rtol=1e-6, atol=1e-9))
        ys = integrator(growth, np.ones(1), np.array([0.0, 1.0]))
        assert float(ys[-1, 0]) == pytest.approx(math.e, rel=1e-5)


class TestRaiseForStatus:
    def test_names_first_failure(self):
        status = np.zeros((2, 3, 2), dtype=np.int32)
        status[1, 2, 0] = STATUS_STEP_LIMIT
        last_time = np.full((2, 3, 2), 4.75)
        last_time[1, 2, 0] = 1.25
        with pytest.raises(IntegrationError) as info:
            raise_for_status(status, last_time, "dopri5")
        assert info.value.coordinates == (1, 2, 0)
        assert info.value.last_time == 1.25

    def test_non_finite_code(self):
        with pytest.raises(IntegrationError) as info:
            raise_for_status(np.array([STATUS_OK, STATUS_NON_FINITE]), None, "rk4")
        assert info.value.coordinates == (1,)

    def test_all_ok(self):
        raise_for_status(np.zeros((2, 2), dtype=np.int32), None, "rk4")
