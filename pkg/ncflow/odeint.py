"""
Differentiable ODE integrators

Three integrators share one interface: explicit `Euler`, classical `RK4` with a
fixed step, and adaptive `Dopri5`. All of them unroll their step sequence so that
reverse- and forward-mode derivatives flow through the solution (discretize then
optimize). Vector fields are autonomous and take `(x, args)`, where `args` is any
pytree of arrays, typically `(params, xi_e, xi_j)`.

Example::

    from ncflow.odeint import IntegratorSpec, integrate

    spec = IntegratorSpec("rk4", dt=0.01)
    ys = integrate(lambda x, args: x, jnp.ones(1), np.array([0.0, 1.0]), spec)
    # ys[1] ~ e

`integrate` runs eagerly and raises on failure. `solve` is the jit/vmap-friendly
variant: it never raises, it returns a `SolveStats` record and NaN-filled rows
instead.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from enum import Enum
from typing import *

import jax
import jax.numpy as jnp
import numpy as np

from .core import ConfigError, ErrorCode, IntegrationError, NonFiniteError, ShapeError, Tensor

Field = Callable[[Tensor, Any], Tensor]
"""Vector field type alias

`Callable[[Tensor, Any], Tensor]`

Example::

    def field(x: Tensor, args: Any) -> Tensor:
        ...
"""

STATUS_OK = 0
STATUS_STEP_LIMIT = 1
STATUS_NON_FINITE = 2


class Method(Enum):
    EULER = "euler"
    RK4 = "rk4"
    DOPRI5 = "dopri5"

    @classmethod
    def get_type(cls, name: Union[str, "Method"]) -> "Method":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ConfigError(f"Unknown integration method '{name}'") from None

    @property
    def adaptive(self) -> bool:
        return self is Method.DOPRI5


@dataclass(frozen=True)
class IntegratorSpec:
    """Integrator choice and its numerical controls

    Attributes:
        method (str): One of "euler", "rk4", "dopri5"
        dt (Optional[float]): Step size, required for fixed-step methods
        rtol (Optional[float]): Relative tolerance, required for dopri5
        atol (Optional[float]): Absolute tolerance, required for dopri5
        max_steps (int): Cap on accepted adaptive steps
    """

    method: str = "rk4"
    dt: Optional[float] = None
    rtol: Optional[float] = None
    atol: Optional[float] = None
    max_steps: int = 128

    def __post_init__(self):
        method = Method.get_type(self.method)
        object.__setattr__(self, "method", method.value)
        if method.adaptive:
            if self.rtol is None or self.atol is None:
                raise ConfigError("dopri5 requires both rtol and atol")
            if self.rtol <= 0 or self.atol <= 0:
                raise ConfigError(f"Tolerances must be positive, got rtol={self.rtol}, atol={self.atol}")
        elif self.dt is None or self.dt <= 0:
            raise ConfigError(f"{method.value} requires a positive dt, got {self.dt}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "IntegratorSpec":
        unknown = set(values) - {"method", "dt", "rtol", "atol", "max_steps"}
        if unknown:
            raise ConfigError(f"Unknown solver keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {key: value for key, value in asdict(self).items() if value is not None}


class SolveStats(NamedTuple):
    """Outcome of one `solve` call; fields are arrays so the record survives vmap"""

    status: Tensor
    last_time: Tensor
    n_steps: Tensor
    n_rejected: Tensor


def _time_grid(t_eval: Any) -> np.ndarray:
    try:
        grid = np.asarray(t_eval, dtype=np.float64)
    except jax.errors.TracerArrayConversionError:
        raise ShapeError("t_eval must be a concrete array, not a traced value") from None
    if grid.ndim != 1 or grid.size < 1:
        raise ShapeError(f"t_eval must be a non-empty 1-D grid, got shape {grid.shape}")
    if np.any(np.diff(grid) <= 0):
        raise ShapeError("t_eval must be strictly increasing")
    return grid


def _rms(values: Tensor) -> Tensor:
    return jnp.sqrt(jnp.mean(jnp.square(values)))


class Integrator(ABC):
    """Integrator interface"""

    logger = property(lambda self: logging.getLogger(self.__class__.__name__))

    def __init__(self, spec: IntegratorSpec):
        self.spec = spec

    @abstractmethod
    def solve(self, field: Field, x0: Tensor, t_eval: np.ndarray, args: Any = None) -> Tuple[Tensor, SolveStats]:
        """Integrate without raising

        Arguments:
            field (Field): Vector field `(x, args) -> dx/dt`
            x0 (Tensor): Initial state, shape `[d]`
            t_eval (np.ndarray): Concrete, strictly increasing output times; `t_eval[0]` is the start
            args (Any): Pytree forwarded to the field

        Returns:
            Tuple[Tensor, SolveStats]: States `[len(t_eval), d]` (row 0 is `x0`) and the solve record
        """
        ...

    def __call__(self, field: Field, x0: Tensor, t_eval: Any, args: Any = None) -> Tensor:
        return integrate(field, x0, t_eval, self.spec, args)


class FixedStepIntegrator(Integrator):
    """Explicit fixed-step scheme that lands exactly on every output time"""

    @abstractmethod
    def step(self, field: Field, y: Tensor, h: Tensor, args: Any) -> Tensor:
        ...

    def schedule(self, t_eval: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Step sizes covering `t_eval` and the positions where each output interval ends"""
        dt = self.spec.dt
        steps: List[float] = []
        ends: List[int] = []
        for start, stop in zip(t_eval[:-1], t_eval[1:]):
            span = stop - start
            count = max(1, math.ceil(span / dt - 1e-9))
            steps += [dt] * (count - 1) + [span - (count - 1) * dt]
            ends.append(len(steps) - 1)
        return np.asarray(steps, dtype=np.float64), np.asarray(ends, dtype=np.int64)

    def solve(self, field, x0, t_eval, args=None):
        t_eval = _time_grid(t_eval)
        x0 = jnp.asarray(x0, dtype=jnp.float64)
        if t_eval.size == 1:
            return x0[None], SolveStats(jnp.int32(STATUS_OK), jnp.float64(t_eval[0]), jnp.int32(0), jnp.int32(0))

        steps, ends = self.schedule(t_eval)

        def advance(y, h):
            y_next = self.step(field, y, h, args)
            return y_next, y_next

        _, path = jax.lax.scan(advance, x0, jnp.asarray(steps))
        ys = jnp.concatenate([x0[None], path[ends]], axis=0)
        finite = jnp.all(jnp.isfinite(ys))
        status = jnp.where(finite, STATUS_OK, STATUS_NON_FINITE).astype(jnp.int32)
        stats = SolveStats(status, jnp.float64(t_eval[-1]), jnp.int32(len(steps)), jnp.int32(0))
        return ys, stats


class Euler(FixedStepIntegrator):
    def step(self, field, y, h, args):
        return y + h * field(y, args)


class RK4(FixedStepIntegrator):
    def step(self, field, y, h, args):
        k1 = field(y, args)
        k2 = field(y + 0.5 * h * k1, args)
        k3 = field(y + 0.5 * h * k2, args)
        k4 = field(y + h * k3, args)
        return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_ERR = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# Midpoint weights for the quartic dense output
_DP_MID = (
    6025192743 / 30085553152 / 2,
    0.0,
    51252292925 / 65400821598 / 2,
    -2691868925 / 45128329728 / 2,
    187940372067 / 1594534317056 / 2,
    -1776094331 / 19743644256 / 2,
    11237099 / 235043384 / 2,
)


def _combine(weights: Sequence[float], stages: Sequence[Tensor]) -> Tensor:
    total = jnp.zeros_like(stages[0])
    for weight, stage in zip(weights, stages):
        if weight != 0.0:
            total = total + weight * stage
    return total


class Dopri5(Integrator):
    """Adaptive Dormand-Prince 5(4) with PI step control and quartic dense output

    The accepted step sequence is chosen on a gradient-stopped copy of the problem
    and then replayed differentiably, so step sizes are constants of the forward
    pass. Rejected attempts never enter the replay.
    """

    safety = 0.9
    min_factor = 0.2
    max_factor = 10.0
    beta_1 = 0.7 / 5
    beta_2 = 0.4 / 5

    def _stages(self, field, y, h, args, k1):
        stages = [k1]
        for row in _DP_A[1:]:
            stages.append(field(y + h * _combine(row, stages), args))
        y_next = y + h * _combine(_DP_B, stages)
        return y_next, stages

    def _initial_step(self, field, y0, f0, args, span):
        scale = self.spec.atol + jnp.abs(y0) * self.spec.rtol
        d0 = _rms(y0 / scale)
        d1 = _rms(f0 / scale)
        h0 = jnp.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / jnp.maximum(d1, 1e-300))
        f1 = field(y0 + h0 * f0, args)
        d2 = _rms((f1 - f0) / scale) / h0
        top = jnp.maximum(d1, d2)
        h1 = jnp.where(top <= 1e-15, jnp.maximum(1e-6, h0 * 1e-3), (0.01 / jnp.maximum(top, 1e-300)) ** 0.2)
        return jnp.minimum(jnp.minimum(100 * h0, h1), span)

    def accepted_steps(self, field, x0, t0: float, t1: float, args):
        """Run the step-size controller and record the accepted `(t_start, h)` pairs"""
        args = jax.lax.stop_gradient(args)
        x0 = jax.lax.stop_gradient(x0)
        capacity = self.spec.max_steps
        rtol, atol = self.spec.rtol, self.spec.atol
        f0 = field(x0, args)
        h_init = self._initial_step(field, x0, f0, args, t1 - t0)

        starts = jnp.full((capacity,), jnp.inf)
        sizes = jnp.zeros((capacity,))
        # t, y, k1, h, err_prev, accepted, rejected, starts, sizes, status
        init = (jnp.float64(t0), x0, f0, h_init, jnp.float64(1e-4), jnp.int32(0), jnp.int32(0), starts, sizes, jnp.int32(STATUS_OK))

        def running(state):
            t, _, _, _, _, accepted, rejected, _, _, status = state
            return (t < t1) & (status == STATUS_OK) & (rejected < 10 * capacity)

        def attempt(state):
            t, y, k1, h, err_prev, accepted, rejected, starts, sizes, status = state
            last = h >= t1 - t
            h_try = jnp.where(last, t1 - t, h)
            y_next, stages = self._stages(field, y, h_try, args, k1)
            error = h_try * _combine(_DP_ERR, stages)
            scale = atol + rtol * jnp.maximum(jnp.abs(y), jnp.abs(y_next))
            err_norm = _rms(error / scale)
            finite = jnp.all(jnp.isfinite(y_next)) & jnp.isfinite(err_norm)
            accept = (err_norm <= 1.0) & finite & (accepted < capacity)

            safe_err = jnp.maximum(err_norm, 1e-10)
            factor = self.safety * safe_err ** (-self.beta_1) * err_prev ** self.beta_2
            factor = jnp.where(err_norm == 0.0, self.max_factor, factor)
            factor = jnp.clip(factor, self.min_factor, self.max_factor)
            factor = jnp.where(accept, factor, jnp.minimum(factor, 1.0))
            h_new = jnp.where(finite, h_try * factor, h_try * self.min_factor)

            slot = jnp.minimum(accepted, capacity - 1)
            starts = jnp.where(accept, starts.at[slot].set(t), starts)
            sizes = jnp.where(accept, sizes.at[slot].set(h_try), sizes)
            t_new = jnp.where(accept, jnp.where(last, t1, t + h_try), t)
            y_new = jnp.where(accept, y_next, y)
            k1_new = jnp.where(accept, stages[-1], k1)
            err_new = jnp.where(accept, jnp.maximum(err_norm, 1e-4), err_prev)
            accepted_new = accepted + accept.astype(jnp.int32)
            status_new = jnp.where(
                ~jnp.all(jnp.isfinite(y_new)),
                STATUS_NON_FINITE,
                jnp.where((accepted_new >= capacity) & (t_new < t1), STATUS_STEP_LIMIT, status),
            ).astype(jnp.int32)
            stalled = h_new <= 1e-14 * jnp.maximum(1.0, jnp.abs(t))
            status_new = jnp.where(stalled & (status_new == STATUS_OK), STATUS_STEP_LIMIT, status_new).astype(jnp.int32)
            return (t_new, y_new, k1_new, h_new, err_new, accepted_new, rejected + (~accept).astype(jnp.int32), starts, sizes, status_new)

        final = jax.lax.while_loop(running, attempt, init)
        t, _, _, _, _, accepted, rejected, starts, sizes, status = final
        status = jnp.where((status == STATUS_OK) & (t < t1), STATUS_STEP_LIMIT, status).astype(jnp.int32)
        return starts, sizes, SolveStats(status, t, accepted, rejected)

    def solve(self, field, x0, t_eval, args=None):
        t_eval = _time_grid(t_eval)
        x0 = jnp.asarray(x0, dtype=jnp.float64)
        if t_eval.size == 1:
            return x0[None], SolveStats(jnp.int32(STATUS_OK), jnp.float64(t_eval[0]), jnp.int32(0), jnp.int32(0))
        if self.spec.max_steps < t_eval.size:
            raise ConfigError(f"max_steps={self.spec.max_steps} is below the {t_eval.size} requested output times")

        starts, sizes, stats = self.accepted_steps(field, x0, float(t_eval[0]), float(t_eval[-1]), args)

        def replay(y, h):
            k1 = field(y, args)
            y_next, stages = self._stages(field, y, h, args, k1)
            y_mid = y + h * _combine(_DP_MID, stages)
            f0, f1 = stages[0], stages[-1]
            # quartic through y0, y1, f0, f1 and the midpoint, lowest degree first
            coeffs = jnp.stack(
                [
                    y,
                    h * f0,
                    h * (f1 - 4 * f0) - 11 * y - 5 * y_next + 16 * y_mid,
                    h * (5 * f0 - 3 * f1) + 18 * y + 14 * y_next - 32 * y_mid,
                    2 * h * (f1 - f0) - 8 * (y_next + y) + 16 * y_mid,
                ]
            )
            return y_next, coeffs

        _, coeffs = jax.lax.scan(replay, x0, sizes)

        times = jnp.asarray(t_eval[1:])
        index = jnp.clip(jnp.searchsorted(starts, times, side="right") - 1, 0, self.spec.max_steps - 1)
        local = (times - starts[index]) / jnp.where(sizes[index] > 0, sizes[index], 1.0)
        powers = local[:, None] ** jnp.arange(5)[None, :]
        rows = jnp.einsum("nk,nkd->nd", powers, coeffs[index])
        ys = jnp.concatenate([x0[None], rows], axis=0)
        ys = jnp.where(stats.status == STATUS_OK, ys, jnp.nan)
        return ys, stats


_INTEGRATORS: Dict[Method, Type[Integrator]] = {
    Method.EULER: Euler,
    Method.RK4: RK4,
    Method.DOPRI5: Dopri5,
}


def get_integrator(spec: IntegratorSpec) -> Integrator:
    return _INTEGRATORS[Method.get_type(spec.method)](spec)


def solve(field: Field, x0: Tensor, t_eval: Any, spec: IntegratorSpec, args: Any = None) -> Tuple[Tensor, SolveStats]:
    """Integrate `field` from `x0`; safe under jit and vmap (never raises on numerical failure)"""
    return get_integrator(spec).solve(field, x0, t_eval, args)


def integrate(field: Field, x0: Tensor, t_eval: Any, spec: IntegratorSpec, args: Any = None) -> Tensor:
    """Integrate `field` from `x0` and return the states at `t_eval`

    Arguments:
        field (Field): Autonomous vector field `(x, args) -> dx/dt`
        x0 (Tensor): Initial state
        t_eval (Any): Concrete, strictly increasing output grid starting at the initial time
        spec (IntegratorSpec): Method and numerical controls
        args (Any): Pytree forwarded to the field

    Returns:
        Tensor: `[len(t_eval), d]`; row 0 is `x0`

    Raises:
        IntegrationError: Adaptive step cap exceeded; carries the last accepted time
        NonFiniteError: The state became NaN or infinite
    """
    ys, stats = solve(field, x0, t_eval, spec, args)
    if isinstance(stats.status, jax.core.Tracer):
        return ys
    status = int(stats.status)
    if status == STATUS_STEP_LIMIT:
        raise IntegrationError(
            f"{spec.method}: step cap of {spec.max_steps} exceeded after t={float(stats.last_time):.6g}",
            last_time=float(stats.last_time),
        )
    if status == STATUS_NON_FINITE:
        raise NonFiniteError(f"{spec.method}: state became non-finite before t={float(stats.last_time):.6g}")
    return ys


def raise_for_status(status: Any, last_time: Any, method: str):
    """Raise for the first failing entry of a (possibly batched) status array, naming its coordinates"""
    status = np.asarray(status)
    failing = np.argwhere(status != STATUS_OK)
    if failing.size == 0:
        return
    where = tuple(int(i) for i in failing[0])
    code = int(status[where])
    last_time = float(np.asarray(last_time)[where]) if last_time is not None else float("nan")
    coords = where or None
    if code == STATUS_NON_FINITE:
        raise IntegrationError(f"{method}: state became non-finite", last_time, coords, ErrorCode.NON_FINITE)
    raise IntegrationError(f"{method}: step cap exceeded", last_time, coords)


class ExactProblem(NamedTuple):
    """Scalar test problem with a closed-form solution"""

    field: Field
    x0: Tensor
    t_end: float
    exact: Callable[[float], np.ndarray]


EXPONENTIAL = ExactProblem(lambda x, args: x, np.array([1.0]), 1.0, lambda t: np.array([math.exp(t)]))
"""dx/dt = x, x(0) = 1"""


def order_check(method: Union[str, Method], problem: ExactProblem = EXPONENTIAL, dts: Sequence[float] = (0.1, 0.05, 0.025, 0.0125)) -> List[float]:
    """Empirical convergence order of a fixed-step method

    Arguments:
        method (Union[str, Method]): "euler" or "rk4"
        problem (ExactProblem): Problem with a known solution at `t_end`
        dts (Sequence[float]): Successively halved step sizes

    Returns:
        List[float]: `log2(err(dt) / err(dt / 2))` for each refinement
    """
    method = Method.get_type(method)
    if method.adaptive:
        raise ConfigError("order_check needs a fixed-step method")
    grid = np.array([0.0, problem.t_end])
    errors = []
    for dt in dts:
        ys = integrate(problem.field, jnp.asarray(problem.x0), grid, IntegratorSpec(method.value, dt=dt))
        errors.append(float(np.max(np.abs(np.asarray(ys[-1]) - problem.exact(problem.t_end)))))
    return [math.log2(coarse / fine) for coarse, fine in zip(errors[:-1], errors[1:])]
