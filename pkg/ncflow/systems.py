"""
Benchmark dynamical systems

Ground-truth vector fields, initial-condition samplers and environment grids for
the five benchmarks:

    SP  simple pendulum                      x = (angle, angular velocity)
    LV  Lotka-Volterra                       x = (prey, predators)
    GO  glycolytic oscillator                x = (s1, ..., s7)
    SM  Sel'kov model                        x = (x, y)
    BT  Brusselator on a periodic 8x8 grid   x = concat(U.ravel(), V.ravel())

`generate_dataset` simulates every trajectory with scipy's adaptive RK45 at tight
tolerances, independent of the integrator the learner later uses.
"""

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import *

import jax
import jax.numpy as jnp
import numpy as np
import yaml
from scipy.integrate import solve_ivp

from .core import ConfigError, IntegrationError, Tensor
from .dataset import SPLITS, Split, TrajectoryDataset
from .odeint import IntegratorSpec

logger = logging.getLogger(__name__)

Assignment = Dict[str, float]
"""Parameter name to value"""

REFERENCE_RTOL = 1e-7
REFERENCE_ATOL = 1e-9

GO_IC_LOW = (0.15, 0.19, 0.04, 0.10, 0.08, 0.14, 0.05)
GO_IC_HIGH = (1.60, 2.16, 0.20, 0.35, 0.30, 2.67, 0.10)


class SystemName(Enum):
    SP = "SP"
    LV = "LV"
    GO = "GO"
    SM = "SM"
    BT = "BT"

    @classmethod
    def get_type(cls, name: Union[str, "SystemName"]) -> "SystemName":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            raise ConfigError(f"Unknown system '{name}'") from None


@dataclass(frozen=True)
class SystemSpec:
    """A benchmark system

    Attributes:
        name (str): One of SP, LV, GO, SM, BT
        state_size (int): Dimension of the state
        varying (Tuple[str, ...]): Parameters that change across environments
        fixed (Mapping[str, float]): Parameters held constant, with their values
        dt (float): Output spacing
        n_steps (int): Number of output times, the first at t = 0
        grid_size (int): Side of the spatial grid (BT only)
    """

    name: str
    state_size: int
    varying: Tuple[str, ...]
    fixed: Mapping[str, float]
    dt: float
    n_steps: int
    grid_size: int = 0
    ic_low: Tuple[float, ...] = ()
    ic_high: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.varying:
            raise ConfigError(f"{self.name}: no varying parameters")
        if set(self.varying) & set(self.fixed):
            raise ConfigError(f"{self.name}: parameters both fixed and varying")

    @property
    def parameters(self) -> Tuple[str, ...]:
        return tuple(self.varying) + tuple(self.fixed)

    @property
    def horizon(self) -> float:
        return self.dt * (self.n_steps - 1)

    @property
    def t_eval(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps, dtype=np.float64)

    def complete(self, assignment: Mapping[str, float]) -> Assignment:
        """Merge an assignment with the fixed parameters, rejecting unknown or missing names"""
        unknown = set(assignment) - set(self.parameters)
        if unknown:
            raise ConfigError(f"{self.name}: unknown parameters {sorted(unknown)}")
        missing = set(self.varying) - set(assignment)
        if missing:
            raise ConfigError(f"{self.name}: unbound parameters {sorted(missing)}")
        return {**self.fixed, **{key: float(value) for key, value in assignment.items()}}


@dataclass(frozen=True)
class EnvironmentGrid:
    """Parameter assignments for the training and adaptation environments

    Attributes:
        train (Tuple[Assignment, ...]): Shared by the train and test splits
        adapt (Tuple[Assignment, ...]): Shared by the ood_train and ood_test splits
        allow_overlap (bool): Accept adaptation environments that repeat a training one
    """

    train: Tuple[Assignment, ...]
    adapt: Tuple[Assignment, ...]
    allow_overlap: bool = False

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(dict(env) for env in self.train))
        object.__setattr__(self, "adapt", tuple(dict(env) for env in self.adapt))
        if not self.train or not self.adapt:
            raise ConfigError("Environment grid needs training and adaptation environments")
        overlap = [env for env in self.adapt if env in self.train]
        if overlap and not self.allow_overlap:
            raise ConfigError(f"Adaptation environments {overlap} repeat training environments")
        if overlap:
            warnings.warn(f"Adaptation environments {overlap} repeat training environments")

    def check(self, spec: SystemSpec):
        for env in self.train + self.adapt:
            spec.complete(env)


@dataclass(frozen=True)
class Benchmark:
    """A system together with its grid and per-split trajectory counts"""

    spec: SystemSpec
    grid: EnvironmentGrid
    n_train: int
    n_test: int
    n_adapt: int = 1
    n_ood_test: int = 0

    def counts(self) -> Dict[str, int]:
        return {"train": self.n_train, "test": self.n_test, "ood_train": self.n_adapt, "ood_test": self.n_ood_test or self.n_test}


### Vector fields ###
def _pendulum(p: Assignment, x: Tensor) -> Tensor:
    angle, velocity = x[0], x[1]
    return jnp.stack([velocity, -(p["g"] / p["L"]) * jnp.sin(angle)])


def _lotka_volterra(p: Assignment, x: Tensor) -> Tensor:
    prey, predators = x[0], x[1]
    return jnp.stack([p["alpha"] * prey - p["beta"] * prey * predators, p["delta"] * prey * predators - p["gamma"] * predators])


def _glycolytic(p: Assignment, s: Tensor) -> Tensor:
    s1, s2, s3, s4, s5, s6, s7 = (s[i] for i in range(7))
    uptake = p["k1"] * s1 * s6 / (1 + (s6 / p["K1"]) ** p["q"])
    forward_2 = p["k2"] * s2 * (p["N"] - s5)
    forward_3 = p["k3"] * s3 * (p["A"] - s6)
    exchange = p["kappa"] * (s4 - s7)
    return jnp.stack(
        [
            p["J0"] - uptake,
            2 * uptake - forward_2 - p["k6"] * s2 * s5,
            forward_2 - forward_3,
            forward_3 - p["k4"] * s4 * s5 - exchange,
            forward_2 - p["k4"] * s4 * s5 - p["k6"] * s2 * s5,
            -2 * uptake + 2 * forward_3 - p["k5"] * s6,
            p["psi"] * exchange - p["k"] * s7,
        ]
    )


def _selkov(p: Assignment, x: Tensor) -> Tensor:
    u, v = x[0], x[1]
    return jnp.stack([-u + p["a"] * v + u**2 * v, p["b"] - p["a"] * v - u**2 * v])


def periodic_laplacian(z: Tensor) -> Tensor:
    """5-point Laplacian with unit spacing and periodic boundaries"""
    return jnp.roll(z, 1, 0) + jnp.roll(z, -1, 0) + jnp.roll(z, 1, 1) + jnp.roll(z, -1, 1) - 4 * z


def _brusselator(p: Assignment, x: Tensor) -> Tensor:
    side = int(round(math.sqrt(x.shape[0] // 2)))
    u = x[: side * side].reshape(side, side)
    v = x[side * side :].reshape(side, side)
    reaction = u**2 * v
    du = p["Du"] * periodic_laplacian(u) + p["A"] - (p["B"] + 1) * u + reaction
    dv = p["Dv"] * periodic_laplacian(v) + p["B"] * u - reaction
    return jnp.concatenate([du.ravel(), dv.ravel()])


_FIELDS: Dict[SystemName, Callable[[Assignment, Tensor], Tensor]] = {
    SystemName.SP: _pendulum,
    SystemName.LV: _lotka_volterra,
    SystemName.GO: _glycolytic,
    SystemName.SM: _selkov,
    SystemName.BT: _brusselator,
}


def true_field(spec: SystemSpec, params: Mapping[str, float], x: Any) -> Tensor:
    """Exact right-hand side of the system in environment `params`

    Raises:
        ConfigError: Unknown or unbound parameter names
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape != (spec.state_size,):
        raise ConfigError(f"{spec.name}: state of shape {x.shape}, expected ({spec.state_size},)")
    return _FIELDS[SystemName.get_type(spec.name)](spec.complete(params), x)


@lru_cache(maxsize=None)
def _compiled_field(name: str) -> Callable[[Assignment, Tensor], Tensor]:
    return jax.jit(_FIELDS[SystemName.get_type(name)])


### Initial conditions ###
def sample_ic(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one initial condition from the system's distribution"""
    name = SystemName.get_type(spec.name)
    if name == SystemName.SP:
        return np.array([rng.uniform(-np.pi / 3, np.pi / 3), rng.uniform(-1.0, 1.0)])
    if name == SystemName.LV:
        return rng.uniform(1.0, 3.0, size=2)
    if name == SystemName.GO:
        return rng.uniform(np.asarray(spec.ic_low), np.asarray(spec.ic_high))
    if name == SystemName.SM:
        return rng.uniform(0.0, 3.0, size=2)
    a_bar = rng.uniform(0.5, 2.0)
    b_bar = rng.uniform(1.25, 5.0)
    cells = spec.grid_size * spec.grid_size
    u0 = np.full(cells, a_bar)
    v0 = b_bar / a_bar + 0.1 * rng.standard_normal(cells)
    return np.concatenate([u0, v0])


def corrupt(X: np.ndarray, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise of standard deviation `eta`"""
    return np.asarray(X) + eta * rng.standard_normal(np.shape(X))


def load_go_ranges(path: Union[str, os.PathLike]) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Read the glycolytic initial-condition ranges from a YAML file with `low` and `high` lists"""
    with open(path) as fh:
        values = yaml.safe_load(fh) or {}
    try:
        low, high = tuple(map(float, values["low"])), tuple(map(float, values["high"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid GO initial-condition ranges ({exc})") from None
    if len(low) != 7 or len(high) != 7 or any(lo >= hi for lo, hi in zip(low, high)):
        raise ConfigError(f"{path}: GO ranges need 7 increasing (low, high) pairs")
    return low, high


### Presets ###
def _grid(**axes: Sequence[float]) -> List[Assignment]:
    names = list(axes)
    mesh = np.meshgrid(*[np.asarray(axes[name], dtype=np.float64) for name in names], indexing="ij")
    return [{name: float(values.ravel()[i]) for name, values in zip(names, mesh)} for i in range(mesh[0].size)]


def _sm_bands(per_band: int) -> List[float]:
    bands = [(-1.0, -0.25), (-0.1, 0.1), (0.25, 1.0)]
    return [float(b) for low, high in bands for b in np.linspace(low, high, per_band)]


def system_spec(name: Union[str, SystemName], go_ranges: Optional[Tuple[Sequence[float], Sequence[float]]] = None) -> SystemSpec:
    name = SystemName.get_type(name)
    if name == SystemName.SP:
        return SystemSpec("SP", 2, ("g",), {"L": 1.0}, dt=0.25, n_steps=20)
    if name == SystemName.LV:
        return SystemSpec("LV", 2, ("beta", "delta"), {"alpha": 0.5, "gamma": 0.5}, dt=0.5, n_steps=20)
    if name == SystemName.GO:
        low, high = go_ranges or (GO_IC_LOW, GO_IC_HIGH)
        fixed = {"J0": 2.5, "k2": 6.0, "k3": 16.0, "k4": 100.0, "k5": 1.28, "k6": 12.0, "q": 4.0, "N": 1.0, "A": 4.0, "kappa": 13.0, "psi": 0.1, "k": 1.8}
        return SystemSpec("GO", 7, ("k1", "K1"), fixed, dt=0.05, n_steps=20, ic_low=tuple(low), ic_high=tuple(high))
    if name == SystemName.SM:
        return SystemSpec("SM", 2, ("b",), {"a": 0.1}, dt=4.0, n_steps=11)
    return SystemSpec("BT", 2 * 8 * 8, ("A", "B"), {"Du": 1.0, "Dv": 0.1}, dt=0.5, n_steps=20, grid_size=8)


def preset(name: Union[str, SystemName], scale: str = "desk", go_ranges=None) -> Benchmark:
    """Environment grid and trajectory counts at `desk` or `paper` scale

    Desk scale keeps every parameter range but shrinks environment and trajectory
    counts so a full run fits on a laptop.
    """
    if scale not in ("desk", "paper"):
        raise ConfigError(f"Unknown scale '{scale}'")
    paper = scale == "paper"
    name = SystemName.get_type(name)
    spec = system_spec(name, go_ranges)
    n_test = 32 if paper else 8

    if name == SystemName.SP:
        # the full-scale gravity grid contains 10.25, which is also an adaptation gravity
        grid = EnvironmentGrid(_grid(g=np.linspace(2.0, 24.0, 25 if paper else 8)), _grid(g=[10.25, 14.75]), allow_overlap=paper)
        return Benchmark(spec, grid, 4, n_test, 1, n_test)
    if name == SystemName.LV:
        grid = EnvironmentGrid(_grid(beta=[0.5, 0.75, 1.0], delta=[0.5, 0.75, 1.0]), _grid(beta=[0.625, 1.125], delta=[0.625, 1.125]))
        return Benchmark(spec, grid, 4, n_test, 1, n_test)
    if name == SystemName.GO:
        grid = EnvironmentGrid(_grid(k1=[100.0, 90.0, 80.0], K1=[1.0, 0.75, 0.5]), _grid(k1=[85.0, 95.0], K1=[0.625, 0.875]))
        return Benchmark(spec, grid, 32 if paper else 4, n_test, 1, n_test)
    if name == SystemName.SM:
        grid = EnvironmentGrid(_grid(b=_sm_bands(7 if paper else 3)), _grid(b=[-1.25, -0.65, -0.05, 0.02, 0.6, 1.2]))
        return Benchmark(spec, grid, 4, 4, 1, 4)
    grid = EnvironmentGrid(
        _grid(A=[0.75, 1.0, 1.25], B=[3.25, 3.5, 3.75]),
        _grid(A=[0.875, 1.125, 1.375], B=[3.125, 3.375, 3.625, 3.875]),
    )
    return Benchmark(spec, grid, 4, n_test if paper else 4, 1, n_test if paper else 4)


def lv_adaptation_grid(n: int, low: float = 0.25, high: float = 1.25) -> List[Assignment]:
    """Regular n x n (beta, delta) grid of adaptation environments"""
    if n < 1:
        raise ConfigError(f"Grid resolution must be positive, got {n}")
    axis = np.linspace(low, high, n)
    return _grid(beta=axis, delta=axis)


### Generation ###
def simulate(spec: SystemSpec, params: Assignment, x0: np.ndarray, coordinates: Tuple[int, ...] = ()) -> np.ndarray:
    """Reference trajectory on `spec.t_eval`, shape `[n_steps, d]`"""
    compiled = _compiled_field(spec.name)
    params = spec.complete(params)
    t_eval = spec.t_eval

    def rhs(t, y):
        return np.asarray(compiled(params, jnp.asarray(y)))

    solution = solve_ivp(rhs, (t_eval[0], t_eval[-1]), np.asarray(x0, dtype=np.float64), method="RK45", t_eval=t_eval, rtol=REFERENCE_RTOL, atol=REFERENCE_ATOL)
    trajectory = solution.y.T
    if solution.status != 0 or trajectory.shape != (spec.n_steps, spec.state_size) or not np.all(np.isfinite(trajectory)):
        last_time = float(solution.t[-1]) if solution.t.size else float(t_eval[0])
        raise IntegrationError(f"{spec.name}: reference simulation failed ({solution.message})", last_time, coordinates or None)
    return trajectory


def generate_dataset(
    spec: SystemSpec,
    grid: EnvironmentGrid,
    n_train_trajs: int,
    n_test_trajs: int,
    solver: Optional[IntegratorSpec],
    seed: int,
    n_adapt_trajs: int = 1,
    n_ood_test_trajs: Optional[int] = None,
    jobs: Optional[int] = None,
) -> TrajectoryDataset:
    """Simulate the four splits

    Each split draws its initial conditions from its own generator seeded with
    `(seed, split index)`, in environment-major order. LV shares one set of
    initial conditions across all environments of a split.

    Arguments:
        spec (SystemSpec): System to simulate
        grid (EnvironmentGrid): Training and adaptation environments
        n_train_trajs (int): Trajectories per environment in `train`
        n_test_trajs (int): Trajectories per environment in `test`
        solver (Optional[IntegratorSpec]): Learner's integrator, recorded in the metadata only
        seed (int): Generator seed
        n_adapt_trajs (int): Trajectories per environment in `ood_train`
        n_ood_test_trajs (Optional[int]): Trajectories per environment in `ood_test`, defaults to `n_test_trajs`
        jobs (Optional[int]): Worker threads; assembly order does not depend on it

    Raises:
        IntegrationError: A reference simulation failed; names (environment, trajectory)
    """
    grid.check(spec)
    counts = {"train": n_train_trajs, "test": n_test_trajs, "ood_train": n_adapt_trajs, "ood_test": n_test_trajs if n_ood_test_trajs is None else n_ood_test_trajs}
    shared_ics = SystemName.get_type(spec.name) == SystemName.LV

    splits = {}
    for split_index, name in enumerate(SPLITS):
        envs = grid.train if name in ("train", "test") else grid.adapt
        count = counts[name]
        rng = np.random.default_rng([seed, split_index])
        if shared_ics:
            shared = [sample_ic(spec, rng) for _ in range(count)]
            ics = [shared for _ in envs]
        else:
            ics = [[sample_ic(spec, rng) for _ in range(count)] for _ in envs]

        tasks = [(env_index, traj, env, ics[env_index][traj]) for env_index, env in enumerate(envs) for traj in range(count)]
        logger.debug("Simulating %d %s trajectories for %s", len(tasks), name, spec.name)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda task: simulate(spec, task[2], task[3], (task[0], task[1])), tasks))
        X = np.stack(results).reshape(len(envs), count, spec.n_steps, spec.state_size) if tasks else np.zeros((len(envs), 0, spec.n_steps, spec.state_size))
        splits[name] = Split(spec.t_eval.copy(), X)

    metadata = {
        "system": spec.name,
        "environments": {name: [dict(env) for env in (grid.train if name in ("train", "test") else grid.adapt)] for name in SPLITS},
        "fixed": dict(spec.fixed),
        "seed": int(seed),
        "solver": solver.to_dict() if solver is not None else None,
    }
    logger.info("Generated %s dataset with seed %d", spec.name, seed)
    return TrajectoryDataset(splits, metadata)


def generate_benchmark(benchmark: Benchmark, seed: int, solver: Optional[IntegratorSpec] = None, jobs: Optional[int] = None) -> TrajectoryDataset:
    counts = benchmark.counts()
    return generate_dataset(
        benchmark.spec,
        benchmark.grid,
        counts["train"],
        counts["test"],
        solver,
        seed,
        n_adapt_trajs=counts["ood_train"],
        n_ood_test_trajs=counts["ood_test"],
        jobs=jobs,
    )


def default_solver(name: Union[str, SystemName]) -> IntegratorSpec:
    """Learner integrator per system: RK4 with dt 0.1 for LV, Dopri5 (1e-3, 1e-6) otherwise"""
    if SystemName.get_type(name) == SystemName.LV:
        return IntegratorSpec("rk4", dt=0.1)
    return IntegratorSpec("dopri5", rtol=1e-3, atol=1e-6)
