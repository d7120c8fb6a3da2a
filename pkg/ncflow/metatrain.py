"""
Meta-training of contextual vector fields

Every training environment `e` owns a learnable context `xi_e`. The field is
evaluated for environment `e` through a Taylor expansion around the contexts of a
small pool of environments `j`, and the loss averages over environments,
trajectories and pool members. Two alternating schemes are provided:

    OrdinaryTrainer   one Adam step on the weights, then one on the contexts, per epoch
    ProximalTrainer   inner Adam loops on proximally anchored subproblems, per outer step

`BaselineTrainer` fits context-free fields, either one for all environments (OFA)
or one per environment (OPE).

Example::

    config = TrainConfig.from_yaml("configs/lv_desk.yaml")
    report = train_ordinary(dataset, config)
    report.save("runs/lv")
"""

import csv
import logging
import math
import os
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import *

import jax
import jax.numpy as jnp
import numpy as np
import optax
import yaml

from .core import NUMERICAL_ERRORS, ConfigError, NcfError, NonFiniteError, PoolError, ShapeError, Tensor
from .dataset import Split, TrajectoryDataset
from .filters import BestCheckpoint, RelativeChange
from .models import NetWidths, ThreeNetParams, count_params, count_weights, init_three_net, load_params, make_field, params_digest, plain_field, save_params, vf_eval
from .odeint import IntegratorSpec, raise_for_status, solve

logger = logging.getLogger(__name__)

SEED_VARIABLE = "NCF_SEED"


### Pools ###
class PoolKind(Enum):
    RANDOM_ALL = "random_all"
    NEAREST_FIRST = "nearest_first"
    SMALLEST_FIRST = "smallest_first"

    @classmethod
    def get_type(cls, name: Union[str, "PoolKind"]) -> "PoolKind":
        if isinstance(name, cls):
            return name
        aliases = {"ra": cls.RANDOM_ALL, "nf": cls.NEAREST_FIRST, "sf": cls.SMALLEST_FIRST}
        key = str(name).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"Unknown pool strategy '{name}'") from None


@dataclass(frozen=True)
class PoolStrategy:
    """How the environments `j` that environment `e` expands around are chosen

    Attributes:
        kind (str): random_all, nearest_first (Euclidean, self first) or smallest_first (L1 norm)
        p (int): Pool size
    """

    kind: str = "nearest_first"
    p: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolKind.get_type(self.kind).value)
        if self.p < 1:
            raise PoolError(f"Pool size must be at least 1, got {self.p}")

    def check(self, m: int):
        if self.p > m:
            raise PoolError(f"Pool size {self.p} exceeds the {m} available environments")


def build_pool(strategy: PoolStrategy, e: int, contexts: Any, rng: Optional[np.random.Generator] = None) -> List[int]:
    """Indices of the environments environment `e` expands around

    Ties are broken by lowest index; for nearest_first, `e` itself always comes first.

    Raises:
        PoolError: `p` exceeds the number of environments
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    m = contexts.shape[0]
    strategy.check(m)
    kind = PoolKind.get_type(strategy.kind)
    if kind == PoolKind.RANDOM_ALL:
        rng = rng if rng is not None else np.random.default_rng()
        return [int(j) for j in rng.choice(m, size=strategy.p, replace=False)]
    if kind == PoolKind.NEAREST_FIRST:
        distance = np.linalg.norm(contexts - contexts[e], axis=1)
        distance[e] = -1.0
    else:
        distance = np.abs(contexts).sum(axis=1)
    return [int(j) for j in np.argsort(distance, kind="stable")[: strategy.p]]


def pool_indices(strategy: PoolStrategy, contexts: Tensor, key: jax.Array) -> Tensor:
    """`build_pool` for every environment at once, traceable; returns `int[m, p]`"""
    contexts = jax.lax.stop_gradient(contexts)
    m, p = contexts.shape[0], strategy.p
    kind = PoolKind.get_type(strategy.kind)
    if kind == PoolKind.RANDOM_ALL:
        keys = jax.random.split(key, m)
        return jax.vmap(lambda k: jax.random.choice(k, m, (p,), replace=False))(keys)
    if kind == PoolKind.NEAREST_FIRST:
        distance = jnp.sqrt(jnp.sum(jnp.square(contexts[:, None, :] - contexts[None, :, :]), axis=-1))
        distance = jnp.where(jnp.eye(m, dtype=bool), -1.0, distance)
        return jnp.argsort(distance, axis=1, stable=True)[:, :p]
    order = jnp.argsort(jnp.sum(jnp.abs(contexts), axis=1), stable=True)[:p]
    return jnp.broadcast_to(order, (m, p))


### Losses ###
def squared_norm(tree: Any) -> Tensor:
    return sum(jnp.sum(jnp.square(leaf)) for leaf in jax.tree_util.tree_leaves(tree))


def squared_distance(tree: Any, anchor: Any) -> Tensor:
    return squared_norm(jax.tree_util.tree_map(jnp.subtract, tree, anchor))


def inner_loss(
    params: ThreeNetParams,
    xi_e: Tensor,
    xi_j: Tensor,
    predicted: Tensor,
    true: Tensor,
    lambda1: float,
    lambda2: float,
) -> Tensor:
    """Trajectory loss of one candidate

    `mean((predicted - true)^2) + lambda1 / d_xi * |xi_e|_1 + lambda2 / d_theta * |theta|_2^2`.
    The context penalty applies to `xi_e`; `xi_j` only shaped the candidate.

    Raises:
        ShapeError: Trajectories differ in shape
    """
    if jnp.shape(predicted) != jnp.shape(true):
        raise ShapeError(f"inner_loss: predicted {jnp.shape(predicted)} and true {jnp.shape(true)} differ")
    data = jnp.mean(jnp.square(predicted - true))
    context = lambda1 / xi_e.shape[0] * jnp.sum(jnp.abs(xi_e)) if xi_e.shape[0] else 0.0
    weights = lambda2 / count_params(params) * squared_norm(params)
    return data + context + weights


class LossTerms(NamedTuple):
    """Decomposition returned alongside the total loss"""

    data: Tensor
    context: Tensor
    weights: Tensor
    status: Tensor
    """`int[m, S, p]` solver status per candidate `(e, i, j)`"""
    last_time: Tensor


def make_objective(t: np.ndarray, solver: IntegratorSpec, k: int, lambda1: float, lambda2: float):
    """Total loss as a traceable function `(params, contexts, X, pools) -> (loss, LossTerms)`

    The loss is the mean of `inner_loss` over environments `e`, trajectories `i`
    and pool members `j`; candidate `(e, i, j)` integrates the expansion around
    `xi_j` evaluated at `xi_e` from `X[e, i, 0]`.
    """
    field = make_field(k)
    t = np.asarray(t, dtype=np.float64)

    def objective(params: ThreeNetParams, contexts: Tensor, X: Tensor, pools: Tensor):
        def per_env(x_env, xi_e, pool):
            def per_member(j):
                xi_j = contexts[j]

                def per_traj(x_true):
                    ys, stats = solve(field, x_true[0], t, solver, (params, xi_e, xi_j))
                    return jnp.mean(jnp.square(ys - x_true)), stats.status, stats.last_time

                return jax.vmap(per_traj)(x_env)

            return jax.vmap(per_member)(pool)

        data, status, last_time = jax.vmap(per_env)(X, contexts, pools)
        data_term = jnp.mean(data)
        context_term = lambda1 / contexts.shape[1] * jnp.mean(jnp.sum(jnp.abs(contexts), axis=1))
        weight_term = lambda2 / count_params(params) * squared_norm(params)
        terms = LossTerms(data_term, context_term, weight_term, status.transpose(0, 2, 1), last_time.transpose(0, 2, 1))
        return data_term + context_term + weight_term, terms

    return objective


def total_loss(params: ThreeNetParams, contexts: Any, split: Split, config: "TrainConfig", key: Optional[jax.Array] = None) -> float:
    """Eager total loss over a split with pools drawn from `key`

    Raises:
        IntegrationError: A candidate failed; names its (env, traj, pool member)
    """
    contexts = jnp.asarray(contexts, dtype=jnp.float64)
    config.pool.check(contexts.shape[0])
    key = jax.random.PRNGKey(config.seed) if key is None else key
    objective = make_objective(split.t, config.solver, config.taylor_order, config.lambda1, config.lambda2)
    pools = pool_indices(config.pool, contexts, key)
    value, terms = objective(params, contexts, jnp.asarray(split.X), pools)
    raise_for_status(terms.status, terms.last_time, config.solver.method)
    return float(value)


### Optimizers ###
def adam(lr: float, total_steps: Optional[int] = None, drop_factor: Optional[float] = None) -> optax.GradientTransformation:
    """Adam (0.9, 0.999, 1e-8), optionally multiplying the rate by `drop_factor` at one and two thirds of `total_steps`"""
    schedule: Union[float, optax.Schedule] = lr
    if drop_factor is not None and total_steps:
        boundaries = {max(1, total_steps // 3): drop_factor, max(2, 2 * total_steps // 3): drop_factor}
        schedule = optax.piecewise_constant_schedule(lr, boundaries)
    return optax.adam(schedule, b1=0.9, b2=0.999, eps=1e-8)


def adam_step(optimizer: optax.GradientTransformation, params: Any, grads: Any, state: optax.OptState) -> Tuple[Any, optax.OptState]:
    """One bias-corrected Adam update"""
    updates, state = optimizer.update(grads, state, params)
    return optax.apply_updates(params, updates), state


### Configuration ###
@dataclass
class TrainConfig:
    """Training hyperparameters

    Attributes:
        algorithm (str): "ordinary" or "proximal"
        taylor_order (int): Expansion order k in {0, 1, 2}
        context_size (int): d_xi
        widths (NetWidths): Layer widths of the three networks
        pool (PoolStrategy): Context pool strategy and size
        lambda1 (float): Context L1 penalty
        lambda2 (float): Weight L2 penalty
        lr_theta (float): Weight learning rate
        lr_ctx (float): Context learning rate
        lr_drop_factor (Optional[float]): Rate multiplier applied at one and two thirds of training
        beta (float): Proximal coefficient
        epochs (int): Epochs (ordinary) or outer iterations (proximal)
        inner_iters_theta (int): Weight inner-loop cap (proximal)
        inner_iters_ctx (int): Context inner-loop cap (proximal)
        inner_tol (float): Relative loss change that ends an inner loop early
        solver (IntegratorSpec): Learner's integrator
        seed (int): Initialization and pool seed; overridden by NCF_SEED in `from_yaml`
        val_every (int): Validate on the test split every this many epochs and keep the best checkpoint; 0 disables
        restore_best (bool): Restore the best validated checkpoint at the end
        log_every (int): Epoch summary period
        adapt_iters (int): Adaptation iteration cap
        adapt_lr (Optional[float]): Adaptation learning rate, defaults to `lr_ctx`
        adapt_tol (float): Relative loss change that ends adaptation early
    """

    algorithm: str = "ordinary"
    taylor_order: int = 1
    context_size: int = 32
    widths: NetWidths = field(default_factory=lambda: NetWidths((32, 32), (32, 32), (32, 32)))
    activation: str = "swish"
    pool: PoolStrategy = field(default_factory=PoolStrategy)
    lambda1: float = 1e-3
    lambda2: float = 0.0
    lr_theta: float = 1e-3
    lr_ctx: float = 1e-3
    lr_drop_factor: Optional[float] = None
    beta: float = 10.0
    epochs: int = 500
    inner_iters_theta: int = 10
    inner_iters_ctx: int = 10
    inner_tol: float = 1e-6
    solver: IntegratorSpec = field(default_factory=lambda: IntegratorSpec("rk4", dt=0.1))
    seed: int = 0
    val_every: int = 50
    restore_best: bool = True
    log_every: int = 50
    adapt_iters: int = 1500
    adapt_lr: Optional[float] = None
    adapt_tol: float = 0.0

    def __post_init__(self):
        if isinstance(self.widths, Mapping):
            self.widths = NetWidths.from_dict(self.widths)
        if isinstance(self.pool, Mapping):
            self.pool = PoolStrategy(**self.pool)
        if isinstance(self.solver, Mapping):
            self.solver = IntegratorSpec.from_dict(self.solver)
        if self.algorithm not in ("ordinary", "proximal"):
            raise ConfigError(f"Unknown algorithm '{self.algorithm}'")
        if self.taylor_order not in (0, 1, 2):
            raise ConfigError(f"Taylor order must be 0, 1 or 2, got {self.taylor_order}")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.beta < 0:
            raise ConfigError("lambda1, lambda2 and beta must be non-negative")
        for name in ("lr_theta", "lr_ctx"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.adapt_lr is not None and self.adapt_lr <= 0:
            raise ConfigError("adapt_lr must be positive")
        if self.context_size < 1:
            raise ConfigError("context_size must be positive")
        for name in ("epochs", "val_every", "adapt_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.inner_iters_theta < 1 or self.inner_iters_ctx < 1 or self.log_every < 1:
            raise ConfigError("Inner iteration caps and log_every must be positive")

    @property
    def adaptation_lr(self) -> float:
        return self.lr_ctx if self.adapt_lr is None else self.adapt_lr

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_yaml(cls, path: Union[str, os.PathLike]) -> "TrainConfig":
        with open(path) as fh:
            values = yaml.safe_load(fh) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")
        values = dict(values)
        if os.environ.get(SEED_VARIABLE):
            try:
                values["seed"] = int(os.environ[SEED_VARIABLE])
            except ValueError:
                raise ConfigError(f"{SEED_VARIABLE} must be an integer") from None
        return cls.from_dict(values)

    def to_dict(self) -> Dict[str, Any]:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["widths"] = self.widths.to_dict()
        values["pool"] = asdict(self.pool)
        values["solver"] = self.solver.to_dict()
        return values

    def to_yaml(self, path: Union[str, os.PathLike]):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


### Reports ###
TERM_NAMES = ("data", "context", "weights", "proximal")


@dataclass
class TrainReport:
    """Outcome of a training run

    `losses[q]` is the total loss at the iterate entering epoch `q`; `terms[q]`
    decomposes it (the proximal entry is the penalty at the end of that epoch's
    inner loops, 0 for the ordinary scheme).
    """

    algorithm: str
    config: Dict[str, Any]
    seed: int
    params: Optional[ThreeNetParams] = None
    contexts: Optional[np.ndarray] = None
    losses: List[float] = field(default_factory=list)
    terms: List[Dict[str, float]] = field(default_factory=list)
    val_history: List[Tuple[int, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    wall_clock: float = 0.0
    status: str = "completed"
    error: Optional[str] = None
    failure: Optional[NcfError] = field(default=None, repr=False)

    @property
    def epochs(self) -> int:
        return len(self.losses)

    def record(self, loss: float, terms: Mapping[str, float]):
        self.losses.append(float(loss))
        self.terms.append({name: float(terms.get(name, 0.0)) for name in TERM_NAMES})

    def summary(self) -> Dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "status": self.status,
            "error": self.error,
            "epochs": self.epochs,
            "final_loss": self.losses[-1] if self.losses else None,
            "best_epoch": self.best_epoch,
            "wall_clock": self.wall_clock,
            "seed": self.seed,
            "param_count": count_params(self.params) if self.params is not None else None,
            "param_digest": params_digest(self.params) if self.params is not None else None,
            "val_history": [[int(epoch), float(score)] for epoch, score in self.val_history],
            "config": self.config,
        }

    def to_yaml(self, path: Union[str, os.PathLike]):
        with open(path, "w") as fh:
            yaml.safe_dump(self.summary(), fh, sort_keys=False)

    def to_csv(self, path: Union[str, os.PathLike]):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch", "loss") + TERM_NAMES)
            for epoch, (loss, terms) in enumerate(zip(self.losses, self.terms)):
                writer.writerow([epoch, repr(loss)] + [repr(terms[name]) for name in TERM_NAMES])

    def save(self, path: Union[str, os.PathLike]):
        """Write report.yaml, losses.csv, the checkpoint and contexts.npy into directory `path`"""
        os.makedirs(path, exist_ok=True)
        self.to_yaml(os.path.join(path, "report.yaml"))
        self.to_csv(os.path.join(path, "losses.csv"))
        if self.params is not None:
            save_params(self.params, os.path.join(path, "checkpoint"), seed=self.seed)
        if self.contexts is not None:
            np.save(os.path.join(path, "contexts.npy"), np.asarray(self.contexts, dtype=np.float64))


def load_run(path: Union[str, os.PathLike]) -> Tuple[ThreeNetParams, np.ndarray, TrainConfig]:
    """Weights, contexts and configuration of a run saved with `TrainReport.save`"""
    with open(os.path.join(path, "report.yaml")) as fh:
        summary = yaml.safe_load(fh)
    params = load_params(os.path.join(path, "checkpoint"))
    contexts_path = os.path.join(path, "contexts.npy")
    contexts = np.load(contexts_path) if os.path.exists(contexts_path) else np.zeros((0, 0))
    return params, contexts, TrainConfig.from_dict(summary["config"])


### Prediction ###
def make_predictor(t: np.ndarray, solver: IntegratorSpec):
    """Jitted `(params, contexts, X) -> (predictions, status)` integrating each `X[e, i, 0]` with `xi_e`

    Pass `contexts=None` for context-free parameters.
    """
    t = np.asarray(t, dtype=np.float64)

    def contextual(x, args):
        params, xi = args
        return vf_eval(params, x, xi)

    @jax.jit
    def predict(params, contexts, X):
        def per_env(x_env, xi):
            def per_traj(x_true):
                if xi is None:
                    ys, stats = solve(plain_field, x_true[0], t, solver, params)
                else:
                    ys, stats = solve(contextual, x_true[0], t, solver, (params, xi))
                return ys, stats.status

            return jax.vmap(per_traj)(x_env)

        if contexts is None:
            return jax.vmap(lambda x_env: per_env(x_env, None))(X)
        return jax.vmap(per_env)(X, contexts)

    return predict


### Trainers ###
class Trainer(ABC):
    """Alternating minimization interface"""

    algorithm = ""
    logger = property(lambda self: logging.getLogger(self.__class__.__name__))

    def __init__(self, config: TrainConfig):
        self.config = config

    @abstractmethod
    def total_steps(self) -> int:
        ...

    @abstractmethod
    def epoch(self, params, contexts, X, k_theta, k_ctx) -> Tuple[ThreeNetParams, Tensor, float, Dict[str, float]]:
        """Run one epoch; returns the new iterate, the entering loss and its terms"""
        ...

    def setup(self, t: np.ndarray):
        cfg = self.config
        objective = make_objective(t, cfg.solver, cfg.taylor_order, cfg.lambda1, cfg.lambda2)
        steps = self.total_steps()
        self.theta_opt = adam(cfg.lr_theta, steps, cfg.lr_drop_factor)
        self.ctx_opt = adam(cfg.lr_ctx, steps, cfg.lr_drop_factor)
        beta = cfg.beta if self.algorithm == "proximal" else 0.0
        theta_opt, ctx_opt = self.theta_opt, self.ctx_opt

        @jax.jit
        def theta_step(params, contexts, X, pools, state, anchor):
            def proximal(p):
                loss, terms = objective(p, contexts, X, pools)
                penalty = 0.5 * beta * squared_distance(p, anchor)
                return loss + penalty, (loss, terms, penalty)

            (_, aux), grads = jax.value_and_grad(proximal, has_aux=True)(params)
            params, state = adam_step(theta_opt, params, grads, state)
            return params, state, aux

        @jax.jit
        def ctx_step(params, contexts, X, pools, state, anchor):
            def proximal(c):
                loss, terms = objective(params, c, X, pools)
                penalty = 0.5 * beta * squared_distance(c, anchor)
                return loss + penalty, (loss, terms, penalty)

            (_, aux), grads = jax.value_and_grad(proximal, has_aux=True)(contexts)
            contexts, state = adam_step(ctx_opt, contexts, grads, state)
            return contexts, state, aux

        self.theta_step, self.ctx_step = theta_step, ctx_step
        self.pools = jax.jit(lambda contexts, key: pool_indices(cfg.pool, contexts, key))

    def _checked(self, aux) -> Tuple[float, Dict[str, float]]:
        loss, terms, penalty = aux
        raise_for_status(terms.status, terms.last_time, self.config.solver.method)
        value = float(loss)
        if not math.isfinite(value):
            raise NonFiniteError(f"{self.algorithm} training: loss became {value}")
        return value, {"data": float(terms.data), "context": float(terms.context), "weights": float(terms.weights), "proximal": float(penalty)}

    def fit(self, dataset: TrajectoryDataset, params: Optional[ThreeNetParams] = None, contexts: Optional[Any] = None) -> TrainReport:
        """Meta-train on the `train` split

        Numerical failures end the run early; the report then carries status
        "diverged", the failure, and the last finite iterate.
        """
        cfg = self.config
        train = dataset["train"]
        X = jnp.asarray(train.X)
        m, d = X.shape[0], X.shape[-1]
        cfg.pool.check(m)
        if params is None:
            params = init_three_net(d, cfg.context_size, cfg.widths, cfg.seed, cfg.activation)
        contexts = jnp.zeros((m, cfg.context_size)) if contexts is None else jnp.asarray(contexts, dtype=jnp.float64)
        if contexts.shape != (m, params.d_xi):
            raise ShapeError(f"contexts of shape {contexts.shape}, expected {(m, params.d_xi)}")

        self.setup(train.t)
        self.theta_state = self.theta_opt.init(params)
        self.ctx_state = self.ctx_opt.init(contexts)
        report = TrainReport(self.algorithm, cfg.to_dict(), cfg.seed)
        validate = make_predictor(dataset["test"].t, cfg.solver) if cfg.val_every else None
        best = BestCheckpoint()
        key = jax.random.PRNGKey(cfg.seed)
        self.logger.info("Training %d environments (%d weights, d_xi=%d)", m, count_params(params), params.d_xi)

        start = time.perf_counter()
        try:
            for epoch in range(cfg.epochs):
                key, k_theta, k_ctx = jax.random.split(key, 3)
                new_params, new_contexts, loss, terms = self.epoch(params, contexts, X, k_theta, k_ctx)
                report.record(loss, terms)
                params, contexts = new_params, new_contexts
                if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
                    self.logger.info("Epoch %d/%d loss %.6e", epoch + 1, cfg.epochs, loss)
                self.logger.debug("Epoch %d terms %s", epoch + 1, terms)

                if validate is not None and (epoch + 1) % cfg.val_every == 0:
                    predictions, _ = validate(params, contexts, jnp.asarray(dataset["test"].X))
                    score = float(jnp.mean(jnp.square(predictions - dataset["test"].X)))
                    report.val_history.append((epoch + 1, score))
                    best(score, epoch + 1, (params, contexts))
                    self.logger.debug("Validation MSE %.6e at epoch %d", score, epoch + 1)
        except NUMERICAL_ERRORS as exc:
            report.status, report.error, report.failure = "diverged", str(exc), exc
            self.logger.error("Training aborted after %d epochs: %s", report.epochs, exc)
        report.wall_clock = time.perf_counter() - start

        if cfg.restore_best and best.best is not None:
            params, contexts = best.best
            report.best_epoch = best.best_step
            self.logger.info("Restored checkpoint from epoch %d (validation MSE %.6e)", best.best_step, best.best_score)
        report.params, report.contexts = params, np.asarray(contexts)
        return report


class OrdinaryTrainer(Trainer):
    """One weight step then one context step per epoch"""

    algorithm = "ordinary"

    def total_steps(self) -> int:
        return self.config.epochs

    def epoch(self, params, contexts, X, k_theta, k_ctx):
        pools = self.pools(contexts, jax.random.fold_in(k_theta, 0))
        new_params, theta_state, aux = self.theta_step(params, contexts, X, pools, self.theta_state, params)
        loss, terms = self._checked(aux)

        pools = self.pools(contexts, jax.random.fold_in(k_ctx, 0))
        new_contexts, ctx_state, aux = self.ctx_step(new_params, contexts, X, pools, self.ctx_state, contexts)
        self._checked(aux)
        self.theta_state, self.ctx_state = theta_state, ctx_state
        return new_params, new_contexts, loss, terms


class ProximalTrainer(Trainer):
    """Inner Adam loops on the proximal subproblems

    G(theta) = L(theta, xi_prev) + beta/2 |theta - theta_prev|^2, then
    H(xi) = L(theta, xi) + beta/2 |xi - xi_prev|^2, anchors refreshed every outer step.
    Each inner loop stops at its cap or once the loss changes by less than `inner_tol`.
    """

    algorithm = "proximal"

    def total_steps(self) -> int:
        return self.config.epochs * max(self.config.inner_iters_theta, self.config.inner_iters_ctx)

    def _inner(self, step, variable, fixed, X, key, cap, state, anchor, order):
        gate = RelativeChange(self.config.inner_tol)
        entering, previous, warned = None, math.inf, False
        penalty = 0.0
        for i in range(cap):
            if order == "theta":
                pools = self.pools(fixed, jax.random.fold_in(key, i))
                updated, new_state, aux = step(variable, fixed, X, pools, state, anchor)
            else:
                pools = self.pools(variable, jax.random.fold_in(key, i))
                updated, new_state, aux = step(fixed, variable, X, pools, state, anchor)
            loss, terms = self._checked(aux)
            value = loss + terms["proximal"]
            if entering is None:
                entering = (loss, terms)
            if value > previous and not warned:
                self.logger.warning("%s inner loop is not monotone at iteration %d (%.6e > %.6e)", order, i, value, previous)
                warned = True
            previous, penalty = value, terms["proximal"]
            variable, state = updated, new_state
            if gate(value) is None:
                self.logger.debug("%s inner loop converged after %d iterations", order, i + 1)
                break
        return variable, state, entering, penalty

    def epoch(self, params, contexts, X, k_theta, k_ctx):
        cfg = self.config
        params, theta_state, (loss, terms), _ = self._inner(self.theta_step, params, contexts, X, k_theta, cfg.inner_iters_theta, self.theta_state, params, "theta")
        contexts_new, ctx_state, _, penalty = self._inner(self.ctx_step, contexts, params, X, k_ctx, cfg.inner_iters_ctx, self.ctx_state, contexts, "contexts")
        self.theta_state, self.ctx_state = theta_state, ctx_state
        return params, contexts_new, loss, {**terms, "proximal": penalty}


def train_ordinary(dataset: TrajectoryDataset, config: TrainConfig, **kwargs) -> TrainReport:
    return OrdinaryTrainer(config).fit(dataset, **kwargs)


def train_proximal(dataset: TrajectoryDataset, config: TrainConfig, **kwargs) -> TrainReport:
    return ProximalTrainer(config).fit(dataset, **kwargs)


def train(dataset: TrajectoryDataset, config: TrainConfig, **kwargs) -> TrainReport:
    """Dispatch on `config.algorithm`"""
    trainer = ProximalTrainer if config.algorithm == "proximal" else OrdinaryTrainer
    return trainer(config).fit(dataset, **kwargs)


### Baselines ###
class BaselineMode(Enum):
    OFA = "OFA"
    OPE = "OPE"

    @classmethod
    def get_type(cls, name: Union[str, "BaselineMode"]) -> "BaselineMode":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            raise ConfigError(f"Unknown baseline mode '{name}'") from None


def matched_widths(d: int, config: TrainConfig) -> NetWidths:
    """Context-free widths whose main network is widened until the weight count reaches the contextual field's"""
    target = count_weights(d, config.context_size, config.widths)
    base = config.widths
    candidate = NetWidths(base.state, base.state, base.main, equal_halves=False)
    factor = 1.0
    while count_weights(d, 0, candidate) < target and factor < 16.0:
        factor += 0.05
        candidate = NetWidths(base.state, base.state, tuple(max(1, round(width * factor)) for width in base.main), equal_halves=False)
    return candidate


@dataclass
class BaselineReport(TrainReport):
    """Baseline outcome; OPE keeps one parameter set per environment in `env_params`"""

    mode: str = "OFA"
    env_params: List[ThreeNetParams] = field(default_factory=list)
    env_mse: List[float] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        summary = super().summary()
        summary.update(mode=self.mode, env_mse=[float(v) for v in self.env_mse])
        return summary

    def save(self, path: Union[str, os.PathLike]):
        super().save(path)
        for e, params in enumerate(self.env_params):
            save_params(params, os.path.join(path, f"checkpoint_env{e}"), seed=self.seed + e)


class BaselineTrainer:
    """Context-free fields: one for all environments (OFA) or one per environment (OPE)

    Both use widths from `matched_widths`. Environment `e` of OPE is initialized
    with seed `config.seed + e`, so with a single environment OPE and OFA coincide.
    """

    logger = property(lambda self: logging.getLogger(self.__class__.__name__))

    def __init__(self, config: TrainConfig, mode: Union[str, BaselineMode]):
        self.config = config
        self.mode = BaselineMode.get_type(mode)

    def setup(self, t: np.ndarray, total_steps: int):
        cfg = self.config
        self.optimizer = optimizer = adam(cfg.lr_theta, total_steps, cfg.lr_drop_factor)
        self.predict = predict = make_predictor(t, cfg.solver)

        @jax.jit
        def step(params, state, X):
            def loss_fn(p):
                predictions, status = predict(p, None, X)
                return jnp.mean(jnp.square(predictions - X)) + cfg.lambda2 / count_params(p) * squared_norm(p), status

            (loss, status), grads = jax.value_and_grad(loss_fn, has_aux=True)(params)
            params, state = adam_step(optimizer, params, grads, state)
            return params, state, loss, status

        self.step = step

    def fit_field(self, params: ThreeNetParams, X: Tensor, label: str) -> Tuple[ThreeNetParams, List[float]]:
        """Train one context-free field on `X[envs, trajs, N, d]`"""
        cfg = self.config
        state = self.optimizer.init(params)
        losses = []
        for epoch in range(cfg.epochs):
            new_params, state, loss, status = self.step(params, state, X)
            raise_for_status(status, None, cfg.solver.method)
            if not math.isfinite(float(loss)):
                raise NonFiniteError(f"{label}: loss became {float(loss)}")
            losses.append(float(loss))
            params = new_params
            if epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1:
                self.logger.info("%s epoch %d/%d loss %.6e", label, epoch + 1, cfg.epochs, float(loss))
        return params, losses

    def env_mse(self, params: ThreeNetParams, X: Tensor) -> List[float]:
        predictions, _ = self.predict(params, None, X)
        return [float(v) for v in jnp.mean(jnp.square(predictions - X), axis=(1, 2, 3))]

    def fit(self, dataset: TrajectoryDataset) -> BaselineReport:
        cfg = self.config
        train = dataset["train"]
        X = jnp.asarray(train.X)
        m, d = X.shape[0], X.shape[-1]
        widths = matched_widths(d, cfg)
        self.setup(train.t, cfg.epochs)
        report = BaselineReport(self.mode.value, cfg.to_dict(), cfg.seed, mode=self.mode.value)
        start = time.perf_counter()
        try:
            if self.mode == BaselineMode.OFA:
                params, losses = self.fit_field(init_three_net(d, 0, widths, cfg.seed, cfg.activation), X, "OFA")
                report.params = params
                for loss in losses:
                    report.record(loss, {"data": loss})
                report.env_mse = self.env_mse(params, X)
            else:
                curves = []
                for e in range(m):
                    params, losses = self.fit_field(init_three_net(d, 0, widths, cfg.seed + e, cfg.activation), X[e : e + 1], f"OPE env {e}")
                    report.env_params.append(params)
                    report.env_mse += self.env_mse(params, X[e : e + 1])
                    curves.append(losses)
                for epoch_losses in zip(*curves):
                    loss = float(np.mean(epoch_losses))
                    report.record(loss, {"data": loss})
                report.params = report.env_params[0] if report.env_params else None
        except NUMERICAL_ERRORS as exc:
            report.status, report.error, report.failure = "diverged", str(exc), exc
            self.logger.error("%s baseline aborted: %s", self.mode.value, exc)
        report.wall_clock = time.perf_counter() - start
        return report


def train_baseline(dataset: TrajectoryDataset, mode: Union[str, BaselineMode], config: TrainConfig) -> BaselineReport:
    return BaselineTrainer(config, mode).fit(dataset)
