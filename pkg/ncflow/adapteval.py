"""
Adaptation, evaluation, uncertainty and identification

With the weights frozen, a new environment only needs a context. Sequential
adaptation fits one context at a time; bulk adaptation fits all of them jointly
as one separable objective. Metrics, the candidate-ensemble uncertainty summary
and the linear map from contexts to physical parameters are computed here too.
"""

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import *

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg
import yaml

from . import diffcore as dc
from .core import NUMERICAL_ERRORS, ConfigError, IdentificationError, NonFiniteError, ShapeError, Tensor, UncertaintyError
from .dataset import Split
from .filters import RelativeChange
from .metatrain import BaselineReport, BaselineTrainer, TrainConfig, adam, adam_step, make_predictor, matched_widths, squared_norm
from .models import ThreeNetParams, count_params, init_three_net, make_field, params_digest, vf_eval
from .odeint import IntegratorSpec, raise_for_status, solve

logger = logging.getLogger(__name__)

MAPE_FLOOR = 1e-3
"""Denominators with magnitude at or below this are left out of percentage errors"""
DEGENERATE_COVERAGE = 1e-12


### Adaptation ###
@dataclass
class AdaptReport:
    """Adapted contexts, one per adaptation environment

    Attributes:
        contexts (np.ndarray): `[b, d_xi]`
        losses (List[List[float]]): Loss curve per environment
        failures (Dict[int, str]): Environments whose adaptation diverged, with the reason
        mode (str): "sequential" or "bulk"
        params_digest (str): Digest of the frozen weights
    """

    contexts: np.ndarray
    losses: List[List[float]]
    mode: str
    params_digest: str
    wall_clock: float = 0.0
    failures: Dict[int, str] = field(default_factory=dict)

    def to_csv(self, path: Union[str, os.PathLike]):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["env", "iteration", "loss"])
            for env, curve in enumerate(self.losses):
                writer.writerows([env, iteration, repr(float(loss))] for iteration, loss in enumerate(curve))

    def save(self, path: Union[str, os.PathLike]):
        os.makedirs(path, exist_ok=True)
        np.save(os.path.join(path, "adapted_contexts.npy"), np.asarray(self.contexts, dtype=np.float64))
        self.to_csv(os.path.join(path, "adapt_losses.csv"))
        summary = {
            "mode": self.mode,
            "environments": len(self.losses),
            "final_losses": [curve[-1] if curve else None for curve in self.losses],
            "failures": {int(env): reason for env, reason in self.failures.items()},
            "params_digest": self.params_digest,
            "wall_clock": self.wall_clock,
        }
        with open(os.path.join(path, "adapt.yaml"), "w") as fh:
            yaml.safe_dump(summary, fh, sort_keys=False)


def _env_objective(params: ThreeNetParams, t: np.ndarray, solver: IntegratorSpec, lambda1: float, lambda2: float):
    """Adaptation loss of one environment; the expansion point is the context itself"""
    field_fn = make_field(0)
    t = np.asarray(t, dtype=np.float64)

    def objective(xi: Tensor, X_env: Tensor):
        def per_traj(x_true):
            ys, stats = solve(field_fn, x_true[0], t, solver, (params, xi, xi))
            return jnp.mean(jnp.square(ys - x_true)), stats.status, stats.last_time

        data, status, last_time = jax.vmap(per_traj)(X_env)
        loss = jnp.mean(data) + lambda1 / xi.shape[0] * jnp.sum(jnp.abs(xi)) + lambda2 / count_params(params) * squared_norm(params)
        return loss, (status, last_time)

    return objective


def adapt_sequential(params: ThreeNetParams, split: Split, config: TrainConfig, jobs: Optional[int] = None) -> AdaptReport:
    """Fit one context per adaptation environment, independently

    Each context starts at zero and takes up to `config.adapt_iters` Adam steps,
    stopping early once the loss changes by less than `config.adapt_tol`. A failing
    environment keeps its last finite context and is listed in `failures`.
    """
    objective = _env_objective(params, split.t, config.solver, config.lambda1, config.lambda2)
    optimizer = adam(config.adaptation_lr)

    @jax.jit
    def step(xi, state, X_env):
        (loss, aux), grads = jax.value_and_grad(objective, has_aux=True)(xi, X_env)
        xi, state = adam_step(optimizer, xi, grads, state)
        return xi, state, loss, aux

    X = jnp.asarray(split.X)
    digest = params_digest(params)

    def adapt_one(env: int) -> Tuple[np.ndarray, List[float], Optional[str]]:
        xi = jnp.zeros((params.d_xi,))
        state = optimizer.init(xi)
        gate = RelativeChange(config.adapt_tol) if config.adapt_tol > 0 else None
        curve: List[float] = []
        try:
            for _ in range(config.adapt_iters):
                new_xi, state, loss, (status, last_time) = step(xi, state, X[env])
                raise_for_status(status, last_time, config.solver.method)
                if not np.isfinite(float(loss)):
                    raise NonFiniteError(f"adaptation loss became {float(loss)}")
                curve.append(float(loss))
                xi = new_xi
                if gate is not None and gate(float(loss)) is None:
                    break
        except NUMERICAL_ERRORS as exc:
            logger.warning("Adaptation of environment %d failed: %s", env, exc)
            return np.asarray(xi), curve, str(exc)
        return np.asarray(xi), curve, None

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=jobs or 1) as pool:
        results = list(pool.map(adapt_one, range(X.shape[0])))
    report = AdaptReport(
        np.stack([xi for xi, _, _ in results]) if results else np.zeros((0, params.d_xi)),
        [curve for _, curve, _ in results],
        "sequential",
        digest,
        failures={env: reason for env, (_, _, reason) in enumerate(results) if reason is not None},
    )
    report.wall_clock = time.perf_counter() - start
    if params_digest(params) != digest:
        raise RuntimeError("frozen weights changed during adaptation")
    return report


def adapt_bulk(params: ThreeNetParams, split: Split, config: TrainConfig) -> AdaptReport:
    """Fit all adaptation contexts jointly, without pools or Taylor expansion

    The joint objective is the sum of the per-environment losses, so every context
    sees exactly the gradient it gets from `adapt_sequential`.
    """
    objective = _env_objective(params, split.t, config.solver, config.lambda1, config.lambda2)
    optimizer = adam(config.adaptation_lr)
    X = jnp.asarray(split.X)
    b = X.shape[0]

    def joint(contexts):
        losses, aux = jax.vmap(objective)(contexts, X)
        return jnp.sum(losses), (losses, aux)

    @jax.jit
    def step(contexts, state):
        (_, (losses, aux)), grads = jax.value_and_grad(joint, has_aux=True)(contexts)
        contexts, state = adam_step(optimizer, contexts, grads, state)
        return contexts, state, losses, aux

    digest = params_digest(params)
    contexts = jnp.zeros((b, params.d_xi))
    state = optimizer.init(contexts)
    gate = RelativeChange(config.adapt_tol) if config.adapt_tol > 0 else None
    curves: List[List[float]] = [[] for _ in range(b)]
    failures: Dict[int, str] = {}
    start = time.perf_counter()
    for _ in range(config.adapt_iters):
        new_contexts, state, losses, (status, last_time) = step(contexts, state)
        losses, status = np.asarray(losses), np.asarray(status)
        healthy = np.isfinite(losses) & np.all(status == 0, axis=1)
        for env in np.flatnonzero(~healthy):
            if int(env) not in failures:
                failures[int(env)] = f"adaptation diverged (status {status[env].max()}, loss {losses[env]})"
                logger.warning("Adaptation of environment %d failed: %s", env, failures[int(env)])
        active = np.array([env not in failures for env in range(b)])
        for env in np.flatnonzero(active):
            curves[env].append(float(losses[env]))
        contexts = jnp.where(jnp.asarray(active)[:, None], new_contexts, contexts)
        if not active.any():
            break
        if gate is not None and gate(float(losses[active].sum())) is None:
            break
    report = AdaptReport(np.asarray(contexts), curves, "bulk", digest, failures=failures)
    report.wall_clock = time.perf_counter() - start
    return report


def adapt_baseline(report: BaselineReport, split: Split, config: TrainConfig) -> BaselineReport:
    """Adapt a baseline: OFA has nothing to adapt; OPE fits a fresh field per environment"""
    if report.mode == "OFA":
        logger.info("OFA has no adaptation mechanism; reusing the trained field")
        return report
    adapt_config = dataclasses.replace(config, epochs=config.adapt_iters)
    trainer = BaselineTrainer(adapt_config, "OPE")
    trainer.setup(split.t, adapt_config.epochs)
    X = jnp.asarray(split.X)
    widths = matched_widths(X.shape[-1], config)
    adapted = BaselineReport("OPE", adapt_config.to_dict(), config.seed, mode="OPE")
    for env in range(X.shape[0]):
        fresh = init_three_net(X.shape[-1], 0, widths, config.seed + env, config.activation)
        try:
            params, _ = trainer.fit_field(fresh, X[env : env + 1], f"OPE adapt env {env}")
        except NUMERICAL_ERRORS as exc:
            adapted.status, adapted.error, adapted.failure = "diverged", str(exc), exc
            logger.warning("OPE adaptation of environment %d failed: %s", env, exc)
            params = fresh
        adapted.env_params.append(params)
    return adapted


### Metrics ###
def mse(true: Any, predicted: Any) -> float:
    true, predicted = np.asarray(true, dtype=np.float64), np.asarray(predicted, dtype=np.float64)
    return float(np.mean(np.square(true - predicted)))


def mape(true: Any, predicted: Any) -> Optional[float]:
    """Mean absolute percentage error over entries with |true| > 1e-3; None when none remain"""
    true, predicted = np.asarray(true, dtype=np.float64), np.asarray(predicted, dtype=np.float64)
    kept = np.abs(true) > MAPE_FLOOR
    if not kept.any():
        return None
    return float(100.0 * np.mean(np.abs((true[kept] - predicted[kept]) / true[kept])))


@dataclass
class Metrics:
    """Per-environment forecast errors of the main trajectory (k = 0, j = e)"""

    mse: List[float]
    mape: List[Optional[float]]

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse)) if self.mse else float("nan")

    @property
    def mean_mape(self) -> Optional[float]:
        defined = [value for value in self.mape if value is not None]
        return float(np.mean(defined)) if defined else None

    def to_csv(self, path: Union[str, os.PathLike]):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["env", "mse", "mape"])
            for env, (error, percent) in enumerate(zip(self.mse, self.mape)):
                writer.writerow([env, repr(float(error)), "" if percent is None else repr(float(percent))])


def forecast(params: ThreeNetParams, contexts: Optional[Any], split: Split, solver: IntegratorSpec) -> np.ndarray:
    """Main-trajectory forecasts `[envs, trajs, N, d]`; `contexts=None` for context-free weights"""
    if contexts is not None:
        contexts = jnp.asarray(contexts, dtype=jnp.float64)
        if contexts.shape[0] != split.X.shape[0]:
            raise ShapeError(f"{contexts.shape[0]} contexts for {split.X.shape[0]} environments")
    predictions, status = make_predictor(split.t, solver)(params, contexts, jnp.asarray(split.X))
    raise_for_status(status, None, solver.method)
    return np.asarray(predictions)


def metrics(params: Union[ThreeNetParams, Sequence[ThreeNetParams]], contexts: Optional[Any], split: Split, solver: IntegratorSpec) -> Metrics:
    """MSE and MAPE per environment

    `params` may be a list with one context-free parameter set per environment (OPE).
    """
    if isinstance(params, ThreeNetParams):
        predictions = forecast(params, contexts, split, solver)
    else:
        predictions = np.concatenate([forecast(env_params, None, Split(split.t, split.X[e : e + 1]), solver) for e, env_params in enumerate(params)])
    return Metrics(
        [mse(split.X[e], predictions[e]) for e in range(split.X.shape[0])],
        [mape(split.X[e], predictions[e]) for e in range(split.X.shape[0])],
    )


### Uncertainty ###
@dataclass
class UqSummary:
    """Candidate-ensemble statistics

    Attributes:
        mean (np.ndarray): Candidate mean `[envs, trajs, N, d]`
        std (np.ndarray): Candidate population standard deviation, same shape
        rel_mse (float): Relative MSE in percent
        mape (Optional[float]): MAPE of the mean in percent
        cl (float): Share of scalar points inside mean +- 3 std, in percent
        p (int): Number of expansion contexts
    """

    mean: np.ndarray
    std: np.ndarray
    rel_mse: float
    mape: Optional[float]
    cl: float
    p: int

    def to_csv(self, path: Union[str, os.PathLike]):
        d = self.mean.shape[-1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["env", "traj", "step"] + [f"mean{i}" for i in range(d)] + [f"std{i}" for i in range(d)])
            for env, traj, step in np.ndindex(*self.mean.shape[:3]):
                values = [repr(float(v)) for v in self.mean[env, traj, step]] + [repr(float(v)) for v in self.std[env, traj, step]]
                writer.writerow([env, traj, step] + values)

    def summary(self) -> Dict[str, Any]:
        return {"p": self.p, "rel_mse": self.rel_mse, "mape": self.mape, "cl": self.cl}


def expansion_set(train_contexts: Any, adapted_contexts: Optional[Any] = None, mode: str = "train") -> np.ndarray:
    """Expansion contexts: the training ones (`train`) or training plus adapted (`all`)"""
    train_contexts = np.asarray(train_contexts, dtype=np.float64)
    if mode == "train" or adapted_contexts is None:
        return train_contexts
    if mode != "all":
        raise ConfigError(f"Unknown expansion mode '{mode}'")
    return np.concatenate([train_contexts, np.asarray(adapted_contexts, dtype=np.float64)])


def ensemble_statistics(candidates: np.ndarray, true: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, Optional[float], float]:
    """Mean, std, Rel. MSE, MAPE and CL of candidates `[envs, trajs, p, N, d]` against `true[envs, trajs, N, d]`

    Raises:
        UncertaintyError: Fewer than two candidates
    """
    candidates, true = np.asarray(candidates, dtype=np.float64), np.asarray(true, dtype=np.float64)
    p = candidates.shape[2]
    if p < 2:
        raise UncertaintyError(f"Spread needs at least two expansion contexts, got {p}")
    mean = candidates.mean(axis=2)
    std = np.sqrt(np.mean(np.square(candidates - mean[:, :, None]), axis=2))

    d = true.shape[-1]
    norms = np.sum(np.square(true), axis=-1)
    kept = np.sqrt(norms) > MAPE_FLOOR
    errors = np.sum(np.square(true - mean), axis=-1)
    rel_mse = float(100.0 * np.sum(errors[kept] / norms[kept]) / (kept.sum() * d)) if kept.any() else float("nan")

    deviation = np.abs(true - mean)
    covered = np.where(std > 0, deviation <= 3.0 * std, deviation <= DEGENERATE_COVERAGE)
    cl = float(100.0 * np.mean(covered))
    return mean, std, rel_mse, mape(true, mean), cl


def uq_metrics(
    params: ThreeNetParams,
    expansion_contexts: Any,
    split: Split,
    target_contexts: Any,
    k: int,
    solver: IntegratorSpec,
) -> UqSummary:
    """Uncertainty from candidate trajectories expanded around every context in `expansion_contexts`

    Candidate `(e, j)` integrates the order-`k` expansion around expansion context
    `j`, evaluated at the target context of environment `e`.

    Raises:
        UncertaintyError: Fewer than two expansion contexts
        IntegrationError: A candidate failed; names (env, traj, expansion member)
    """
    expansion = jnp.asarray(expansion_contexts, dtype=jnp.float64)
    targets = jnp.asarray(target_contexts, dtype=jnp.float64)
    if expansion.shape[0] < 2:
        raise UncertaintyError(f"Spread needs at least two expansion contexts, got {expansion.shape[0]}")
    if targets.shape[0] != split.X.shape[0]:
        raise ShapeError(f"{targets.shape[0]} target contexts for {split.X.shape[0]} environments")
    field_fn = make_field(k)
    t = np.asarray(split.t, dtype=np.float64)

    @jax.jit
    def candidates(X):
        def per_env(x_env, xi_e):
            def per_traj(x_true):
                def per_member(xi_j):
                    ys, stats = solve(field_fn, x_true[0], t, solver, (params, xi_e, xi_j))
                    return ys, stats.status

                return jax.vmap(per_member)(expansion)

            return jax.vmap(per_traj)(x_env)

        return jax.vmap(per_env)(X, targets)

    paths, status = candidates(jnp.asarray(split.X))
    raise_for_status(status, None, solver.method)
    mean, std, rel_mse, mape_value, cl = ensemble_statistics(np.asarray(paths), split.X)
    return UqSummary(mean, std, rel_mse, mape_value, cl, int(expansion.shape[0]))


### Identification ###
@dataclass
class Identification:
    """Affine map `c = Q xi + q` from contexts to physical parameters

    Attributes:
        Q (np.ndarray): `[d_c, d_xi]`
        q (np.ndarray): `[d_c]`
        residuals (np.ndarray): Fit residuals `[m', d_c]`
        ridge (float): Jitter added to the normal equations (0 unless rank deficient)
        heldout_predictions (Optional[np.ndarray]): Predicted parameters of held-out contexts
        heldout_mse (Optional[float]): MSE of those predictions when their parameters are given
    """

    Q: np.ndarray
    q: np.ndarray
    residuals: np.ndarray
    ridge: float = 0.0
    heldout_predictions: Optional[np.ndarray] = None
    heldout_mse: Optional[float] = None

    def predict(self, contexts: Any) -> np.ndarray:
        return np.asarray(contexts, dtype=np.float64) @ self.Q.T + self.q

    def to_yaml(self, path: Union[str, os.PathLike]):
        values = {
            "Q": self.Q.tolist(),
            "q": self.q.tolist(),
            "ridge": self.ridge,
            "residual_mse": float(np.mean(np.square(self.residuals))),
            "heldout_mse": self.heldout_mse,
        }
        if self.heldout_predictions is not None:
            values["heldout_predictions"] = self.heldout_predictions.tolist()
        with open(path, "w") as fh:
            yaml.safe_dump(values, fh, sort_keys=False)


def identify_linear(contexts: Any, observed: Any, heldout_contexts: Optional[Any] = None, heldout_observed: Optional[Any] = None, ridge: float = 1e-10) -> Identification:
    """Least-squares affine fit of observed parameters on contexts

    Solves the normal equations of `[xi, 1] W = c`; `ridge` is added only when the
    design matrix is rank deficient.

    Raises:
        IdentificationError: Fewer than two observations
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    observed = np.asarray(observed, dtype=np.float64)
    observed = observed[:, None] if observed.ndim == 1 else observed
    m, d_xi = contexts.shape
    if m < 2:
        raise IdentificationError(f"Identification needs at least two environments, got {m}")
    if observed.shape[0] != m:
        raise ShapeError(f"{m} contexts but {observed.shape[0]} parameter rows")
    if d_xi < observed.shape[1]:
        logger.warning("Context size %d is below the %d physical parameters; the affine map may not exist", d_xi, observed.shape[1])

    design = np.hstack([contexts, np.ones((m, 1))])
    gram = design.T @ design
    jitter = 0.0
    if np.linalg.matrix_rank(design) < design.shape[1]:
        jitter = ridge
        logger.warning("Rank-deficient identification (%d observations, %d unknowns); adding ridge %g", m, design.shape[1], ridge)
    weights = scipy.linalg.solve(gram + jitter * np.eye(gram.shape[0]), design.T @ observed, assume_a="sym")
    result = Identification(weights[:d_xi].T, weights[d_xi], observed - design @ weights, jitter)

    if heldout_contexts is not None:
        result.heldout_predictions = result.predict(heldout_contexts)
        if heldout_observed is not None:
            heldout_observed = np.asarray(heldout_observed, dtype=np.float64).reshape(result.heldout_predictions.shape)
            result.heldout_mse = mse(heldout_observed, result.heldout_predictions)
    return result


def affine_gap(params: ThreeNetParams, contexts: Any, radius: float, states: Optional[Any] = None, samples: int = 64, seed: int = 0) -> float:
    """Largest second directional derivative of the field in its context

    Context points are random convex combinations of `contexts` shifted by up to
    `radius` per component; directions are random unit vectors. Zero means the
    field is affine in the context over the sampled region.
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    states = np.zeros((1, params.d)) if states is None else np.atleast_2d(np.asarray(states, dtype=np.float64))
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.ones(contexts.shape[0]), size=samples)
    points = weights @ contexts + rng.uniform(-radius, radius, size=(samples, contexts.shape[1]))
    directions = rng.standard_normal((samples, contexts.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    def curvature(x, xi, v):
        def slope(u):
            return dc.jvp(lambda w: vf_eval(params, x, w), u, v)[1]

        return jnp.linalg.norm(dc.jvp(slope, xi, v)[1])

    over_points = jax.vmap(curvature, in_axes=(None, 0, 0))
    values = jax.jit(jax.vmap(over_points, in_axes=(0, None, None)))(jnp.asarray(states), jnp.asarray(points), jnp.asarray(directions))
    return float(jnp.max(values))
