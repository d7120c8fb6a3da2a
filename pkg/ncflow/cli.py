"""
Command-line entry point

    ncflow generate --system lv --preset desk --out data/lv
    ncflow train --dataset data/lv --config configs/lv_desk.yaml --out runs/lv
    ncflow adapt --dataset data/lv --run runs/lv --mode bulk --out runs/lv/adapt
    ncflow eval --dataset data/lv --run runs/lv --contexts runs/lv/adapt/adapted_contexts.npy --split ood_test --out runs/lv/eval_ood
    ncflow uq --dataset data/lv --run runs/lv --split test --out runs/lv/uq
    ncflow identify --dataset data/lv --run runs/lv --adapted runs/lv/adapt/adapted_contexts.npy --out runs/lv/identify
    ncflow export-plots --run runs/lv --eval runs/lv/eval_ood --dataset data/lv --out runs/lv/plots

Exit status is 0 on success, 2 for usage, validation and format errors, and 3 for
numerical aborts (a partial report is still written).
"""

import argparse
import csv
import dataclasses
import logging
import os
import shutil
import subprocess
import sys
from dataclasses import dataclass
from typing import *

import numpy as np
import yaml

from . import adapteval, dataset, metatrain, systems
from .core import NUMERICAL_ERRORS, ConfigError, DatasetError, NcfError
from .models import load_params
from .odeint import IntegratorSpec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
MANIFEST_NAME = "run_manifest.yaml"


@dataclass
class RunManifest:
    """What produced an output directory"""

    subcommand: str
    config: Optional[str]
    dataset: Optional[str]
    out: str
    seed: Optional[int]
    git_describe: str

    def save(self):
        os.makedirs(self.out, exist_ok=True)
        with open(os.path.join(self.out, MANIFEST_NAME), "w") as fh:
            yaml.safe_dump(dataclasses.asdict(self), fh, sort_keys=False)


def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            check=False,
        )
    except OSError:
        return "unknown"
    return result.stdout.strip() or "unknown"


def resolve_seed(flag: Optional[int], default: int = 0) -> int:
    """`--seed` wins over NCF_SEED, which wins over `default`"""
    if flag is not None:
        return flag
    value = os.environ.get(metatrain.SEED_VARIABLE)
    if value:
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{metatrain.SEED_VARIABLE} must be an integer") from None
    return default


def _load_dataset(path: str) -> dataset.TrajectoryDataset:
    ds = dataset.load(path)
    violations = dataset.validate(ds)
    if violations:
        listed = ", ".join(f"{v.split}{list(v.index)}:{v.rule}" for v in violations[:10])
        raise DatasetError(f"{path}: {len(violations)} invariant violations ({listed})")
    return ds


def _load_contexts(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ConfigError(f"Contexts file '{path}' does not exist")
    return np.atleast_2d(np.load(path))


def _read_summary(run: str) -> Dict[str, Any]:
    path = os.path.join(run, "report.yaml")
    if not os.path.exists(path):
        raise ConfigError(f"'{run}' is not a run directory (no report.yaml)")
    with open(path) as fh:
        return yaml.safe_load(fh)


def _load_baseline(run: str, summary: Mapping[str, Any]) -> Tuple[Any, metatrain.TrainConfig]:
    """OFA weights, or the per-environment OPE weights in environment order"""
    config = metatrain.TrainConfig.from_dict(summary["config"])
    if summary["mode"] == "OFA":
        return load_params(os.path.join(run, "checkpoint")), config
    env_dirs = sorted(
        (name for name in os.listdir(run) if name.startswith("checkpoint_env")),
        key=lambda name: int(name[len("checkpoint_env") :]),
    )
    return [load_params(os.path.join(run, name)) for name in env_dirs], config


def _write_yaml(path: str, values: Mapping[str, Any]):
    with open(path, "w") as fh:
        yaml.safe_dump(dict(values), fh, sort_keys=False)


### Subcommands ###
def cmd_generate(args: argparse.Namespace) -> int:
    go_ranges = systems.load_go_ranges(args.go_config) if args.go_config else None
    benchmark = systems.preset(args.system, args.preset, go_ranges)
    if args.grid is not None:
        if benchmark.spec.name != systems.SystemName.LV.value:
            raise ConfigError("--grid is only defined for the lv system")
        grid = systems.EnvironmentGrid(benchmark.grid.train, systems.lv_adaptation_grid(args.grid), allow_overlap=True)
        benchmark = dataclasses.replace(benchmark, grid=grid)
    seed = resolve_seed(args.seed)
    ds = systems.generate_benchmark(benchmark, seed, systems.default_solver(args.system), args.jobs)
    if args.noise:
        rng = np.random.default_rng([seed, len(dataset.SPLITS)])
        for name in dataset.SPLITS:
            ds.splits[name] = dataset.Split(ds[name].t, systems.corrupt(ds[name].X, args.noise, rng))
        ds.metadata["noise"] = float(args.noise)
    dataset.save(ds, args.out)
    RunManifest("generate", None, None, args.out, seed, git_describe()).save()

    print(f"{benchmark.spec.name} ({args.preset}) written to {args.out}")
    for name in dataset.SPLITS:
        print(f"  {name:<9} X{list(ds[name].X.shape)}  {len(ds.environments(name))} environments")
    for env in ds.environments("train"):
        print(f"  train env {env}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    if args.config:
        config = metatrain.TrainConfig.from_yaml(args.config)
    else:
        solver = ds.metadata.get("solver")
        config = metatrain.TrainConfig(solver=IntegratorSpec.from_dict(solver)) if solver else metatrain.TrainConfig()
    overrides = {"seed": resolve_seed(args.seed, config.seed)}
    if args.algorithm:
        overrides["algorithm"] = args.algorithm
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    config = dataclasses.replace(config, **overrides)

    if args.baseline:
        report = metatrain.train_baseline(ds, args.baseline, config)
    else:
        report = metatrain.train(ds, config)
    report.save(args.out)
    RunManifest("train", args.config, args.dataset, args.out, config.seed, git_describe()).save()
    if report.status != "completed":
        logger.error("Training aborted after %d epochs: %s", report.epochs, report.error)
        return EXIT_NUMERICAL
    print(f"{report.algorithm}: {report.epochs} epochs, final loss {report.losses[-1] if report.losses else float('nan'):.6e}")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    split = ds[args.split]
    if args.envs is not None:
        split = dataset.Split(split.t, split.X[: args.envs])
    summary = _read_summary(args.run)
    manifest = RunManifest("adapt", None, args.dataset, args.out, None, git_describe())

    if "mode" in summary:
        config = metatrain.TrainConfig.from_dict(summary["config"])
        config = dataclasses.replace(config, seed=resolve_seed(args.seed, config.seed))
        stub = metatrain.BaselineReport(summary["mode"], summary["config"], config.seed, mode=summary["mode"])
        report = adapteval.adapt_baseline(stub, split, config)
        if report is not stub:
            report.save(args.out)
        manifest.seed = config.seed
        manifest.save()
        return EXIT_NUMERICAL if report.status != "completed" else EXIT_OK

    params, _, config = metatrain.load_run(args.run)
    config = dataclasses.replace(config, seed=resolve_seed(args.seed, config.seed))
    if args.iters is not None:
        config = dataclasses.replace(config, adapt_iters=args.iters)
    if args.mode == "bulk":
        report = adapteval.adapt_bulk(params, split, config)
    else:
        report = adapteval.adapt_sequential(params, split, config, jobs=args.jobs)
    report.save(args.out)
    manifest.seed = config.seed
    manifest.save()
    if report.failures:
        logger.error("Adaptation failed for environments %s", sorted(report.failures))
        return EXIT_NUMERICAL
    print(f"Adapted {report.contexts.shape[0]} contexts ({report.mode}) in {report.wall_clock:.1f}s")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    split = ds[args.split]
    summary = _read_summary(args.run)
    if "mode" in summary:
        params, config = _load_baseline(args.run, summary)
        contexts = None
    else:
        if not args.contexts:
            raise ConfigError("eval needs --contexts for a contextual run")
        params, _, config = metatrain.load_run(args.run)
        contexts = _load_contexts(args.contexts)
    result = adapteval.metrics(params, contexts, split, config.solver)

    os.makedirs(args.out, exist_ok=True)
    result.to_csv(os.path.join(args.out, "metrics.csv"))
    _write_yaml(
        os.path.join(args.out, "metrics.yaml"),
        {"split": args.split, "mse": result.mse, "mape": result.mape, "mean_mse": result.mean_mse, "mean_mape": result.mean_mape},
    )
    RunManifest("eval", None, args.dataset, args.out, config.seed, git_describe()).save()
    print(f"{args.split}: MSE {result.mean_mse:.6e}, MAPE {result.mean_mape}")
    return EXIT_OK


def cmd_uq(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    split = ds[args.split]
    params, train_contexts, config = metatrain.load_run(args.run)
    adapted = _load_contexts(args.adapted) if args.adapted else None
    if args.expansion == "all" and adapted is None:
        raise ConfigError("--expansion all needs --adapted")
    if args.targets:
        targets = _load_contexts(args.targets)
    elif args.split in ("test", "train"):
        targets = train_contexts
    elif adapted is not None:
        targets = adapted
    else:
        raise ConfigError(f"{args.split} needs --targets or --adapted contexts")
    expansion = adapteval.expansion_set(train_contexts, adapted, args.expansion)
    k = config.taylor_order if args.order is None else args.order
    summary = adapteval.uq_metrics(params, expansion, split, targets, k, config.solver)

    os.makedirs(args.out, exist_ok=True)
    summary.to_csv(os.path.join(args.out, "uq.csv"))
    _write_yaml(os.path.join(args.out, "uq.yaml"), {"split": args.split, "expansion": args.expansion, "k": k, **summary.summary()})
    RunManifest("uq", None, args.dataset, args.out, config.seed, git_describe()).save()
    print(f"{args.split}: p={summary.p} Rel. MSE {summary.rel_mse:.4f}% MAPE {summary.mape} CL {summary.cl:.2f}%")
    return EXIT_OK


def _observed(ds: dataset.TrajectoryDataset, split: str, names: Optional[Sequence[str]]) -> Tuple[List[str], np.ndarray]:
    envs = ds.environments(split)
    if not envs:
        raise ConfigError(f"Dataset has no environment parameters for {split}")
    names = list(names) if names else list(envs[0])
    try:
        return names, np.array([[env[name] for name in names] for env in envs], dtype=np.float64)
    except KeyError as exc:
        raise ConfigError(f"Unknown parameter {exc}") from None


def cmd_identify(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.dataset)
    _, contexts, config = metatrain.load_run(args.run)
    names, observed = _observed(ds, "train", args.params)
    heldout, heldout_observed = None, None
    if args.adapted:
        heldout = _load_contexts(args.adapted)
        heldout_observed = _observed(ds, "ood_train", names)[1][: heldout.shape[0]]
    result = adapteval.identify_linear(contexts, observed, heldout, heldout_observed)

    os.makedirs(args.out, exist_ok=True)
    result.to_yaml(os.path.join(args.out, "identification.yaml"))
    RunManifest("identify", None, args.dataset, args.out, config.seed, git_describe()).save()
    print(f"Identified {names} from {contexts.shape[0]} contexts; held-out MSE {result.heldout_mse}")
    return EXIT_OK


def cmd_export_plots(args: argparse.Namespace) -> int:
    required = [os.path.join(args.run, "losses.csv"), os.path.join(args.run, "contexts.npy")]
    if args.eval:
        required.append(os.path.join(args.eval, "metrics.yaml"))
        if not args.dataset:
            raise ConfigError("--eval needs --dataset for the environment parameters")
    missing = [path for path in required if not os.path.exists(path)]
    if missing:
        for path in missing:
            logger.error("Missing series: %s", path)
        return EXIT_INVALID

    os.makedirs(args.out, exist_ok=True)
    shutil.copyfile(required[0], os.path.join(args.out, "loss_curve.csv"))

    contexts = np.atleast_2d(np.load(required[1]))
    with open(os.path.join(args.out, "contexts_scatter.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["env", "xi1", "xi2"])
        for env, xi in enumerate(contexts):
            writer.writerow([env, repr(float(xi[0])), repr(float(xi[1])) if xi.size > 1 else ""])

    if args.eval:
        with open(required[2]) as fh:
            evaluation = yaml.safe_load(fh)
        envs = _load_dataset(args.dataset).environments(evaluation["split"])
        names = list(envs[0]) if envs else []
        with open(os.path.join(args.out, "heatmap.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["env"] + names + ["mse"])
            for env, error in enumerate(evaluation["mse"]):
                writer.writerow([env] + [repr(float(envs[env][name])) for name in names] + [repr(float(error))])
    RunManifest("export-plots", None, args.dataset, args.out, None, git_describe()).save()
    return EXIT_OK


### Parser ###
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Overrides NCF_SEED and the configured seed")
    common.add_argument("--jobs", type=int, default=None, help="Worker threads for trajectories and environments")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(prog="ncflow", description="Meta-learning of parameter-varying ODEs with context flows")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="Simulate a benchmark dataset")
    generate.add_argument("--system", type=str.lower, required=True, choices=[name.value.lower() for name in systems.SystemName])
    generate.add_argument("--preset", choices=["desk", "paper"], default="desk")
    generate.add_argument("--grid", type=int, default=None, help="LV only: n x n (beta, delta) adaptation grid")
    generate.add_argument("--go-config", default=None, help="YAML with glycolytic initial-condition ranges")
    generate.add_argument("--noise", type=float, default=0.0, help="Observation noise level eta")
    generate.add_argument("--out", required=True)
    generate.set_defaults(handler=cmd_generate)

    train = commands.add_parser("train", parents=[common], help="Meta-train a contextual field or a baseline")
    train.add_argument("--dataset", required=True)
    train.add_argument("--config", default=None)
    train.add_argument("--algorithm", choices=["ordinary", "proximal"], default=None)
    train.add_argument("--baseline", type=str.upper, choices=["OFA", "OPE"], default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--out", required=True)
    train.set_defaults(handler=cmd_train)

    adapt = commands.add_parser("adapt", parents=[common], help="Fit contexts for new environments")
    adapt.add_argument("--dataset", required=True)
    adapt.add_argument("--run", required=True, help="Directory written by train")
    adapt.add_argument("--split", default="ood_train")
    adapt.add_argument("--mode", choices=["sequential", "bulk"], default="sequential")
    adapt.add_argument("--envs", type=int, default=None, help="Adapt only the first n environments")
    adapt.add_argument("--iters", type=int, default=None)
    adapt.add_argument("--out", required=True)
    adapt.set_defaults(handler=cmd_adapt)

    evaluate = commands.add_parser("eval", parents=[common], help="Forecast errors per environment")
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--run", required=True)
    evaluate.add_argument("--contexts", default=None)
    evaluate.add_argument("--split", choices=list(dataset.SPLITS), default="test")
    evaluate.add_argument("--out", required=True)
    evaluate.set_defaults(handler=cmd_eval)

    uq = commands.add_parser("uq", parents=[common], help="Candidate-ensemble uncertainty")
    uq.add_argument("--dataset", required=True)
    uq.add_argument("--run", required=True)
    uq.add_argument("--split", choices=list(dataset.SPLITS), default="test")
    uq.add_argument("--expansion", choices=["train", "all"], default="train")
    uq.add_argument("--adapted", default=None, help="Adapted contexts (.npy)")
    uq.add_argument("--targets", default=None, help="Contexts of the evaluated environments (.npy)")
    uq.add_argument("--order", type=int, choices=[0, 1, 2], default=None)
    uq.add_argument("--out", required=True)
    uq.set_defaults(handler=cmd_uq)

    identify = commands.add_parser("identify", parents=[common], help="Affine map from contexts to physical parameters")
    identify.add_argument("--dataset", required=True)
    identify.add_argument("--run", required=True)
    identify.add_argument("--adapted", default=None, help="Held-out adapted contexts (.npy)")
    identify.add_argument("--params", nargs="+", default=None)
    identify.add_argument("--out", required=True)
    identify.set_defaults(handler=cmd_identify)

    plots = commands.add_parser("export-plots", parents=[common], help="CSV series for loss curves, context scatter and heatmaps")
    plots.add_argument("--run", required=True)
    plots.add_argument("--eval", default=None, help="Directory written by eval, for the error heatmap")
    plots.add_argument("--dataset", default=None)
    plots.add_argument("--out", required=True)
    plots.set_defaults(handler=cmd_export_plots)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except NUMERICAL_ERRORS as exc:
        logger.error("Numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (NcfError, FileNotFoundError, KeyError, yaml.YAMLError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
