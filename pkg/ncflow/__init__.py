"""ncflow meta-learns families of parameter-varying ODEs with context-modulated neural vector fields

Example::

    from ncflow import TrainConfig, adapt_sequential, metrics, preset, generate_benchmark, train

    # Simulate the Lotka-Volterra benchmark at laptop scale
    dataset = generate_benchmark(preset("lv", "desk"), seed=0)

    # Meta-train weights and one context per training environment
    config = TrainConfig.from_yaml("configs/lv_desk.yaml")
    report = train(dataset, config)

    # Few-shot adaptation to the unseen environments, then evaluate
    adapted = adapt_sequential(report.params, dataset["ood_train"], config)
    errors = metrics(report.params, adapted.contexts, dataset["ood_test"], config.solver)
"""

import jax

jax.config.update("jax_enable_x64", True)

from .adapteval import adapt_bulk, adapt_sequential, identify_linear, metrics, uq_metrics
from .core import ErrorCode, NcfError
from .dataset import TrajectoryDataset
from .metatrain import TrainConfig, train, train_baseline, train_ordinary, train_proximal
from .models import init_three_net, taylor_eval
from .odeint import IntegratorSpec, integrate
from .systems import generate_benchmark, preset

__all__ = [
    "TrainConfig",
    "train",
    "train_ordinary",
    "train_proximal",
    "train_baseline",
    "adapt_sequential",
    "adapt_bulk",
    "metrics",
    "uq_metrics",
    "identify_linear",
    "init_three_net",
    "taylor_eval",
    "IntegratorSpec",
    "integrate",
    "TrajectoryDataset",
    "preset",
    "generate_benchmark",
    "NcfError",
    "ErrorCode",
]
__docformat__ = "google"
