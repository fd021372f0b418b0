"""
Per-method experiment presets: BO search spaces, initial candidates and tuned values.

Search axes are log10 coordinates. Each method tunes two hyperparameters:
potobim (temperature, sigma_prior), mcd (weight_decay, dropout_p) and
sgld (weight_decay, lr_decay).
"""

import itertools
from typing import Dict, List, Tuple

import numpy as np

from tempest.errors import InvalidArgumentError
from tempest.schema import (
    DESK_ITERATIONS,
    Method,
    RunConfig,
    SearchAxis,
    SearchSpace,
    TaskKind,
)

SEARCH_BOUNDS: Dict[Method, List[Tuple[str, float, float]]] = {
    Method.POTOBIM: [("temperature", -12.0, -2.0), ("sigma_prior", -10.0, 0.0)],
    Method.MCD: [("weight_decay", -10.0, 0.0), ("dropout_p", -4.0, -0.1)],
    Method.SGLD: [("weight_decay", -12.0, -2.0), ("lr_decay", -4e-4, 0.0)],
}

INITIAL_VALUES: Dict[Method, Dict[str, Tuple[float, float]]] = {
    Method.POTOBIM: {"temperature": (1e-4, 1e-7), "sigma_prior": (0.1, 1e-6)},
    Method.MCD: {"weight_decay": (0.1, 1e-6), "dropout_p": (0.02, 0.2)},
    Method.SGLD: {"weight_decay": (1e-4, 1e-8), "lr_decay": (0.9995, 0.999999)},
}

TUNED_VALUES: Dict[Method, Dict[TaskKind, Dict[str, float]]] = {
    Method.MCD: {
        TaskKind.DENOISE: {"weight_decay": 1.5e-8, "dropout_p": 0.251},
        TaskKind.SR: {"weight_decay": 1.3e-7, "dropout_p": 0.028},
        TaskKind.INPAINT: {"weight_decay": 6.4e-7, "dropout_p": 0.0025},
        TaskKind.CT: {"weight_decay": 1.5e-6, "dropout_p": 0.014},
    },
    Method.SGLD: {
        TaskKind.DENOISE: {"weight_decay": 8.8e-9, "lr_decay": 0.99993},
        TaskKind.SR: {"weight_decay": 1.6e-4, "lr_decay": 0.99995},
        TaskKind.INPAINT: {"weight_decay": 9.1e-5, "lr_decay": 1.0},
        TaskKind.CT: {"weight_decay": 8.7e-4, "lr_decay": 0.99989},
    },
    Method.POTOBIM: {
        TaskKind.DENOISE: {"temperature": 5.6e-7, "sigma_prior": 1.5e-5},
        TaskKind.SR: {"temperature": 4.4e-7, "sigma_prior": 4.9e-8},
        TaskKind.INPAINT: {"temperature": 7.1e-9, "sigma_prior": 1.3e-2},
        TaskKind.CT: {"temperature": 2.2e-10, "sigma_prior": 1.7e-7},
    },
    Method.DIP: {kind: {"weight_decay": 0.0} for kind in TaskKind},
}


def _require_tunable(method: Method) -> None:
    if method not in SEARCH_BOUNDS:
        raise InvalidArgumentError(f"method {method.value} has no hyperparameters to tune")


def search_space(method: Method) -> SearchSpace:
    _require_tunable(method)
    return SearchSpace(axes=[SearchAxis(name=n, lower=lo, upper=hi) for n, lo, hi in SEARCH_BOUNDS[method]])


def initial_candidates(method: Method) -> List[List[float]]:
    """The four published starting points, as log10 coordinates ordered like the search axes."""
    _require_tunable(method)
    names = [name for name, _, _ in SEARCH_BOUNDS[method]]
    values = [INITIAL_VALUES[method][name] for name in names]
    return [[float(np.log10(v)) for v in combo] for combo in itertools.product(*values)]


def tuned_values(method: Method, task: TaskKind) -> Dict[str, float]:
    return dict(TUNED_VALUES[method][task])


def desk_iterations(task: TaskKind) -> int:
    return DESK_ITERATIONS[task]


def apply_point(cfg: RunConfig, method: Method, point) -> RunConfig:
    """
    Return a copy of ``cfg`` with a BO point (log10 coordinates) written into its fields.

    Args:
        cfg: Base configuration of the method
        method: Method whose axes the point follows
        point: Two log10 values

    Returns:
        Validated RunConfig
    """
    _require_tunable(method)
    if cfg.method != method:
        raise InvalidArgumentError(f"point for {method.value} applied to a {cfg.method.value} configuration")
    values = {name: float(10.0 ** v) for (name, _, _), v in zip(SEARCH_BOUNDS[method], point)}
    data = cfg.model_dump()
    if method == Method.POTOBIM:
        data["temper"].update(values)
    else:
        data.update(values)
    return RunConfig(**data)
