"""Experiment specs: parsing, objective construction and run dispatch.

An experiment spec is a TOML file::

    output_dir = "results"
    seeds = [0, 1, 2]
    record_stride = 1

    [defaults]              # merged into every run
    objective = "sigmoid"
    d = 50
    K = 1000

    [run.hosgd_tau8]
    algorithm = "hosgd"
    tau = 8
    step = 0.1
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .core import ALGORITHMS, OBJECTIVES, AssumptionConstants, RunConfig, mu_default
from .objectives import (Objective, fit_linear_classifier, make_attack_dataset,
                         make_attack_loss, make_quadratic, make_sigmoid_regression,
                         make_two_layer_tanh)
from .optimizer import Trajectory, run

MAX_RECORDS = 10_000


class SpecError(ValueError):
    """Invalid experiment or bound configuration (CLI exit code 2)."""


OBJECTIVE_PARAMS = {
    "quadratic": {"d": 10, "condition_spread": 1.0},
    "sigmoid": {"d": 50, "K": 1000, "noise_level": 0.0, "data_seed": 0},
    "tanh_net": {"d_in": 8, "hidden": 16, "K": 500, "data_seed": 0},
    "attack": {"d_img": 16, "K": 100, "num_classes": 3, "c": 1.0, "data_seed": 0},
}

RUN_KEYS = {"algorithm", "objective", "tau", "mu", "step", "N", "m", "B", "x0",
            "x0_scale", "x0_seed", "L", "sigma", "f_star", "record_stride"}


@functools.lru_cache(maxsize=16)
def _build_objective_cached(objective_id: str, frozen: Tuple) -> Objective:
    p = dict(frozen)
    if objective_id == "quadratic":
        return make_quadratic(int(p["d"]), float(p["condition_spread"]))
    if objective_id == "sigmoid":
        return make_sigmoid_regression(int(p["d"]), int(p["K"]), float(p["noise_level"]),
                                       int(p["data_seed"]))
    if objective_id == "tanh_net":
        return make_two_layer_tanh(int(p["d_in"]), int(p["hidden"]), int(p["K"]),
                                   int(p["data_seed"]))
    if objective_id == "attack":
        images, labels = make_attack_dataset(int(p["K"]), int(p["d_img"]),
                                             int(p["num_classes"]), int(p["data_seed"]))
        model = fit_linear_classifier(images, labels, int(p["num_classes"]))
        return make_attack_loss(model, images, labels, float(p["c"]), seed=int(p["data_seed"]))
    raise SpecError(f"objective: unknown objective_id {objective_id!r}")


def build_objective(objective_id: str, params: Dict) -> Objective:
    if objective_id not in OBJECTIVES:
        raise SpecError(f"objective: unknown objective_id {objective_id!r}")
    full = dict(OBJECTIVE_PARAMS[objective_id])
    full.update({k: v for k, v in params.items() if k in full})
    return _build_objective_cached(objective_id, tuple(sorted(full.items())))


def resolve_x0(spec, d: int, scale: float = 1.0, seed: int = 0) -> np.ndarray:
    if isinstance(spec, (list, tuple)):
        x0 = np.asarray(spec, dtype=np.float64)
        if x0.shape != (d,):
            raise SpecError(f"x0: expected {d} entries, got {x0.shape[0]}")
        return x0
    if spec == "zeros":
        return np.zeros(d)
    if spec == "ones":
        return scale * np.ones(d)
    if spec == "normal":
        return scale * np.random.default_rng(seed).standard_normal(d)
    raise SpecError(f"x0: expected 'zeros', 'ones', 'normal' or a list, got {spec!r}")


@dataclass
class RunSpec:
    label: str
    configs: List[RunConfig]
    constants: AssumptionConstants

    @property
    def objective_id(self) -> str:
        return self.configs[0].objective_id


@dataclass
class ExperimentSpec:
    runs: List[RunSpec]
    output_dir: str = "results"
    record_stride: int = 1
    seeds: List[int] = field(default_factory=lambda: [0])


def _objective_params(section: Dict, objective_id: str) -> Dict:
    allowed = set(OBJECTIVE_PARAMS[objective_id])
    return {k: v for k, v in section.items() if k in allowed}


def make_run_spec(label: str, section: Dict, seeds: List[int], record_stride: int) -> RunSpec:
    objective_id = section.get("objective", "quadratic")
    if objective_id not in OBJECTIVES:
        raise SpecError(f"run.{label}.objective: unknown objective_id {objective_id!r} "
                        f"(expected one of {', '.join(OBJECTIVES)})")
    all_params = set().union(*OBJECTIVE_PARAMS.values())
    for key in section:
        if key not in RUN_KEYS and key not in all_params:
            raise SpecError(f"run.{label}.{key}: unknown field")
    algorithm = section.get("algorithm", "hosgd")
    if algorithm not in ALGORITHMS:
        raise SpecError(f"run.{label}.algorithm: unknown algorithm {algorithm!r}")
    params = _objective_params(section, objective_id)
    obj = build_objective(objective_id, params)
    d = obj.dimension
    N = int(section.get("N", 1000))
    stride = int(section.get("record_stride", record_stride))
    if stride == 1 and N > MAX_RECORDS:
        stride = math.ceil(N / MAX_RECORDS)
        warnings.warn(f"run {label}: record_stride raised to {stride} for N={N}")
    x0 = resolve_x0(section.get("x0", "zeros"), d, float(section.get("x0_scale", 1.0)),
                    int(section.get("x0_seed", 0)))
    mu = section.get("mu", "theorem_default")
    mu = mu_default(d, N) if mu == "theorem_default" else float(mu)
    step = section.get("step", "theorem_default")
    if not isinstance(step, str):
        step = float(step)
    sigma = section.get("sigma")
    if sigma is None:
        sigma = math.sqrt(obj.gradient_variance(x0))
    try:
        constants = AssumptionConstants(L=float(section.get("L", obj.L_estimate)),
                                        sigma=float(sigma),
                                        f_star=float(section.get("f_star", obj.f_star_estimate)))
        configs = [RunConfig(d=d, m=int(section.get("m", 1)), B=int(section.get("B", 1)),
                             tau=int(section.get("tau", 1)), mu=mu, N=N, step_schedule=step,
                             objective_id=objective_id, master_seed=int(seed),
                             algorithm=algorithm, x0=x0, record_stride=stride, label=label,
                             objective_params=params)
                   for seed in seeds]
    except ValueError as exc:
        raise SpecError(f"run.{label}: {exc}") from exc
    if configs[0].B > obj.num_samples > 1:
        raise SpecError(f"run.{label}.B: batch size exceeds K={obj.num_samples}")
    return RunSpec(label, configs, constants)


def parse_experiment(text: str, seed_override: Optional[int] = None) -> ExperimentSpec:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SpecError(f"parse error: {exc}") from exc
    for key in data:
        if key not in {"output_dir", "record_stride", "seeds", "defaults", "run"}:
            raise SpecError(f"{key}: unknown field")
    seeds = [int(s) for s in data.get("seeds", [0])]
    if seed_override is not None:
        seeds = [seed_override]
    record_stride = int(data.get("record_stride", 1))
    defaults = data.get("defaults", {})
    runs_section = data.get("run", {})
    if not runs_section:
        raise SpecError("run: spec defines no [run.<label>] sections")
    runs = []
    for label, section in runs_section.items():
        if not isinstance(section, dict):
            raise SpecError(f"run.{label}: expected a table")
        merged = dict(defaults)
        merged.update(section)
        runs.append(make_run_spec(label, merged, seeds, record_stride))
    return ExperimentSpec(runs, str(data.get("output_dir", "results")), record_stride, seeds)


def execute(config: RunConfig, constants: AssumptionConstants) -> Trajectory:
    obj = build_objective(config.objective_id, config.objective_params)
    return run(config, obj, constants)


def manifest(run_spec: RunSpec) -> Dict:
    c = run_spec.constants
    return {
        "label": run_spec.label,
        "constants": {"L": c.L, "sigma": c.sigma, "f_star": c.f_star},
        "runs": [cfg.to_dict() for cfg in run_spec.configs],
    }


def run_spec_from_manifest(data: Dict) -> RunSpec:
    c = data["constants"]
    configs = [RunConfig.from_dict(r) for r in data["runs"]]
    return RunSpec(data["label"], configs,
                   AssumptionConstants(L=c["L"], sigma=c["sigma"], f_star=c["f_star"]))
