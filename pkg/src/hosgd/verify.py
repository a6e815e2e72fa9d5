"""Property suite behind ``hosgd verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from . import core
from .analysis import (check_second_moment_bound, check_smoothing_inequalities,
                       gradient_relative_error, random_points, smoothed_grad_mc)
from .core import AssumptionConstants, RunConfig, SeedRegistry
from .objectives import (Linear, fit_linear_classifier, make_attack_dataset, make_attack_loss,
                         make_quadratic, make_sigmoid_regression, make_two_layer_tanh)
from .optimizer import (comm_load_per_iteration, expected_scalars_per_worker, run_hosgd,
                        run_sync_sgd)


@dataclass
class Outcome:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


LEVELS = {
    "fast": dict(dirs=200, grad_points=10, smooth_mus=(0.1,), smooth_points=5, smooth_n=2000,
                 moment_points=2, moment_trials=2000, exchange_N=100, zo_n=10_000),
    "full": dict(dirs=5000, grad_points=100, smooth_mus=(0.2, 0.1, 0.05, 0.01), smooth_points=50,
                 smooth_n=100_000, moment_points=10, moment_trials=10_000, exchange_N=500,
                 zo_n=100_000),
}


def _unit_norm(p):
    reg = SeedRegistry(12345, 7)
    worst = 0.0
    for t in range(p["dirs"]):
        v = core.sample_unit_sphere(reg, t, 1 + t % 4)
        worst = max(worst, abs(float(np.linalg.norm(v)) - 1.0))
    return worst <= 1e-12, f"max | ||v|| - 1 | = {worst:.3e}"


def _direction_determinism(p):
    reg = SeedRegistry(99, 11)
    same = all(np.array_equal(core.sample_unit_sphere(reg, t, 2), core.sample_unit_sphere(reg, t, 2))
               for t in range(50))
    return same, "repeated draws bit-identical" if same else "repeated draws differ"


def _objectives():
    images, labels = make_attack_dataset(40, 6, 3, data_seed=5)
    model = fit_linear_classifier(images, labels, 3)
    return [
        ("quadratic", make_quadratic(5, 10.0), 1e-5, None),
        ("sigmoid", make_sigmoid_regression(8, 50, 0.1, 1), 1e-5, None),
        ("tanh_net", make_two_layer_tanh(3, 4, 30, 2, smoothness_points=2), 1e-4, None),
        ("attack", make_attack_loss(model, images, labels, 2.0, smoothness_points=2), 1e-4, "kink"),
    ]


def _gradients(p):
    worst = []
    rng = np.random.default_rng(2024)
    ok = True
    for name, obj, tol, kink in _objectives():
        errs = []
        while len(errs) < p["grad_points"]:
            x = 0.5 * rng.standard_normal(obj.dimension)
            k = int(rng.integers(obj.num_samples))
            if kink and abs(obj.margins(x, np.array([k]))[0]) < 1e-4:
                continue
            errs.append(gradient_relative_error(obj, x, k))
        e = max(errs)
        ok &= e <= tol
        worst.append(f"{name}={e:.1e}")
    return ok, "max rel err " + ", ".join(worst)


def _smoothing(p):
    failures = []
    for d in (2, 10):
        obj = make_quadratic(d, 1.0)
        for mu in p["smooth_mus"]:
            rep = check_smoothing_inequalities(obj, mu, AssumptionConstants(L=1.0), p["smooth_points"],
                                               key=17 + d, n_samples=p["smooth_n"])
            if not rep.passed:
                failures.append(f"d={d} mu={mu} witness={rep.witness}")
    return not failures, "; ".join(failures) or "all points within bounds"


def _second_moment(p):
    obj = make_sigmoid_regression(10, 200, 0.1, 3)
    pts = random_points(5, p["moment_points"], 10, scale=2.0 / np.sqrt(10))
    sigma2 = max(obj.gradient_variance(x) for x in np.vstack([np.zeros(10), pts]))
    c = AssumptionConstants(L=obj.L_estimate, sigma=float(np.sqrt(sigma2)))
    for j, x in enumerate(pts):
        rep = check_second_moment_bound(obj, x, 1e-3, 4, 2, c, p["moment_trials"], key=100 + j)
        if not rep.passed:
            return False, f"witness={rep.witness}"
    return True, f"{len(pts)} iterates, both cases within bound"


def _sigmoid_setup(N, tau=8, seed=1):
    obj = make_sigmoid_regression(50, 400, 0.0, 11)
    c = AssumptionConstants(L=obj.L_estimate, sigma=1.0)
    cfg = RunConfig(d=50, m=4, B=8, tau=tau, mu=1e-3, N=N, step_schedule=0.1,
                    objective_id="sigmoid", master_seed=seed, algorithm="hosgd")
    return obj, c, cfg


def _scalar_exchange(p):
    obj, c, cfg = _sigmoid_setup(p["exchange_N"])
    a = run_hosgd(cfg, obj, c)
    b = run_hosgd(cfg, obj, c, shadow_vectors=True)
    same = np.array_equal(a.x_final, b.x_final) and np.array_equal(a.column("loss"), b.column("loss"))
    return same, "scalar and vector protocols bit-identical" if same else "trajectories differ"


def _tau_one(p):
    obj, c, cfg = _sigmoid_setup(p["exchange_N"], tau=1)
    a = run_hosgd(cfg, obj, c)
    b = run_sync_sgd(cfg, obj, c)
    same = a.records == b.records and np.array_equal(a.x_final, b.x_final)
    return same, "tau=1 equals synchronous SGD" if same else "tau=1 trajectory differs from sync SGD"


def _communication(p):
    d, tau, N, m = 120, 8, 96, 3
    obj = make_quadratic(d)
    cfg = RunConfig(d=d, m=m, B=1, tau=tau, mu=1e-3, N=N, step_schedule=0.1,
                    x0=np.ones(d))
    traj = run_hosgd(cfg, obj, AssumptionConstants(L=1.0))
    sent = traj.records[-1].scalars_sent_cum
    ok = sent == m * expected_scalars_per_worker(d, tau, N) and \
        sent / (m * N) == comm_load_per_iteration(d, tau)
    return ok, f"scalars/worker/iter = {sent / (m * N)} vs {comm_load_per_iteration(d, tau)}"


def _evaluations(p):
    obj, c, cfg = _sigmoid_setup(17, tau=4)
    traj = run_hosgd(cfg, obj, c)
    fe, ge = traj.column("fevals_cum"), traj.column("gevals_cum")
    Bm = cfg.B * cfg.m
    ok = True
    for t in range(cfg.N):
        fo = t % cfg.tau == 0
        ok &= (fe[t + 1] - fe[t]) == (0 if fo else 2 * Bm)
        ok &= (ge[t + 1] - ge[t]) == (Bm if fo else 0)
    return bool(ok), f"fevals={fe[-1]}, gevals={ge[-1]}"


def _zo_expectation(p):
    a = np.linspace(-1.0, 1.0, 10)
    est = smoothed_grad_mc(Linear(a), np.zeros(10), 0.01, p["zo_n"], key=3)
    z = np.abs(est.grad_mean - a) / est.grad_std_error
    return bool(np.all(z <= 3.0)), f"max |error|/se = {z.max():.2f}"


CHECKS: List[Tuple[str, Callable]] = [
    ("unit_norm", _unit_norm),
    ("direction_determinism", _direction_determinism),
    ("gradient_check", _gradients),
    ("smoothing_inequalities", _smoothing),
    ("second_moment_bound", _second_moment),
    ("scalar_exchange_equivalence", _scalar_exchange),
    ("tau1_equals_sync_sgd", _tau_one),
    ("communication_accounting", _communication),
    ("evaluation_accounting", _evaluations),
    ("zo_estimator_expectation", _zo_expectation),
]


def run_suite(level: str = "fast") -> List[Outcome]:
    params = LEVELS[level]
    outcomes = []
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            passed, detail = fn(params)
        except Exception as exc:  # a crashing property counts as a failure
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        outcomes.append(Outcome(name, bool(passed), detail, time.perf_counter() - start))
    return outcomes
