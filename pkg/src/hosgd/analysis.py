"""Monte-Carlo oracles for ball smoothing and the convergence-bound calculator.

All estimators draw from ``keyed_generator(key, STREAM_ANALYSIS, ...)`` so a
given key reproduces the same draws. Tolerances on the Monte-Carlo side are
three standard errors; a failing check is repeated once with four times the
samples (fresh draws) before it is reported as failed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import (STREAM_ANALYSIS, AssumptionConstants, RunConfig, keyed_generator,
                   min_iterations, mu_default, step_size_default)
from .objectives import Objective
from .optimizer import fo_gradient_estimate, zo_gradient_estimate

N_SIGMA = 3.0


def _rng(key: int, sub: int = 0) -> np.random.Generator:
    return keyed_generator(key, STREAM_ANALYSIS, sub=sub)


def _sphere(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    Z = rng.standard_normal((n, d))
    norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    bad = norms == 0.0
    while np.any(bad):
        Z[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
        bad = norms == 0.0
    return Z / norms[:, None]


def sample_unit_ball(key: int, d: int, size: Optional[int] = None) -> np.ndarray:
    """Uniform draw(s) from the unit ball: sphere direction scaled by U**(1/d)."""
    rng = _rng(key)
    n = 1 if size is None else size
    V = _sphere(rng, n, d)
    r = rng.random(n) ** (1.0 / d)
    out = V * r[:, None]
    return out[0] if size is None else out


@dataclass
class SmoothingEstimate:
    value_mean: float
    grad_mean: Optional[np.ndarray]
    n_samples: int
    std_error: float
    grad_std_error: Optional[np.ndarray] = None
    gap_mean: float = 0.0


def smoothed_value_mc(obj: Objective, x, mu: float, n_samples: int, key: int) -> SmoothingEstimate:
    """Estimate f_mu(x) = E_u f(x + mu u) over the unit ball.

    Draws come in antithetic pairs (u, -u); each pair contributes
    (f(x+mu u) + f(x-mu u))/2 - f(x). ``gap_mean`` estimates f_mu(x) - f(x) and
    ``std_error`` is the standard error of that pair mean.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    x = np.asarray(x, dtype=np.float64)
    n_pairs = n_samples // 2
    U = sample_unit_ball(key, x.shape[0], n_pairs)
    f0 = obj.full_loss(x)
    dev = 0.5 * (obj.full_loss_many(x + mu * U) + obj.full_loss_many(x - mu * U)) - f0
    gap = float(np.mean(dev))
    se = float(np.std(dev, ddof=1) / math.sqrt(n_pairs))
    return SmoothingEstimate(f0 + gap, None, 2 * n_pairs, se, gap_mean=gap)


def smoothed_grad_mc(obj: Objective, x, mu: float, n_samples: int, key: int) -> SmoothingEstimate:
    """Mean of (d/mu)[f(x + mu v) - f(x)] v over uniform sphere directions v.

    This is the expectation of the workers' zeroth-order estimator, i.e. the
    gradient of the ball-smoothed function.
    """
    if n_samples < 10000:
        raise ValueError("need at least 10000 samples")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    V = _sphere(_rng(key, 1), n_samples, d)
    f0 = obj.full_loss(x)
    coef = (d / mu) * (obj.full_loss_many(x + mu * V) - f0)
    S = coef[:, None] * V
    grad = S.mean(axis=0)
    gse = S.std(axis=0, ddof=1) / math.sqrt(n_samples)
    return SmoothingEstimate(f0, grad, n_samples, float(np.linalg.norm(gse)), gse)


def smoothed_grad_gap_mc(obj: Objective, x, mu: float, n_samples: int, key: int):
    """Estimate grad f_mu(x) - grad f(x) with a control variate.

    Each sample is (d/2mu)[f(x+mu v) - f(x-mu v)] v - d (grad f(x).v) v; the
    subtracted term has mean grad f(x) exactly, so the sample mean is
    unbiased for the gap while its variance shrinks with mu.
    Returns ``(gap_vector, per-coordinate standard errors)``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    g = obj.full_grad(x)
    V = _sphere(_rng(key, 2), n_samples, d)
    diff = obj.full_loss_many(x + mu * V) - obj.full_loss_many(x - mu * V)
    coef = (d / (2 * mu)) * diff - d * (V @ g)
    S = coef[:, None] * V
    return S.mean(axis=0), S.std(axis=0, ddof=1) / math.sqrt(n_samples)


# ---------------------------------------------------------------------------
# checks


@dataclass
class CheckReport:
    name: str
    passed: bool
    rows: List[dict] = field(default_factory=list)
    witness: Optional[dict] = None
    note: str = ""

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _with_retry(run: Callable[[int, int], CheckReport], n: int, key: int) -> CheckReport:
    report = run(n, key)
    if report.passed:
        return report
    retry = run(4 * n, key + 1)
    retry.note = f"passed only on retry with {4 * n} samples" if retry.passed else \
        f"failed with {n} and {4 * n} samples"
    return retry


def random_points(key: int, n_points: int, d: int, scale: float = 1.0) -> np.ndarray:
    return scale * _rng(key, 3).standard_normal((n_points, d))


def check_smoothing_inequalities(obj: Objective, mu: float, constants: AssumptionConstants,
                                 n_points: int, key: int, n_samples: int = 10000,
                                 point_scale: float = 1.0, retry: bool = True) -> CheckReport:
    """|f_mu - f| <= mu^2 L / 2 and ||grad f_mu - grad f|| <= mu L d / 2 at random points."""
    d = obj.dimension
    L = constants.L
    value_bound = mu * mu * L / 2
    grad_bound = mu * L * d / 2

    def attempt(n, k):
        rows = []
        witness = None
        for p, x in enumerate(random_points(k, n_points, d, point_scale)):
            val = smoothed_value_mc(obj, x, mu, n, k * 7919 + p)
            gap_vec, gse = smoothed_grad_gap_mc(obj, x, mu, n, k * 7919 + p)
            grad_gap = float(np.linalg.norm(gap_vec))
            grad_se = float(np.linalg.norm(gse))
            row = {"point": p, "value_gap": abs(val.gap_mean), "value_bound": value_bound,
                   "value_se": val.std_error, "grad_gap": grad_gap,
                   "grad_bound": grad_bound, "grad_se": grad_se}
            row["ok"] = (abs(val.gap_mean) <= value_bound + N_SIGMA * val.std_error
                         and grad_gap <= grad_bound + N_SIGMA * grad_se)
            rows.append(row)
            if not row["ok"] and witness is None:
                witness = dict(row, x=x.tolist())
        return CheckReport(f"smoothing_inequalities(mu={mu})", witness is None, rows, witness)

    if not retry:
        return attempt(n_samples, key)
    return _with_retry(attempt, n_samples, key)


def second_moment_bounds(grad_norm_sq: float, d: int, B: int, m: int, mu: float,
                         constants: AssumptionConstants) -> Tuple[float, float]:
    """Upper bounds on E||G||^2 for a first-order and a zeroth-order round."""
    Bm = B * m
    s2 = constants.sigma ** 2
    fo = grad_norm_sq + s2 / Bm
    zo = 2 * (d + Bm - 1) / Bm * grad_norm_sq + 2 * d * s2 / Bm + mu ** 2 * constants.L ** 2 * d ** 2 / 2
    return fo, zo


def aggregate_draws(obj: Objective, x, mu: float, B: int, m: int, n_trials: int,
                    key: int, kind: str) -> np.ndarray:
    """||G||^2 for ``n_trials`` independent aggregated update directions at ``x``.

    One direction per worker shared across its batch, batch indices i.i.d.
    uniform with replacement, as in a live run.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    rng = _rng(key, 4 if kind == "zo" else 5)
    idx = rng.integers(obj.num_samples, size=(n_trials, m, B))
    V = _sphere(rng, n_trials * m, d).reshape(n_trials, m, d) if kind == "zo" else None
    out = np.empty(n_trials)
    for n in range(n_trials):
        acc = np.zeros(d)
        for i in range(m):
            if kind == "zo":
                acc = acc + zo_gradient_estimate(obj, x, idx[n, i], V[n, i], mu)[1]
            else:
                acc = acc + fo_gradient_estimate(obj, x, idx[n, i])
        G = acc / m
        out[n] = float(np.dot(G, G))
    return out


def check_second_moment_bound(obj: Objective, x, mu: float, B: int, m: int,
                              constants: AssumptionConstants, n_trials: int, key: int,
                              retry: bool = True) -> CheckReport:
    """Empirical E||G||^2 against the first- and zeroth-order round bounds."""
    x = np.asarray(x, dtype=np.float64)
    g = obj.full_grad(x)
    gn = float(np.dot(g, g))
    fo_bound, zo_bound = second_moment_bounds(gn, obj.dimension, B, m, mu, constants)

    def attempt(n, k):
        rows = []
        witness = None
        for kind, bound in (("fo", fo_bound), ("zo", zo_bound)):
            sq = aggregate_draws(obj, x, mu, B, m, n, k, kind)
            mean = float(sq.mean())
            se = float(sq.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            row = {"case": kind, "mean_sq_norm": mean, "std_error": se, "bound": bound,
                   "grad_norm_sq": gn, "ok": mean <= bound + N_SIGMA * se}
            rows.append(row)
            if not row["ok"] and witness is None:
                witness = dict(row, x=x.tolist())
        return CheckReport("second_moment_bound", witness is None, rows, witness)

    if not retry:
        return attempt(n_trials, key)
    return _with_retry(attempt, n_trials, key)


def check_gradient_norm_lower_bound(obj: Objective, x, mu: float, constants: AssumptionConstants,
                                    n_samples: int, key: int) -> CheckReport:
    """||grad f_mu(x)||^2 >= ||grad f(x)||^2 / 2 - mu^2 d^2 L^2 / 4."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    g = obj.full_grad(x)
    gap, gse = smoothed_grad_gap_mc(obj, x, mu, n_samples, key)
    g_mu = g + gap
    lhs = float(np.dot(g_mu, g_mu))
    rhs = 0.5 * float(np.dot(g, g)) - mu ** 2 * d ** 2 * constants.L ** 2 / 4
    slack = N_SIGMA * 2 * math.sqrt(lhs) * float(np.linalg.norm(gse))
    row = {"smoothed_grad_norm_sq": lhs, "lower_bound": rhs, "slack": slack,
           "ok": lhs + slack >= rhs}
    return CheckReport("gradient_norm_lower_bound", row["ok"], [row],
                       None if row["ok"] else dict(row, x=x.tolist()))


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_gradient(fun: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def gradient_relative_error(obj: Objective, x, sample_index: int, h: float = 1e-6) -> float:
    """||analytic - central difference|| / max(||analytic||, ||central difference||)."""
    x = np.asarray(x, dtype=np.float64)
    analytic = obj.grad(x, sample_index)
    numeric = finite_difference_gradient(lambda z: obj.eval(z, sample_index), x, h)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


# ---------------------------------------------------------------------------
# convergence bound


@dataclass
class BoundReport:
    rhs_total: float
    term_breakdown: List[Tuple[str, float]]
    preconditions_met: Tuple[bool, bool, bool]
    step_size: float = 0.0
    mu_max: float = 0.0
    N_min: int = 0

    def to_dict(self) -> dict:
        step_ok, mu_ok, n_ok = self.preconditions_met
        return {
            "rhs_total": self.rhs_total,
            "terms": [{"name": n, "value": v} for n, v in self.term_breakdown],
            "preconditions_met": {"step_size": step_ok, "mu": mu_ok, "N": n_ok},
            "step_size": self.step_size,
            "mu_max": self.mu_max,
            "N_min": self.N_min,
        }


def bound_terms(L: float, sigma: float, f_gap: float, d: int, B: int, m: int,
                N: int, tau: int) -> List[Tuple[str, float]]:
    """Additive terms of the final average-squared-gradient-norm bound.

    The eight zeroth-order terms only appear for ``tau > 1``. The pairs
    ``zo_dL2_*`` and ``zo_dL2_*_b`` are equal; both are kept as they appear in
    the derivation.
    """
    if L <= 0 or N <= 0:
        raise ValueError("L and N must be positive")
    r = math.sqrt(B * m * N)
    s2 = sigma * sigma
    frac = (tau - 1) / tau
    terms = [
        ("fo_initial_gap", 4 * L * f_gap / r),
        ("fo_variance", 2 * s2 / (r * tau)),
    ]
    if tau > 1:
        terms += [
            ("zo_L2_over_d_tau", 4 * L * L / (d * r * tau)),
            ("zo_L2_over_dN", 4 * L * L / (d * N * r)),
            ("zo_dL2_period", d * L * L / r * frac),
            ("zo_dL2_over_N_tau", d * L * L / (N * r * tau)),
            ("zo_d_variance_period", 4 * d * s2 / r * frac),
            ("zo_d_variance_over_N_tau", 4 * d * s2 / (N * r * tau)),
            ("zo_dL2_period_b", d * L * L / r * frac),
            ("zo_dL2_over_N_tau_b", d * L * L / (N * r * tau)),
        ]
    return terms


def theoretical_bound(config: RunConfig, constants: AssumptionConstants, f0: float) -> BoundReport:
    """Evaluate the bound for ``config`` and report which hypotheses hold."""
    L, N = constants.L, config.N
    if not L > 0 or N <= 0:
        raise ValueError("L and N must be positive")
    terms = bound_terms(L, constants.sigma, f0 - constants.f_star, config.d, config.B,
                        config.m, N, config.tau)
    alpha_req = step_size_default(config.B, config.m, L, N)
    alpha = config.step_size(L)
    step_ok = math.isclose(alpha, alpha_req, rel_tol=1e-12)
    mu_max = mu_default(config.d, N)
    n_min = min_iterations(config.d, config.B, config.m)
    return BoundReport(
        rhs_total=math.fsum(v for _, v in terms),
        term_breakdown=terms,
        preconditions_met=(step_ok, config.mu <= mu_max, N >= n_min),
        step_size=alpha,
        mu_max=mu_max,
        N_min=n_min,
    )
