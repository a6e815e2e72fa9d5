"""Hybrid-order distributed SGD and its baselines, simulated in one process.

Workers are simulated sequentially; every cross-worker reduction runs in
ascending worker order and all randomness is keyed by (seed, t, i[, b]), so a
trajectory does not depend on how the per-worker work is scheduled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import (AssumptionConstants, RunConfig, SeedRegistry, min_iterations,
                   mu_default, sample_batch)
from .objectives import Objective, ordered_sum


class ProtocolError(RuntimeError):
    """Messages of one round disagree on iteration or kind."""


class ObjectiveBlowup(FloatingPointError):
    """The objective returned a non-finite value."""


class MessageKind(Enum):
    FIRST_ORDER = "fo"
    ZEROTH_ORDER = "zo"


@dataclass
class GradientMessage:
    kind: MessageKind
    sender: int
    iteration: int
    payload_vector: Optional[np.ndarray] = None
    payload_scalar: Optional[float] = None

    def __post_init__(self):
        has_vec = self.payload_vector is not None
        has_scalar = self.payload_scalar is not None
        if self.kind is MessageKind.FIRST_ORDER and (not has_vec or has_scalar):
            raise ProtocolError("first-order message must carry exactly a vector")
        if self.kind is MessageKind.ZEROTH_ORDER and has_vec == has_scalar:
            raise ProtocolError("zeroth-order message must carry a scalar or (shadow) a vector")

    def scalar_count(self) -> int:
        if self.payload_vector is not None:
            return int(self.payload_vector.shape[0])
        return 1

    def contribution(self, registry: SeedRegistry) -> np.ndarray:
        """The d-vector this message stands for, rebuilt from the shared seed if needed."""
        if self.payload_vector is not None:
            return self.payload_vector
        return self.payload_scalar * registry.direction(self.iteration + 1, self.sender)


@dataclass
class Record:
    t: int
    loss: float
    grad_norm_sq: float
    scalars_sent_cum: int
    fevals_cum: int
    gevals_cum: int


@dataclass
class Trajectory:
    records: List[Record] = field(default_factory=list)
    x_final: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# per-worker estimators


def fo_gradient_estimate(obj: Objective, x: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Batch mean of per-sample gradients."""
    return ordered_sum(obj.grads(x, batch)) / len(batch)


def zo_gradient_estimate(obj: Objective, x: np.ndarray, batch: np.ndarray,
                         v: np.ndarray, mu: float):
    """Two-point estimate along ``v``; returns ``(coefficient, coefficient * v)``.

    Uses exactly ``2 * len(batch)`` function evaluations.
    """
    d = x.shape[0]
    f_plus = obj.losses(x + mu * v, batch)
    f_base = obj.losses(x, batch)
    if not (np.all(np.isfinite(f_plus)) and np.all(np.isfinite(f_base))):
        raise ObjectiveBlowup("objective returned a non-finite value in the zeroth-order probe")
    coefficient = float(ordered_sum((d / mu) * (f_plus - f_base)) / len(batch))
    return coefficient, coefficient * v


def aggregate(messages: Sequence[GradientMessage], registry: SeedRegistry) -> np.ndarray:
    """Mean of the workers' contributions, reduced in ascending sender order."""
    if not messages:
        raise ProtocolError("no messages to aggregate")
    kinds = {msg.kind for msg in messages}
    iterations = {msg.iteration for msg in messages}
    if len(kinds) > 1:
        raise ProtocolError("mixed first- and zeroth-order messages in one round")
    if len(iterations) > 1:
        raise ProtocolError("messages from different iterations in one round")
    acc = None
    for msg in sorted(messages, key=lambda m: m.sender):
        c = msg.contribution(registry)
        acc = c.copy() if acc is None else acc + c
    return acc / len(messages)


def comm_load_per_iteration(d: int, tau: int) -> float:
    """Average scalars sent per worker per iteration for period ``tau``."""
    if d < 1 or tau < 1:
        raise ValueError("d and tau must be >= 1")
    return (tau - 1 + d) / tau


def expected_scalars_per_worker(d: int, tau: int, N: int) -> int:
    """Exact scalar count per worker over iterations 0..N-1 (FO at t % tau == 0)."""
    n_fo = -(-N // tau)
    return d * n_fo + (N - n_fo)


# ---------------------------------------------------------------------------
# run plumbing


def _check_setup(config: RunConfig, obj: Objective, constants: AssumptionConstants) -> float:
    if obj.dimension != config.d:
        raise ValueError(f"config dimension {config.d} != objective dimension {obj.dimension}")
    if config.step_schedule == "theorem_default":
        n_min = min_iterations(config.d, config.B, config.m)
        if config.N < n_min:
            warnings.warn(f"N={config.N} is below the theorem's minimum {n_min}", stacklevel=3)
        if config.mu > mu_default(config.d, config.N):
            warnings.warn(f"mu={config.mu} exceeds 1/sqrt(dN)", stacklevel=3)
    return config.step_size(constants.L)


# divergence is detected from the iterate itself, so numpy's warnings are noise
_quiet_overflow = np.errstate(over="ignore", invalid="ignore")


class _Recorder:
    def __init__(self, obj: Objective, config: RunConfig):
        self.obj = obj
        self.stride = config.record_stride
        self.N = config.N
        self.traj = Trajectory()
        self.scalars = 0
        self.fevals = 0
        self.gevals = 0

    def record(self, t: int, x: np.ndarray) -> None:
        if t % self.stride and t != self.N:
            return
        g = self.obj.full_grad(x)
        self.traj.records.append(Record(t, self.obj.full_loss(x), float(np.dot(g, g)),
                                        self.scalars, self.fevals, self.gevals))


def _worker_message(obj: Objective, x: np.ndarray, config: RunConfig, registry,
                    t: int, i: int, kind: MessageKind, shadow: bool,
                    rec: _Recorder) -> GradientMessage:
    batch = sample_batch(config.master_seed, t, i, config.B, obj.num_samples)
    if kind is MessageKind.FIRST_ORDER:
        rec.gevals += config.B
        return GradientMessage(kind, i, t, payload_vector=fo_gradient_estimate(obj, x, batch))
    v = registry.direction(t + 1, i)
    coefficient, vector = zo_gradient_estimate(obj, x, batch, v, config.mu)
    rec.fevals += 2 * config.B
    if shadow:
        return GradientMessage(kind, i, t, payload_vector=vector)
    return GradientMessage(kind, i, t, payload_scalar=coefficient)


@_quiet_overflow
def _run_schedule(config: RunConfig, obj: Objective, constants: AssumptionConstants,
                  kind_at: Callable[[int], MessageKind], shadow: bool,
                  registry) -> Trajectory:
    alpha = _check_setup(config, obj, constants)
    registry = registry or SeedRegistry(config.master_seed, config.d)
    rec = _Recorder(obj, config)
    x = config.x0.copy()
    for t in range(config.N):
        rec.record(t, x)
        kind = kind_at(t)
        try:
            messages = [_worker_message(obj, x, config, registry, t, i, kind, shadow, rec)
                        for i in range(1, config.m + 1)]
        except ObjectiveBlowup as exc:
            rec.traj.error = f"t={t}: {exc}"
            break
        rec.scalars += sum(msg.scalar_count() for msg in messages)
        x_next = x - alpha * aggregate(messages, registry)
        if not np.all(np.isfinite(x_next)):
            rec.traj.error = f"t={t + 1}: non-finite iterate"
            break
        x = x_next
    else:
        rec.record(config.N, x)
    rec.traj.x_final = x
    return rec.traj


def run_hosgd(config: RunConfig, obj: Objective, constants: AssumptionConstants, *,
              shadow_vectors: bool = False, registry=None) -> Trajectory:
    """First-order round whenever ``t % tau == 0``, zeroth-order otherwise.

    ``shadow_vectors`` makes zeroth-order workers transmit their full d-vector
    instead of the scalar, for checking that the scalar protocol is lossless.
    """
    tau = config.tau

    def kind_at(t):
        return MessageKind.FIRST_ORDER if t % tau == 0 else MessageKind.ZEROTH_ORDER

    return _run_schedule(config, obj, constants, kind_at, shadow_vectors, registry)


def run_zo_sgd(config: RunConfig, obj: Objective, constants: AssumptionConstants, *,
               shadow_vectors: bool = False, registry=None) -> Trajectory:
    """Zeroth-order round at every iteration, including t = 0."""
    return _run_schedule(config, obj, constants, lambda t: MessageKind.ZEROTH_ORDER,
                         shadow_vectors, registry)


@_quiet_overflow
def run_sync_sgd(config: RunConfig, obj: Objective, constants: AssumptionConstants,
                 registry=None) -> Trajectory:
    """Fully synchronous minibatch SGD, written independently of the hybrid loop."""
    alpha = _check_setup(config, obj, constants)
    rec = _Recorder(obj, config)
    x = config.x0.copy()
    for t in range(config.N):
        rec.record(t, x)
        acc = None
        for i in range(1, config.m + 1):
            batch = sample_batch(config.master_seed, t, i, config.B, obj.num_samples)
            g = fo_gradient_estimate(obj, x, batch)
            acc = g.copy() if acc is None else acc + g
        rec.gevals += config.B * config.m
        rec.scalars += config.d * config.m
        x_next = x - alpha * (acc / config.m)
        if not np.all(np.isfinite(x_next)):
            rec.traj.error = f"t={t + 1}: non-finite iterate"
            break
        x = x_next
    else:
        rec.record(config.N, x)
    rec.traj.x_final = x
    return rec.traj


@_quiet_overflow
def run_local_avg(config: RunConfig, obj: Objective, constants: AssumptionConstants,
                  registry=None) -> Trajectory:
    """Local first-order steps with model averaging after every ``tau`` steps.

    Each worker's model is kept as ``anchor - alpha * U_i`` where ``U_i`` sums
    the worker's gradients since the last averaging round; averaging replaces
    the anchor by ``anchor - alpha * mean(U_i)``. With a constant step this is
    the usual local-SGD recursion, and for ``tau = 1`` it performs exactly the
    floating-point operations of synchronous SGD.
    """
    alpha = _check_setup(config, obj, constants)
    rec = _Recorder(obj, config)
    m, tau = config.m, config.tau
    anchor = config.x0.copy()
    U = np.zeros((m, config.d))
    dirty = False

    def averaged():
        if not dirty:
            return anchor
        acc = U[0].copy()
        for i in range(1, m):
            acc = acc + U[i]
        return anchor - alpha * (acc / m)

    for t in range(config.N):
        rec.record(t, averaged())
        for i in range(1, m + 1):
            local = anchor - alpha * U[i - 1]
            batch = sample_batch(config.master_seed, t, i, config.B, obj.num_samples)
            U[i - 1] = U[i - 1] + fo_gradient_estimate(obj, local, batch)
        dirty = True
        rec.gevals += config.B * m
        if (t + 1) % tau == 0:
            anchor = averaged()
            U[:] = 0.0
            dirty = False
            rec.scalars += config.d * m
        if not np.all(np.isfinite(U)) or not np.all(np.isfinite(anchor)):
            rec.traj.error = f"t={t + 1}: non-finite iterate"
            break
    else:
        rec.record(config.N, averaged())
    rec.traj.x_final = averaged()
    return rec.traj


RUNNERS = {
    "hosgd": run_hosgd,
    "sync_sgd": run_sync_sgd,
    "zo_sgd": run_zo_sgd,
    "local_avg": run_local_avg,
}


def run(config: RunConfig, obj: Objective, constants: AssumptionConstants) -> Trajectory:
    if config.B > obj.num_samples and obj.num_samples > 1:
        raise ValueError(f"batch size {config.B} exceeds the number of samples {obj.num_samples}")
    return RUNNERS[config.algorithm](config, obj, constants)
