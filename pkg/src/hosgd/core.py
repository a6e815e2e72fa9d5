"""Shared types, keyed randomness and the closed-form step/smoothing rules.

Every random quantity in a run is drawn from a Philox4x64-10 generator whose
state is fully determined by a small integer tuple, so that any party holding
the master seed can reproduce any direction or sample index without having
seen the previous draws.

Key layout (all words unsigned 64-bit)::

    key     = (master_seed, stream)
    counter = (0, sub, worker, iteration)

``stream`` separates independent uses (see ``STREAM_*``). ``sub`` is the
batch slot ``b`` for sample draws and the retry attempt for directions. The
lowest counter word is left at zero and is advanced by the generator itself
while drawing, so draws for distinct tuples never overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np

STREAM_DIRECTION = 0
STREAM_SAMPLE = 1
STREAM_ANALYSIS = 2

ALGORITHMS = ("hosgd", "sync_sgd", "zo_sgd", "local_avg")
OBJECTIVES = ("quadratic", "sigmoid", "tanh_net", "attack")

_U64 = 2**64


def keyed_generator(master_seed: int, stream: int, worker: int = 0,
                    iteration: int = 0, sub: int = 0) -> np.random.Generator:
    """Return a fresh generator positioned at the given counter tuple."""
    key = np.array([master_seed % _U64, stream % _U64], dtype=np.uint64)
    counter = np.array([0, sub % _U64, worker % _U64, iteration % _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def as_vector(values, d: Optional[int] = None) -> np.ndarray:
    """Coerce to a finite float64 1-D array, optionally checking its length."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if d is not None and x.shape[0] != d:
        raise ValueError(f"expected a vector of length {d}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("vector contains non-finite entries")
    return x


@dataclass(frozen=True)
class SeedRegistry:
    """Pre-shared mapping (iteration, worker) -> unit direction."""

    master_seed: int
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if not 0 <= self.master_seed < _U64:
            raise ValueError("master_seed must fit in an unsigned 64-bit word")

    def direction(self, t: int, i: int) -> np.ndarray:
        return sample_unit_sphere(self, t, i)


def sample_unit_sphere(registry: SeedRegistry, t: int, i: int) -> np.ndarray:
    """Uniform direction on S^{d-1} for iteration ``t`` and worker ``i``.

    Draws ``d`` standard normals and normalizes once. An all-zero draw is
    retried with the ``sub`` counter word incremented.
    """
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    if i < 1:
        raise ValueError("worker index must be >= 1")
    attempt = 0
    while True:
        g = keyed_generator(registry.master_seed, STREAM_DIRECTION, i, t, attempt)
        z = g.standard_normal(registry.d)
        norm = float(np.sqrt(np.dot(z, z)))
        if norm > 0.0:
            return z / norm
        attempt += 1


def sample_batch(master_seed: int, t: int, i: int, batch_size: int,
                 num_samples: int) -> np.ndarray:
    """Batch of sample indices in ``[0, num_samples)``, i.i.d. with replacement.

    Slot ``b`` is drawn from its own generator keyed by (seed, t, i, b).
    """
    out = np.empty(batch_size, dtype=np.int64)
    for b in range(batch_size):
        g = keyed_generator(master_seed, STREAM_SAMPLE, i, t, b)
        out[b] = g.integers(num_samples)
    return out


def step_size_default(B: int, m: int, L: float, N: int) -> float:
    if min(B, m, N) <= 0 or L <= 0:
        raise ValueError("B, m, L and N must be positive")
    return math.sqrt(B * m) / (L * math.sqrt(N))


def min_iterations(d: int, B: int, m: int) -> int:
    """Smallest integer N with N > 16 (d + Bm - 1)^2 / (Bm)."""
    if min(d, B, m) <= 0:
        raise ValueError("d, B and m must be positive")
    bound = Fraction(16 * (d + B * m - 1) ** 2, B * m)
    return math.floor(bound) + 1


def mu_default(d: int, N: int) -> float:
    if d <= 0 or N <= 0:
        raise ValueError("d and N must be positive")
    return 1.0 / math.sqrt(d * N)


@dataclass(frozen=True)
class AssumptionConstants:
    """Smoothness, noise and lower-bound constants of an objective.

    ``M`` (gradient-norm bound) is carried for completeness; nothing reads it.
    """

    L: float
    sigma: float = 0.0
    f_star: float = 0.0
    M: float = 0.0

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.sigma < 0 or self.M < 0:
            raise ValueError("sigma and M must be nonnegative")


StepSchedule = Union[str, float]


@dataclass
class RunConfig:
    """One experiment. ``step_schedule`` is ``"theorem_default"`` or a float."""

    d: int
    m: int = 1
    B: int = 1
    tau: int = 1
    mu: float = 1e-3
    N: int = 100
    step_schedule: StepSchedule = "theorem_default"
    objective_id: str = "quadratic"
    master_seed: int = 0
    algorithm: str = "hosgd"
    x0: Optional[np.ndarray] = None
    record_stride: int = 1
    label: str = ""
    objective_params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("d", "m", "B", "tau", "N", "record_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.objective_id not in OBJECTIVES:
            raise ValueError(f"unknown objective_id {self.objective_id!r}")
        if not 0 <= self.master_seed < _U64:
            raise ValueError("master_seed must fit in an unsigned 64-bit word")
        if isinstance(self.step_schedule, str):
            if self.step_schedule != "theorem_default":
                raise ValueError(f"unknown step schedule {self.step_schedule!r}")
        elif not float(self.step_schedule) > 0:
            raise ValueError("constant step size must be positive")
        if self.x0 is None:
            self.x0 = np.zeros(self.d)
        else:
            self.x0 = as_vector(self.x0, self.d)

    def step_size(self, L: Optional[float]) -> float:
        if self.step_schedule == "theorem_default":
            if L is None:
                raise ValueError("theorem_default step size needs an L estimate")
            return step_size_default(self.B, self.m, L, self.N)
        return float(self.step_schedule)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "algorithm": self.algorithm,
            "objective_id": self.objective_id,
            "objective_params": dict(self.objective_params),
            "d": self.d,
            "m": self.m,
            "B": self.B,
            "tau": self.tau,
            "mu": self.mu,
            "N": self.N,
            "step_schedule": self.step_schedule,
            "master_seed": self.master_seed,
            "record_stride": self.record_stride,
            "x0": [float(v) for v in self.x0],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = dict(data)
        kwargs["x0"] = np.asarray(kwargs.get("x0"), dtype=np.float64) if kwargs.get("x0") is not None else None
        return cls(**kwargs)
