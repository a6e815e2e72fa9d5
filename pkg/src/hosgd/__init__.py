"""Simulation laboratory for hybrid-order (zeroth/first-order) distributed SGD."""

from .core import (AssumptionConstants, RunConfig, SeedRegistry, min_iterations, mu_default,
                   sample_unit_sphere, step_size_default)
from .optimizer import (GradientMessage, Trajectory, aggregate, comm_load_per_iteration,
                        fo_gradient_estimate, run, run_hosgd, run_local_avg, run_sync_sgd,
                        run_zo_sgd, zo_gradient_estimate)

__version__ = "0.1.0"
