"""Certification toolkit for the diffusion approximation of finite-buffer JSQ.

Exact CTMC machinery (stationary law, discrete Poisson equation), a C3
lattice interpolation operator, synchronous-coupling and reflected-diffusion
simulators, and the rate experiment tying them together.
"""

__version__ = "0.1.0"

from .chain import (  # noqa: F401
    ModelParams,
    PoissonSolution,
    StateSpace,
    build_generator,
    enumerate_states,
    moment_identity,
    scaled_state,
    solve_named,
    solve_poisson,
    stationary,
)
from .interpolation import (  # noqa: F401
    GridFunction,
    Interpolant,
    clipped_extension,
    finite_diff,
    interp_derivative,
    interp_eval,
    smoothness_gap,
    weight_eval,
)
