"""Trace-norm regularised least squares with rank-consistency diagnostics."""

from .errors import InfeasibleDual, InvalidInput, NonConverged, TraceNormError
from .problem import (
    EmpiricalMoments,
    Observation,
    ObservationSet,
    assemble_moments,
    embed_design,
    kkt_residual,
    objective_value,
)
from .solver import (
    SolverConfig,
    SolveResult,
    dual_candidate,
    duality_gap,
    lambda_interval,
    regularization_path,
    smoothed_solve,
)

__version__ = "0.1.0"
