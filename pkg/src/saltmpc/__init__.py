"""Stochastic/robust NMPC for hybrid systems with guard saltation matrices."""

from .covariance import (
    BackoffSpec,
    backoff_flow,
    backoff_jump,
    gamma_from_probability,
    posterior_update,
    propagate_flow,
    propagate_jump,
    propagate_jump_apriori,
    propagate_jump_baseline,
)
from .errors import (
    CovarianceError,
    EvaluationError,
    EventError,
    ModelError,
    NumericalError,
    ProblemError,
    SaltMpcError,
    ScheduleError,
)
from .hybrid_model import (
    FlowMap,
    GuardMap,
    HybridModel,
    ResetMap,
    Transition,
    discretize_flow,
    evaluate_flow,
    evaluate_guard,
    evaluate_reset,
    identity_reset,
)
from .ocp import (
    BeliefTrajectory,
    LinearConstraint,
    ModeSchedule,
    OcpProblem,
    SolveOptions,
    SolverState,
    StageCost,
    StateCost,
    input_box,
    solve,
    transcribe,
)
from .saltation import (
    EventLinearization,
    SaltationResult,
    build_event_linearization,
    guard_saltation_matrix,
    saltation_matrix,
    saltation_result,
    transversality,
)

__version__ = "0.1.0"
