"""ProxSkip-VR: local training with variance-reduced and compressed gradient estimators."""
from .core import Constants, Rng, bregman, estimate_constants, power_iteration
from .errors import (
    ConfigError,
    DivergenceError,
    InvalidInputError,
    InvalidParamsError,
    InvalidProblemError,
    InvalidStateError,
    NoConvergenceError,
    ParseError,
    ProxSkipVRError,
)
from .estimators import (
    GD,
    HUB,
    LSVRG,
    SGD,
    Compressor,
    EstimatorParams,
    apply_compressor,
    derive_W_beta,
    make_estimator,
    minibatch_smoothness,
)
from .problem import (
    CompositeProblem,
    ConsensusRegularizer,
    LogisticObjective,
    QuadraticObjective,
    ZeroRegularizer,
    consensus_prox,
    flat,
    lift,
    solve_reference,
)
from .solver import (
    RunTrace,
    SolverConfig,
    SolverState,
    estimator_hyperparams,
    localgd_baseline,
    lyapunov,
    proxskip_vr_step,
    run,
    theoretical_bound,
    theory_hyperparams,
)

__version__ = "0.1.0"
