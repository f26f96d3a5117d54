"""Survey-propagation inference for generalized linear models.

Hierarchical (K-level) vector survey propagation with mismatched priors and
likelihoods, its scalar state evolution, replica fixed-point residual
checks, and a reproducible MIMO-detection benchmark harness.
"""

__version__ = "0.1.0"

from .channels import (
    AwgnLikelihood,
    BpskPrior,
    GaussianPrior,
    ModelChannels,
    PosteriorMoments,
    Regime,
    RelaxedBpskPrior,
    RsbLadder,
    ladder_to_levels,
    levels_to_ladder,
)
from .engine import EstimateReport, KvaspConfig, KvaspState, init_state, iterate, mse, run
from .ensembles import (
    EnsembleConfig,
    KrsbMatrixParams,
    ProblemInstance,
    build_measurement,
    kronecker_correlation,
    krsb_build_and_decompose,
    krsb_matrix,
    philox_stream,
    structured_inverse,
)
from .errors import NumericError, ParameterError, SingularMatrixError, UnsupportedError
from .harness import (
    ExperimentConfig,
    TrialRecord,
    brute_force_posterior,
    export,
    generate_instance,
    run_experiment,
)
from .quadrature import QuadratureConfig, gamma_route_check, meanvar_quadrature, posterior_moments
from .state_evolution import (
    SeConfig,
    SeResult,
    SeState,
    saddle_residual,
    se_init,
    se_iterate,
    se_run,
)
from .vamp import run_vamp
