"""Bayesian inference for moment-condition models on implicitly defined manifolds."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConfigError,
    EvaluationError,
    HausmomentError,
    MaxIterationsExceeded,
    ModelError,
    MultipleRootsError,
    OffSupport,
    RankDeficientConstraint,
    SamplerAbort,
    SingularExpectedJacobian,
    SingularJacobian,
)
from .model import (  # noqa: E402
    Dataset,
    ManifoldState,
    MomentModel,
    SupportSet,
    build_constraint,
    constraint_residual,
    eval_moment,
    expected_dg_dbeta,
    make_builtin_model,
    make_state,
    register_model,
    solve_beta,
)
from .geometry import (  # noqa: E402
    JacobianBundle,
    ProjectionMap,
    SingularGaussian,
    build_projection,
    build_split,
    jacobian_dbeta_dtheta,
    marginal_log_correction,
    missing_support_correction,
    reparam_log_correction,
    split_marginal_correction,
)
from .prior import (  # noqa: E402
    Dirichlet,
    Gaussian,
    GeometricAdhoc,
    Laplace,
    NonScience,
    Science,
    Truncated,
    log_posterior,
    prior_log_density,
)
from .sampler import (  # noqa: E402
    ChainConfig,
    ChainOutput,
    WeightedSample,
    bayesian_bootstrap_is,
    run_block_joint_mcmc,
    run_joint_mcmc,
    run_marginal_mcmc,
    run_missing_support_sampler,
    sir_resample,
)
