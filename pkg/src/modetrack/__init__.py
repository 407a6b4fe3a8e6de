"""Mode-tracking particle filters for large state spaces with unreliable sensors."""

__version__ = "0.1.0"

from .ldss import (  # noqa: F401
    LdssModel,
    StatePartition,
    Trajectory,
    eigen_basis,
    householder_basis,
    nearest_orthonormal,
    propagate_state,
    propagate_velocity,
    simulate,
)
from .sensors import (  # noqa: F401
    GaussDepFailure,
    GaussIndepFailure,
    Observation,
    SensorSpec,
    UniformFailure,
    energy,
    energy_parts,
    grad_energy,
    hess_energy,
    ol_loglik,
    sample_observation,
)
from .modefind import (  # noqa: F401
    CondPosteriorSpec,
    GaussianProposal,
    NumericalError,
    conditional_gaussian_split,
    find_mode,
    laplace_covariance,
    neg_log_cond_posterior,
)
from .unimodality import (  # noqa: F401
    CertificateError,
    GridSpec,
    UnimodalityCertificate,
    certify,
    classify_regions,
    compute_rlc,
    count_stationary_points,
    default_grid,
    delta_star,
    nondiag_transform,
)
from .bounds import (  # noqa: F401
    BoundQuery,
    chernoff_tail_bound,
    choose_mrr,
    kappa,
    trace_tail_bound,
    trace_threshold,
    vp_tail_bound,
)
from .heuristics import (  # noqa: F401
    choose_vts_set,
    choose_vts_single,
    default_onfly_threshold,
    ol_multimodal_prob,
    onfly_select,
)
from .filters import (  # noqa: F401
    FilterSpec,
    ParticleSet,
    effective_size,
    kalman_filter,
    rbpf_filter,
    resample,
    run_filter,
)
from .config import ConfigError, ExperimentConfig, load_experiment  # noqa: F401
from .harness import out_of_track, rmse, run_experiment  # noqa: F401
