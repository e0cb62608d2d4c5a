"""Nested hybrid filters.

Joint estimation of static parameters and time-varying states of nonlinear
stochastic dynamical systems: an outer (quasi-)Monte Carlo particle layer
over the parameters with one Gaussian or particle state filter embedded per
parameter particle.  Benchmarked on a stochastic two-scale Lorenz 96 system
with a polynomial forecast ansatz.
"""

from .estimators import NestedHybridFilter
from .harness import (
    ExperimentConfig,
    FilterConfig,
    ModelConfig,
    RunConfig,
    RunReport,
    mse_per_dim,
    run_experiment,
    sweep,
)
from .inner import (
    EnsembleBelief,
    GaussianBelief,
    LikelihoodEstimate,
    block_diag_inverse,
    bpf_step,
    ekf_predict,
    ekf_update,
    enkf_predict,
    enkf_update,
)
from .models import (
    AnsatzParams,
    PolynomialAnsatzField,
    StateSpaceModel,
    Trajectory,
    TruthConfig,
    TwoScaleLorenzParams,
    ansatz_drift,
    euler_maruyama_step,
    generate_ground_truth,
    lorenz96_two_scale_drift,
    observe,
    propagate_m_steps,
    rk4_sde_step,
)
from .oracle import LinearGaussianModel, grid_posterior, kalman_filter
from .outer import (
    JitterKernel,
    ParameterCloud,
    PosteriorSummary,
    draw_prior,
    jitter,
    multinomial_resample,
    nhf_step,
    posterior_cov,
    posterior_mean,
    sqmc_step,
    state_predictor,
)
from .qmc import HaltonStream, HilbertMap, gaussian_from_uniform, hilbert_index, hilbert_sort, psi_map

__version__ = "0.1.0"
