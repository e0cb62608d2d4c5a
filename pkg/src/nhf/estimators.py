"""Scikit-learn style estimator facade over the nested hybrid filter.

``NestedHybridFilter`` consumes a sequence of observations (one row per
observation instant) and jointly estimates the static model parameters and
the time-varying state.  It follows the usual estimator conventions:
hyperparameters are set in ``__init__`` and introspectable through
``get_params``; fitted results live in trailing-underscore attributes;
``partial_fit`` assimilates observations one at a time for online use.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .inner import (
    BPFInner,
    DiscreteLinearInnerModel,
    EKFInner,
    EnKFInner,
    EnsembleBelief,
    GaussianBelief,
    ParticleBelief,
    SdeInnerModel,
    as_inner_model,
)
from .models import StateSpaceModel
from .outer import (
    JitterKernel,
    init_cloud,
    nhf_step,
    posterior_cov,
    posterior_mean,
    prior_generator,
    sqmc_init_uniform_block,
    sqmc_step,
    sqmc_stream_dimension,
    state_predictor,
)
from .qmc import HaltonStream, HilbertMap
from .validation import check_box, require


class NestedHybridFilter(BaseEstimator):
    """Joint static-parameter and state estimator for state-space models.

    An outer particle representation over the parameter vector embeds one
    state filter per particle.  At every observation the particles are
    jittered, scored by their inner filters' predictive likelihoods,
    and resampled; posterior summaries of both parameters and states are
    recorded.

    Parameters
    ----------
    model : StateSpaceModel or inner-model object
        Forecast model the inner filters run on.
    prior_box : sequence of (lo, hi) pairs
        Uniform prior support per parameter component.
    outer : {"smc", "sqmc"}
        Monte Carlo or quasi-Monte Carlo driver for the parameter layer.
    inner : {"ekf", "enkf", "bpf"}
        Inner state-filter family (the EKF is the exact Kalman filter when
        the model is linear).
    n_particles : int
        Number of parameter particles N.
    ensemble_size : int or None
        Members per inner ensemble/particle filter (default: state dimension).
    jitter_mode : {"mixture", "always"}
        Move a fraction epsilon of particles with full spread, or all
        particles with spread shrinking as 1/sqrt(N).
    jitter_spread : float
        Jitter std per component as a fraction of the prior box width.
    jitter_epsilon : float or None
        Mixture-move probability (default 1/sqrt(N); capped at that value).
    cov_normalization : {"M", "M-1"}
        Ensemble covariance normalization.
    block_d_q : int or None
        Block size for the block-diagonal innovation-covariance inverse.
    block_threshold : int
        Use the block inverse only when d_y exceeds this.
    initial_state_mean, initial_state_cov
        Gaussian belief over the initial state (scalar cov means cov * I).
    key_mode : {"slot", "content"}
        How per-particle noise streams are keyed.
    random_state : int
        Seed for all randomness in the filter.

    Attributes
    ----------
    theta_mean_, theta_cov_ : posterior mean/covariance of the parameters
        (from the final weighted cloud, before resampling).
    state_mean_ : final posterior state predictor.
    summaries_ : list of per-step PosteriorSummary records.
    cloud_ : final resampled ParameterCloud.
    n_steps_ : number of assimilated observations.
    """

    def __init__(self, model=None, prior_box=None, outer="smc", inner="ekf",
                 n_particles=100, ensemble_size=None, jitter_mode="mixture",
                 jitter_spread=0.05, jitter_epsilon=None, cov_normalization="M",
                 block_d_q=None, block_threshold=50, initial_state_mean=None,
                 initial_state_cov=1.0, key_mode="slot", random_state=0):
        self.model = model
        self.prior_box = prior_box
        self.outer = outer
        self.inner = inner
        self.n_particles = n_particles
        self.ensemble_size = ensemble_size
        self.jitter_mode = jitter_mode
        self.jitter_spread = jitter_spread
        self.jitter_epsilon = jitter_epsilon
        self.cov_normalization = cov_normalization
        self.block_d_q = block_d_q
        self.block_threshold = block_threshold
        self.initial_state_mean = initial_state_mean
        self.initial_state_cov = initial_state_cov
        self.key_mode = key_mode
        self.random_state = random_state

    def _validate_setup(self):
        require(self.model is not None, "a forecast model is required")
        require(self.outer in ("smc", "sqmc"), f"unknown outer driver {self.outer!r}")
        require(self.inner in ("ekf", "enkf", "bpf"), f"unknown inner filter {self.inner!r}")
        require(self.n_particles >= 1, "n_particles must be positive")
        check_box(self.prior_box)

    def _inner_model(self):
        return as_inner_model(self.model)

    def _initial_belief_factory(self, inner_model):
        d_x = inner_model.d_x
        mean = (np.zeros(d_x) if self.initial_state_mean is None
                else np.asarray(self.initial_state_mean, dtype=float).ravel())
        require(mean.size == d_x, "initial_state_mean dimension mismatch")
        cov = np.asarray(self.initial_state_cov, dtype=float)
        cov = cov * np.eye(d_x) if cov.ndim == 0 else np.atleast_2d(cov)
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(d_x))
        m_size = self.ensemble_size if self.ensemble_size is not None else d_x

        if self.inner == "ekf":
            def factory(theta, prng):
                return EKFInner(inner_model, GaussianBelief(mean.copy(), cov.copy()))
        elif self.inner == "enkf":
            def factory(theta, prng):
                draws = mean[:, None] + chol @ prng.standard_normal((d_x, m_size))
                return EnKFInner(inner_model, EnsembleBelief(draws),
                                 self.cov_normalization, self.block_d_q,
                                 self.block_threshold)
        else:
            def factory(theta, prng):
                draws = mean[:, None] + chol @ prng.standard_normal((d_x, m_size))
                return BPFInner(inner_model, ParticleBelief(draws))
        return factory

    def _initialize(self):
        self._validate_setup()
        inner_model = self._inner_model()
        seed = int(self.random_state)
        self._seed = seed
        d_theta = len(self.prior_box)
        self._kernel = JitterKernel.for_box(self.prior_box, self.n_particles,
                                            mode=self.jitter_mode,
                                            spread=self.jitter_spread,
                                            epsilon=self.jitter_epsilon)
        factory = self._initial_belief_factory(inner_model)
        if self.outer == "sqmc":
            self._halton = HaltonStream(sqmc_stream_dimension(self._kernel))
            self._hilbert = HilbertMap.for_dimension(d_theta)
            self.cloud_ = init_cloud(self.n_particles, self.prior_box, factory,
                                     self._halton, seed)
            self._pending_uniforms = sqmc_init_uniform_block(self._halton, self.n_particles)
        else:
            self.cloud_ = init_cloud(self.n_particles, self.prior_box, factory,
                                     prior_generator(seed), seed)
        self.summaries_ = []
        self.n_steps_ = 0

    def partial_fit(self, y):
        """Assimilate a single observation vector."""
        if not hasattr(self, "cloud_") or self.cloud_ is None:
            self._initialize()
        y = np.asarray(y, dtype=float).ravel()
        if self.outer == "sqmc":
            self.cloud_, summary, self._pending_uniforms = sqmc_step(
                self.cloud_, y, self._kernel, self._halton, self._hilbert,
                self._pending_uniforms, self._seed, self.key_mode)
        else:
            self.cloud_, summary = nhf_step(self.cloud_, y, self._kernel,
                                            self._seed, self.key_mode)
        self.summaries_.append(summary)
        self.n_steps_ += 1
        self.theta_mean_ = summary.theta_mean
        self.theta_cov_ = summary.theta_cov
        self.state_mean_ = summary.state_predictor
        return self

    def fit(self, Y, X=None):
        """Assimilate a whole observation sequence (rows = instants)."""
        Y = check_array(Y, ensure_2d=True, dtype=float)
        self.cloud_ = None
        for row in Y:
            self.partial_fit(row)
        require(self.n_steps_ >= 1, "fit requires at least one observation")
        return self

    def predict_state(self):
        """Posterior state predictor and predictive mixture at the current step."""
        require(hasattr(self, "cloud_") and self.cloud_ is not None, "call fit first")
        return state_predictor(self.cloud_)

    def theta_samples(self):
        """Current (resampled, uniformly weighted) parameter particles."""
        require(hasattr(self, "cloud_") and self.cloud_ is not None, "call fit first")
        return self.cloud_.thetas.copy()

    def posterior_summary(self):
        """Posterior mean/cov recomputed from the current resampled cloud."""
        return posterior_mean(self.cloud_), posterior_cov(self.cloud_)
