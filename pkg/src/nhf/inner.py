"""State filters run conditionally on a fixed parameter vector.

Each filter consumes one observation at a time and produces (i) an updated
belief over the state and (ii) a likelihood estimate of the observation
under the parameter vector, which drives the outer importance weights.
Three belief representations are supported: mean+covariance (EKF / exact
Kalman on linear models), ensembles (perturbed-observation EnKF) and plain
particle clouds (bootstrap particle filter).  All likelihood arithmetic is
carried out in the log domain.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .models import RK4_NOISE_FACTOR, StateSpaceModel, propagate_m_steps, rk4_sde_step
from .validation import require

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianBelief:
    mean: NDArray
    cov: NDArray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = self.mean.size
        require(self.cov.shape == (d, d), "cov must be square, matching the mean dimension")
        self.cov = 0.5 * (self.cov + self.cov.T)

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())

    def state_bytes(self) -> bytes:
        return self.mean.tobytes() + self.cov.tobytes()


@dataclass
class EnsembleBelief:
    members: NDArray  # (d_x, M), columns are states

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        require(self.members.shape[1] >= 2, "an ensemble needs at least 2 members")

    @property
    def size(self) -> int:
        return self.members.shape[1]

    def mean(self) -> NDArray:
        return self.members.mean(axis=1)

    def cov(self, normalization: str = "M") -> NDArray:
        dev = self.members - self.mean()[:, None]
        denom = self.size if normalization == "M" else self.size - 1
        return (dev @ dev.T) / denom

    def copy(self) -> "EnsembleBelief":
        return EnsembleBelief(self.members.copy())

    def state_bytes(self) -> bytes:
        return self.members.tobytes()


@dataclass
class ParticleBelief:
    particles: NDArray  # (d_x, M)
    weights: NDArray = None

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if self.weights is None:
            m = self.particles.shape[1]
            self.weights = np.full(m, 1.0 / m)
        self.weights = np.asarray(self.weights, dtype=float).ravel()

    def mean(self) -> NDArray:
        return self.particles @ self.weights

    def copy(self) -> "ParticleBelief":
        return ParticleBelief(self.particles.copy(), self.weights.copy())

    def state_bytes(self) -> bytes:
        return self.particles.tobytes() + self.weights.tobytes()


@dataclass
class LikelihoodEstimate:
    """log u(theta) plus the predictive observation moments that produced it."""

    log_value: float
    predicted_obs_mean: NDArray = None
    predicted_obs_cov: NDArray = None
    diverged: bool = False

    def __post_init__(self):
        if np.isnan(self.log_value):
            self.log_value = -np.inf
            self.diverged = True


def _divergent_estimate() -> LikelihoodEstimate:
    return LikelihoodEstimate(log_value=-np.inf, diverged=True)


class SdeInnerModel:
    """Transition/observation interface backed by the stochastic RK4 integrator."""

    def __init__(self, model: StateSpaceModel):
        self.model = model
        self.d_x = model.d_x
        self.d_y = model.d_y
        self.obs_indices = model.observed_indices
        self.sigma_o = model.sigma_o
        self._eye = np.eye(model.d_x)
        self._q_eff = (model.m * model.h * model.sigma ** 2 * RK4_NOISE_FACTOR) * self._eye
        self._obs_cov = model.sigma_o ** 2 * np.eye(model.d_y)

    def propagate_mean(self, x, theta):
        return propagate_m_steps(x, self.model.drift, theta, self.model, rng=None)

    def propagate_stochastic(self, x, theta, rng):
        return propagate_m_steps(x, self.model.drift, theta, self.model, rng=rng)

    def propagate_jacobian(self, x, theta):
        """Deterministic m-step map together with its tangent (chained RK4)."""
        m = self.model
        x = np.asarray(x, dtype=float)
        eye = self._eye
        jac_total = eye
        h = m.h
        for _ in range(m.m):
            k1 = np.asarray(m.drift.evaluate(x, theta), dtype=float)
            a1 = m.drift.jacobian(x, theta)
            x1 = x + 0.5 * h * k1
            jx1 = eye + 0.5 * h * a1
            k2 = np.asarray(m.drift.evaluate(x1, theta), dtype=float)
            jk2 = m.drift.jacobian(x1, theta) @ jx1
            x2 = x + 0.5 * h * k2
            jx2 = eye + 0.5 * h * jk2
            k3 = np.asarray(m.drift.evaluate(x2, theta), dtype=float)
            jk3 = m.drift.jacobian(x2, theta) @ jx2
            x3 = x + h * k3
            jx3 = eye + h * jk3
            k4 = np.asarray(m.drift.evaluate(x3, theta), dtype=float)
            jk4 = m.drift.jacobian(x3, theta) @ jx3
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            jac_total = (eye + (h / 6.0) * (a1 + 2.0 * jk2 + 2.0 * jk3 + jk4)) @ jac_total
        return x, jac_total

    def process_noise_cov(self, theta=None) -> NDArray:
        return self._q_eff

    def obs_apply(self, x):
        return np.asarray(x, dtype=float)[self.obs_indices]

    def obs_cross(self, cov):
        return cov[:, self.obs_indices]

    def obs_gram(self, cov):
        return cov[np.ix_(self.obs_indices, self.obs_indices)]

    def obs_cov_matrix(self) -> NDArray:
        return self._obs_cov

    def obs_noise_draw(self, count, rng):
        return self.sigma_o * rng.standard_normal((self.d_y, count))

    def obs_logpdf_columns(self, y, predicted):
        """log N(y | column, sigma_o^2 I) for each column of ``predicted``."""
        resid = np.asarray(y, dtype=float)[:, None] - predicted
        return (
            -0.5 * self.d_y * (LOG_2PI + 2.0 * np.log(self.sigma_o))
            - 0.5 * (resid ** 2).sum(axis=0) / self.sigma_o ** 2
        )


class DiscreteLinearInnerModel:
    """x' = A(theta) x + q with q ~ N(0, Q); y = H x + r with r ~ N(0, R)."""

    def __init__(self, a_of_theta, q_cov, h_matrix, r_cov):
        self.a_of_theta = a_of_theta
        self.q_cov = np.atleast_2d(np.asarray(q_cov, dtype=float))
        self.h_matrix = np.atleast_2d(np.asarray(h_matrix, dtype=float))
        self.r_cov = np.atleast_2d(np.asarray(r_cov, dtype=float))
        self.d_y, self.d_x = self.h_matrix.shape
        self._q_chol = _safe_cholesky(self.q_cov)
        self._r_chol = _safe_cholesky(self.r_cov)

    def _a(self, theta) -> NDArray:
        return np.atleast_2d(np.asarray(self.a_of_theta(theta), dtype=float))

    def propagate_mean(self, x, theta):
        return self._a(theta) @ np.asarray(x, dtype=float)

    def propagate_stochastic(self, x, theta, rng):
        x = np.asarray(x, dtype=float)
        cols = 1 if x.ndim == 1 else x.shape[1]
        noise = self._q_chol @ rng.standard_normal((self.d_x, cols))
        return self._a(theta) @ x + (noise.ravel() if x.ndim == 1 else noise)

    def propagate_jacobian(self, x, theta):
        a = self._a(theta)
        return a @ np.asarray(x, dtype=float), a

    def process_noise_cov(self, theta=None) -> NDArray:
        return self.q_cov

    def obs_apply(self, x):
        return self.h_matrix @ np.asarray(x, dtype=float)

    def obs_cross(self, cov):
        return cov @ self.h_matrix.T

    def obs_gram(self, cov):
        return self.h_matrix @ cov @ self.h_matrix.T

    def obs_cov_matrix(self) -> NDArray:
        return self.r_cov

    def obs_noise_draw(self, count, rng):
        return self._r_chol @ rng.standard_normal((self.d_y, count))

    def obs_logpdf_columns(self, y, predicted):
        resid = np.asarray(y, dtype=float)[:, None] - predicted
        white = solve_triangular(self._r_chol, resid, lower=True)
        _, logdet = np.linalg.slogdet(self.r_cov)
        return -0.5 * (self.d_y * LOG_2PI + logdet + (white ** 2).sum(axis=0))


def _safe_cholesky(mat: NDArray) -> NDArray:
    """Cholesky factor tolerating PSD matrices (zero rows/cols allowed)."""
    mat = np.atleast_2d(mat)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(mat)
        vals = np.clip(vals, 0.0, None)
        return vecs * np.sqrt(vals)


def as_inner_model(model):
    if isinstance(model, (SdeInnerModel, DiscreteLinearInnerModel)):
        return model
    if isinstance(model, StateSpaceModel):
        return SdeInnerModel(model)
    raise TypeError(f"cannot interpret {type(model).__name__} as an inner-filter model")


def gaussian_logpdf(y, mean, cov) -> float:
    """log N(y | mean, cov) via Cholesky; raises LinAlgError if not SPD."""
    y = np.asarray(y, dtype=float).ravel()
    mean = np.asarray(mean, dtype=float).ravel()
    factor = cho_factor(cov, lower=True)
    resid = y - mean
    white = cho_solve(factor, resid)
    logdet = 2.0 * np.log(np.diag(factor[0])).sum()
    return float(-0.5 * (y.size * LOG_2PI + logdet + resid @ white))


def ekf_predict(belief: GaussianBelief, theta, model) -> GaussianBelief:
    """EKF time update: deterministic mean propagation, linearized covariance.

    Returns a belief with ``cov = J P J^T + Q_eff``; a non-finite propagation
    leaves the input unchanged apart from a NaN-free divergence marker (the
    subsequent update then reports likelihood -inf).
    """
    model = as_inner_model(model)
    mean, jac = model.propagate_jacobian(belief.mean, theta)
    if not (np.isfinite(mean).all() and np.isfinite(jac).all()):
        out = belief.copy()
        out.diverged = True
        return out
    cov = jac @ belief.cov @ jac.T + model.process_noise_cov(theta)
    out = GaussianBelief(mean, cov)
    out.diverged = False
    return out


def ekf_update(belief: GaussianBelief, y, model):
    """Kalman measurement update plus predictive log-likelihood.

    Returns ``(posterior_belief, estimate)``.  If the innovation covariance
    cannot be factorized the belief is returned unchanged with a divergent
    estimate.
    """
    model = as_inner_model(model)
    y = np.asarray(y, dtype=float).ravel()
    if getattr(belief, "diverged", False) or not np.isfinite(belief.mean).all():
        return belief, _divergent_estimate()
    obs_mean = model.obs_apply(belief.mean)
    s_mat = model.obs_gram(belief.cov) + model.obs_cov_matrix()
    try:
        factor = cho_factor(s_mat, lower=True)
    except np.linalg.LinAlgError:
        return belief, _divergent_estimate()
    cross = model.obs_cross(belief.cov)  # P H^T, (d_x, d_y)
    gain = cho_solve(factor, cross.T).T
    innovation = y - obs_mean
    mean = belief.mean + gain @ innovation
    cov = belief.cov - gain @ cross.T
    post = GaussianBelief(mean, cov)
    post.diverged = False
    logdet = 2.0 * np.log(np.diag(factor[0])).sum()
    white = cho_solve(factor, innovation)
    log_lik = float(-0.5 * (y.size * LOG_2PI + logdet + innovation @ white))
    return post, LikelihoodEstimate(log_lik, obs_mean, s_mat)


def enkf_predict(ens: EnsembleBelief, theta, model, rng) -> EnsembleBelief:
    """Propagate every ensemble member independently with fresh noise."""
    model = as_inner_model(model)
    return EnsembleBelief(model.propagate_stochastic(ens.members, theta, rng))


def enkf_update(ens: EnsembleBelief, y, model, rng, perturbations=None,
                cov_normalization: str = "M", block_d_q: int = None):
    """Perturbed-observation ensemble Kalman update with likelihood estimate.

    Deviations are taken around the unperturbed predicted observations, so
    the innovation covariance is the sampled H P H^T plus the measurement
    covariance added once; the random perturbations enter only through the
    update increment (y - g(X) - R).  Covariances are normalized by M (set
    ``cov_normalization='M-1'`` for the unbiased variant).  ``perturbations``
    lets tests inject the R matrix.  When ``block_d_q`` is given the
    innovation covariance is masked to diagonal blocks of that size before
    inversion, and the likelihood uses the same blocked matrix.
    """
    model = as_inner_model(model)
    y = np.asarray(y, dtype=float).ravel()
    members = ens.members
    m_size = ens.size
    norm = float(m_size if cov_normalization == "M" else m_size - 1)

    x_bar = members.mean(axis=1)
    x_dev = members - x_bar[:, None]
    g_members = model.obs_apply(members)
    if perturbations is None:
        perturbations = model.obs_noise_draw(m_size, rng)
    y_pert = g_members + perturbations
    z_dev = g_members - g_members.mean(axis=1)[:, None]

    cross = (x_dev @ z_dev.T) / norm                       # (d_x, d_y)
    s_mat = (z_dev @ z_dev.T) / norm + model.obs_cov_matrix()
    if block_d_q is not None:
        s_mat = _block_mask(s_mat, block_d_q)
    try:
        if block_d_q is not None:
            s_inv = block_diag_inverse(s_mat, block_d_q)
            gain = cross @ s_inv
        else:
            factor = cho_factor(s_mat, lower=True)
            gain = cho_solve(factor, cross.T).T
        log_lik = gaussian_logpdf(y, model.obs_apply(x_bar), s_mat)
    except (np.linalg.LinAlgError, ValueError):
        return ens, _divergent_estimate()
    updated = members + gain @ (y[:, None] - y_pert)
    if not np.isfinite(updated).all():
        return ens, _divergent_estimate()
    return EnsembleBelief(updated), LikelihoodEstimate(log_lik, model.obs_apply(x_bar), s_mat)


def _block_mask(s_mat: NDArray, d_q: int) -> NDArray:
    d_y = s_mat.shape[0]
    require(d_q >= 1 and d_y % d_q == 0, f"block size {d_q} must divide d_y={d_y}")
    out = np.zeros_like(s_mat)
    for start in range(0, d_y, d_q):
        sl = slice(start, start + d_q)
        out[sl, sl] = s_mat[sl, sl]
    return out


def block_diag_inverse(s_mat, d_q: int) -> NDArray:
    """Invert a covariance after masking it to diagonal blocks of size d_q.

    Off-block entries are zeroed; each block is inverted independently, so
    the cost is O((d_y/d_q) * d_q^3).  Raises if d_q does not divide d_y or
    if a block is singular (the error names the block).
    """
    s_mat = np.atleast_2d(np.asarray(s_mat, dtype=float))
    d_y = s_mat.shape[0]
    require(s_mat.shape == (d_y, d_y), "S must be square")
    require(d_q >= 1 and d_y % d_q == 0, f"block size {d_q} must divide d_y={d_y}")
    out = np.zeros_like(s_mat)
    for q, start in enumerate(range(0, d_y, d_q)):
        sl = slice(start, start + d_q)
        try:
            out[sl, sl] = np.linalg.inv(s_mat[sl, sl])
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"diagonal block {q} of S is singular") from exc
    return out


def bpf_step(particles, weights, theta, y, model, rng):
    """One bootstrap particle filter step: propagate, weight, resample.

    Returns ``(particles, weights, estimate)`` with uniform output weights.
    The likelihood estimate is the weighted mean of the per-particle
    observation densities.  If every density underflows to zero the
    particles are kept with uniform weights and the estimate is divergent.
    """
    model = as_inner_model(model)
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    m_size = particles.shape[1]
    require(m_size >= 2, "bootstrap filter needs at least 2 particles")
    weights = np.asarray(weights, dtype=float).ravel()
    require(weights.size == m_size, "weights must match the particle count")

    propagated = model.propagate_stochastic(particles, theta, rng)
    log_dens = model.obs_logpdf_columns(np.asarray(y, dtype=float).ravel(),
                                        model.obs_apply(propagated))
    with np.errstate(divide="ignore"):
        log_terms = log_dens + np.log(weights)
    uniform = np.full(m_size, 1.0 / m_size)
    if not np.isfinite(log_terms).any():
        return propagated, uniform, _divergent_estimate()
    shift = log_terms.max()
    scaled = np.exp(log_terms - shift)
    log_lik = float(shift + np.log(scaled.sum()))
    post_w = scaled / scaled.sum()
    idx = np.searchsorted(np.cumsum(post_w), rng.random(m_size), side="left")
    idx = np.minimum(idx, m_size - 1)
    return propagated[:, idx], uniform, LikelihoodEstimate(log_lik)


class EKFInner:
    """Stateful EKF (exact Kalman when the model is linear)."""

    kind = "ekf"

    def __init__(self, model, belief: GaussianBelief):
        self.model = as_inner_model(model)
        self.belief = belief

    def predict(self, theta, rng=None):
        self.belief = ekf_predict(self.belief, theta, self.model)

    def update(self, y, rng=None) -> LikelihoodEstimate:
        self.belief, estimate = ekf_update(self.belief, y, self.model)
        return estimate

    def state_mean(self):
        return self.belief.mean

    def state_cov(self):
        return self.belief.cov

    def copy(self):
        return EKFInner(self.model, self.belief.copy())

    def state_bytes(self) -> bytes:
        return self.belief.state_bytes()


class EnKFInner:
    """Stateful perturbed-observation EnKF."""

    kind = "enkf"

    def __init__(self, model, belief: EnsembleBelief, cov_normalization: str = "M",
                 block_d_q: int = None, block_threshold: int = 50):
        self.model = as_inner_model(model)
        self.belief = belief
        self.cov_normalization = cov_normalization
        self.block_d_q = block_d_q
        self.block_threshold = block_threshold

    def _effective_block(self):
        if self.model.d_y <= self.block_threshold:
            return None
        d_q = self.block_d_q if self.block_d_q is not None else min(self.model.d_y, 5)
        return d_q if self.model.d_y % d_q == 0 else None

    def predict(self, theta, rng):
        self.belief = enkf_predict(self.belief, theta, self.model, rng)

    def update(self, y, rng) -> LikelihoodEstimate:
        self.belief, estimate = enkf_update(
            self.belief, y, self.model, rng,
            cov_normalization=self.cov_normalization,
            block_d_q=self._effective_block(),
        )
        return estimate

    def state_mean(self):
        return self.belief.mean()

    def state_cov(self):
        return self.belief.cov(self.cov_normalization)

    def copy(self):
        return EnKFInner(self.model, self.belief.copy(), self.cov_normalization,
                         self.block_d_q, self.block_threshold)

    def state_bytes(self) -> bytes:
        return self.belief.state_bytes()


class BPFInner:
    """Stateful bootstrap particle filter (predict folded into update)."""

    kind = "bpf"

    def __init__(self, model, belief: ParticleBelief):
        self.model = as_inner_model(model)
        self.belief = belief
        self._pending_theta = None

    def predict(self, theta, rng=None):
        # The bootstrap proposal propagates and weights in one pass; stash
        # the parameter so update() can run the combined step.
        self._pending_theta = np.asarray(theta, dtype=float)

    def update(self, y, rng) -> LikelihoodEstimate:
        particles, weights, estimate = bpf_step(
            self.belief.particles, self.belief.weights, self._pending_theta, y,
            self.model, rng)
        self.belief = ParticleBelief(particles, weights)
        return estimate

    def state_mean(self):
        return self.belief.mean()

    def state_cov(self):
        dev = self.belief.particles - self.state_mean()[:, None]
        return (dev * self.belief.weights) @ dev.T

    def copy(self):
        clone = BPFInner(self.model, self.belief.copy())
        clone._pending_theta = self._pending_theta
        return clone

    def state_bytes(self) -> bytes:
        return self.belief.state_bytes()


def content_digest(theta, inner_filter) -> bytes:
    """Stable digest of a particle's parameter and belief content."""
    h = hashlib.blake2b(digest_size=16)
    h.update(np.asarray(theta, dtype=float).tobytes())
    h.update(inner_filter.state_bytes())
    return h.digest()
