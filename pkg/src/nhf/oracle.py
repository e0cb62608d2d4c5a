"""Independent reference computations for tests and acceptance checks.

An exact Kalman filter for linear-Gaussian models and a dense grid
posterior over a scalar parameter.  These are deliberately written in the
most direct textbook form and share no code with the filters they check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from .validation import require


@dataclass
class LinearGaussianModel:
    """x_n = A x_{n-1} + q,  y_n = H x_n + r, with Gaussian prior on x_0.

    ``a_matrix`` may be a constant matrix or a callable theta -> matrix for
    families indexed by a scalar parameter.
    """

    a_matrix: object
    q_cov: NDArray
    h_matrix: NDArray
    r_cov: NDArray
    prior_mean: NDArray
    prior_cov: NDArray

    def __post_init__(self):
        self.q_cov = np.atleast_2d(np.asarray(self.q_cov, dtype=float))
        self.h_matrix = np.atleast_2d(np.asarray(self.h_matrix, dtype=float))
        self.r_cov = np.atleast_2d(np.asarray(self.r_cov, dtype=float))
        self.prior_mean = np.asarray(self.prior_mean, dtype=float).ravel()
        self.prior_cov = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
        require(np.linalg.det(self.r_cov) > 0, "R must be invertible")

    def transition(self, theta=None) -> NDArray:
        a = self.a_matrix(theta) if callable(self.a_matrix) else self.a_matrix
        return np.atleast_2d(np.asarray(a, dtype=float))

    def simulate(self, n_steps: int, rng, theta=None):
        """Draw a state/observation sequence; returns (states, observations)."""
        a = self.transition(theta)
        d_x = self.prior_mean.size
        d_y = self.h_matrix.shape[0]
        q_chol = np.linalg.cholesky(self.q_cov + 1e-300 * np.eye(d_x))
        r_chol = np.linalg.cholesky(self.r_cov)
        x = self.prior_mean + np.linalg.cholesky(
            self.prior_cov + 1e-300 * np.eye(d_x)) @ rng.standard_normal(d_x)
        xs = np.empty((n_steps, d_x))
        ys = np.empty((n_steps, d_y))
        for n in range(n_steps):
            x = a @ x + q_chol @ rng.standard_normal(d_x)
            xs[n] = x
            ys[n] = self.h_matrix @ x + r_chol @ rng.standard_normal(d_y)
        return xs, ys


def kalman_filter(model: LinearGaussianModel, observations, theta=None):
    """Exact Kalman recursion over an observation sequence.

    Returns ``(means, covs, log_likelihoods)`` where entry n holds the
    filtering moments after assimilating observation n and the predictive
    log-likelihood log N(y_n | H x pred, H P pred H^T + R).
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    a = model.transition(theta)
    h = model.h_matrix
    mean = model.prior_mean.copy()
    cov = model.prior_cov.copy()
    n_steps = observations.shape[0]
    d_x = mean.size
    means = np.empty((n_steps, d_x))
    covs = np.empty((n_steps, d_x, d_x))
    log_liks = np.empty(n_steps)
    for n in range(n_steps):
        mean = a @ mean
        cov = a @ cov @ a.T + model.q_cov
        s_mat = h @ cov @ h.T + model.r_cov
        s_det = np.linalg.det(s_mat)
        if not s_det > 0:
            raise np.linalg.LinAlgError(f"singular innovation covariance at step {n}")
        s_inv = np.linalg.inv(s_mat)
        innovation = observations[n] - h @ mean
        gain = cov @ h.T @ s_inv
        mean = mean + gain @ innovation
        cov = cov - gain @ h @ cov
        cov = 0.5 * (cov + cov.T)
        log_liks[n] = -0.5 * (
            innovation.size * np.log(2.0 * np.pi)
            + np.log(s_det)
            + innovation @ s_inv @ innovation
        )
        means[n] = mean
        covs[n] = cov
    return means, covs, log_liks


def grid_posterior(theta_grid, model_family, observations, log_prior=None):
    """Posterior weights over a parameter grid from exact per-node likelihoods.

    ``model_family`` maps a grid value to a LinearGaussianModel (or the grid
    value is passed through as theta to a shared model via callable
    ``a_matrix``).  Weights are computed in the log domain and normalized.
    """
    theta_grid = np.asarray(theta_grid, dtype=float).ravel()
    require(theta_grid.size >= 1, "grid must be nonempty")
    log_w = np.empty(theta_grid.size)
    for g, theta in enumerate(theta_grid):
        model = model_family(theta) if not isinstance(model_family, LinearGaussianModel) \
            else model_family
        _, _, log_liks = kalman_filter(model, observations,
                                       theta=theta if isinstance(model_family, LinearGaussianModel) else None)
        log_w[g] = log_liks.sum()
    if log_prior is not None:
        log_w = log_w + np.asarray(log_prior, dtype=float).ravel()
    return np.exp(log_w - logsumexp(log_w))
