"""Parameter-layer engines for nested hybrid filtering.

A cloud of N weighted parameter particles is propagated recursively: each
particle is jittered by a Markov kernel, scored by the likelihood estimate
of its embedded state filter, and the cloud is resampled.  Two resampling
drivers are provided: multinomial sampling (sequential Monte Carlo) and an
inverse-CDF scheme over Hilbert-sorted particles fed by a Halton point set
(sequential quasi-Monte Carlo).

Randomness policy: every particle gets its own generator seeded from
(global seed, step, particle key), so results are independent of execution
order; the resampling stage uses one sequential per-step stream.  Particle
keys are slot indices by default, or content digests when order-insensitive
output is required.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import ceil, sqrt

import numpy as np
from numpy.random import Generator, PCG64, SeedSequence
from numpy.typing import NDArray

from .inner import content_digest, gaussian_logpdf
from .qmc import HaltonStream, HilbertMap, gaussian_block_from_uniform, hilbert_sort
from .validation import check_box, check_weights, require

_SEED_PRIOR = 0x11
_SEED_OUTER = 0x22
_SEED_INNER = 0x33
_MASK64 = (1 << 64) - 1


@dataclass
class ParameterCloud:
    """Weighted parameter particles, each paired with an inner-filter state."""

    thetas: NDArray               # (N, d_theta)
    weights: NDArray              # (N,), on the simplex
    inner_filters: list
    step: int = 0

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        n = self.thetas.shape[0]
        self.weights = check_weights(self.weights, n, tol=1e-9)
        require(len(self.inner_filters) == n, "one inner filter per particle required")

    @property
    def n_particles(self) -> int:
        return self.thetas.shape[0]

    @property
    def d_theta(self) -> int:
        return self.thetas.shape[1]


@dataclass
class JitterKernel:
    """Markov kernel perturbing parameter particles inside a prior box.

    mixture mode: each particle is moved with probability ``epsilon`` by
    additive N(0, diag(jitter_std^2)) noise and copied otherwise; epsilon
    may not exceed 1/sqrt(N).  always mode: every particle is moved with
    per-component std ``jitter_std / sqrt(N)``.  Proposals are reflected
    into the prior box.
    """

    jitter_std: NDArray
    prior_lo: NDArray
    prior_hi: NDArray
    n_particles: int
    mode: str = "mixture"
    epsilon: float = None

    def __post_init__(self):
        self.jitter_std = np.asarray(self.jitter_std, dtype=float).ravel()
        self.prior_lo = np.asarray(self.prior_lo, dtype=float).ravel()
        self.prior_hi = np.asarray(self.prior_hi, dtype=float).ravel()
        require(self.mode in ("mixture", "always"), f"unknown jitter mode {self.mode!r}")
        require((self.jitter_std >= 0).all(), "jitter_std must be nonnegative")
        require(self.n_particles >= 1, "n_particles must be positive")
        if self.epsilon is None:
            self.epsilon = 1.0 / sqrt(self.n_particles)
        require(0.0 < self.epsilon <= 1.0, "epsilon must lie in (0, 1]")
        if self.mode == "mixture":
            require(self.epsilon <= 1.0 / sqrt(self.n_particles) + 1e-12,
                    "mixture-mode epsilon may not exceed 1/sqrt(N)")

    @property
    def d_theta(self) -> int:
        return self.jitter_std.size

    @staticmethod
    def for_box(box, n_particles: int, mode: str = "mixture", spread: float = 0.05,
                epsilon: float = None) -> "JitterKernel":
        lo, hi = check_box(box)
        return JitterKernel(jitter_std=spread * (hi - lo), prior_lo=lo, prior_hi=hi,
                            n_particles=n_particles, mode=mode, epsilon=epsilon)

    def uniforms_needed(self) -> int:
        """Uniform variates consumed per particle when driven by a QMC point."""
        pairs = 2 * ceil(self.d_theta / 2)
        return pairs + (1 if self.mode == "mixture" else 0)

    def _scaled_noise(self, gaussians) -> NDArray:
        if self.mode == "mixture":
            return self.jitter_std * gaussians
        return (self.jitter_std / sqrt(self.n_particles)) * gaussians

    def propose(self, theta, rng: Generator) -> NDArray:
        """Jitter one particle using a pseudo-random generator."""
        theta = np.asarray(theta, dtype=float)
        if self.mode == "mixture":
            move = rng.random() < self.epsilon
            noise = self._scaled_noise(rng.standard_normal(self.d_theta)) if move else 0.0
        else:
            noise = self._scaled_noise(rng.standard_normal(self.d_theta))
        return reflect_into_box(theta + noise, self.prior_lo, self.prior_hi)

    def propose_from_uniforms(self, theta, uniforms) -> NDArray:
        """Jitter one particle using a row of QMC uniforms (Box-Muller pairs)."""
        theta = np.asarray(theta, dtype=float)
        uniforms = np.asarray(uniforms, dtype=float).ravel()
        require(uniforms.size >= self.uniforms_needed(),
                f"kernel needs {self.uniforms_needed()} uniforms, got {uniforms.size}")
        if self.mode == "mixture":
            move = uniforms[0] < self.epsilon
            u_pairs = uniforms[1:1 + 2 * ceil(self.d_theta / 2)]
        else:
            move = True
            u_pairs = uniforms[: 2 * ceil(self.d_theta / 2)]
        if not move:
            return theta.copy()
        gaussians = gaussian_block_from_uniform(u_pairs[None, :]).ravel()[: self.d_theta]
        return reflect_into_box(theta + self._scaled_noise(gaussians),
                                self.prior_lo, self.prior_hi)


def reflect_into_box(x, lo, hi) -> NDArray:
    """Fold a point back into [lo, hi] by reflection at the walls."""
    x = np.asarray(x, dtype=float)
    width = hi - lo
    folded = np.mod(x - lo, 2.0 * width)
    folded = np.where(folded > width, 2.0 * width - folded, folded)
    return lo + folded


def draw_prior(n: int, box, source) -> NDArray:
    """Draw N parameter vectors uniformly over a box.

    ``source`` is either a numpy Generator or a HaltonStream; Halton
    components are mapped affinely into the box (using the first d_theta
    stream dimensions).
    """
    lo, hi = check_box(box)
    d = lo.size
    if isinstance(source, HaltonStream):
        require(source.dimension >= d, "Halton stream dimension below parameter dimension")
        u = source.next_block(n)[:, :d]
    else:
        u = source.random((n, d))
    return lo + (hi - lo) * u


def jitter(thetas, kernel: JitterKernel, source) -> NDArray:
    """Propose jittered parameters for a whole cloud.

    ``source`` is a Generator (pseudo-random path), or a (N, k) uniform
    block for the QMC path.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if isinstance(source, Generator):
        return np.array([kernel.propose(t, source) for t in thetas])
    source = np.atleast_2d(np.asarray(source, dtype=float))
    require(source.shape[0] == thetas.shape[0], "one uniform row per particle required")
    return np.array([kernel.propose_from_uniforms(t, u) for t, u in zip(thetas, source)])


def multinomial_resample(weights, rng: Generator) -> NDArray:
    """N i.i.d. categorical draws from a simplex weight vector."""
    w = check_weights(weights)
    n = w.size
    cum = np.cumsum(w)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, rng.random(n), side="left")
    return np.minimum(idx, n - 1)


def sorted_uniform_resample(weights_sorted, uniforms_sorted) -> NDArray:
    """Inverse-CDF selection: slot i takes the particle j whose cumulative
    weight bracket contains the i-th sorted uniform."""
    cum = np.cumsum(weights_sorted)
    cum[-1] = max(cum[-1], 1.0)
    idx = np.searchsorted(cum, uniforms_sorted, side="left")
    return np.minimum(idx, weights_sorted.size - 1)


def normalize_log_weights(log_u) -> tuple[NDArray, bool]:
    """Log-sum-exp normalization; returns (weights, degenerate_flag)."""
    log_u = np.asarray(log_u, dtype=float)
    finite = np.isfinite(log_u)
    n = log_u.size
    if not finite.any():
        return np.full(n, 1.0 / n), True
    shift = log_u[finite].max()
    w = np.exp(np.where(finite, log_u - shift, -np.inf))
    return w / w.sum(), False


@dataclass
class PredictiveMixture:
    """Mixture of per-particle state beliefs; densities built on demand."""

    weights: NDArray
    means: NDArray
    _filters: list = field(repr=False, default=None)

    def component_cov(self, i: int) -> NDArray:
        return self._filters[i].state_cov()

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float).ravel()
        terms = np.full(self.weights.size, -np.inf)
        for i, w in enumerate(self.weights):
            if w <= 0.0:
                continue
            terms[i] = np.log(w) + gaussian_logpdf(x, self.means[i], self.component_cov(i))
        shift = terms.max()
        if not np.isfinite(shift):
            return -np.inf
        return float(shift + np.log(np.exp(terms - shift).sum()))

    def pdf(self, x) -> float:
        return float(np.exp(self.logpdf(x)))


@dataclass
class PosteriorSummary:
    """Per-step posterior digest emitted by the recursive filters."""

    step: int
    theta_mean: NDArray
    theta_cov: NDArray
    state_predictor: NDArray
    mse_per_dim: float = None
    log_weight_scale: float = None   # max finite log-likelihood, for diagnostics
    flags: list = field(default_factory=list)


def posterior_mean(cloud: ParameterCloud) -> NDArray:
    return cloud.weights @ cloud.thetas


def posterior_cov(cloud: ParameterCloud) -> NDArray:
    mean = posterior_mean(cloud)
    dev = cloud.thetas - mean
    return (dev * cloud.weights[:, None]).T @ dev


def state_predictor(cloud: ParameterCloud):
    """Weighted average of inner state means plus the predictive mixture."""
    means = np.array([f.state_mean() for f in cloud.inner_filters])
    x_hat = cloud.weights @ means
    return x_hat, PredictiveMixture(cloud.weights.copy(), means, cloud.inner_filters)


def _weighted_summary(step, thetas, weights, filters, flags, log_scale) -> PosteriorSummary:
    mean = weights @ thetas
    dev = thetas - mean
    cov = (dev * weights[:, None]).T @ dev
    means = np.array([f.state_mean() for f in filters])
    x_hat = weights @ means
    return PosteriorSummary(step=step, theta_mean=mean, theta_cov=cov,
                            state_predictor=x_hat, log_weight_scale=log_scale, flags=flags)


def _particle_generator(seed: int, step: int, key_words) -> Generator:
    return Generator(PCG64(SeedSequence([seed & _MASK64, _SEED_INNER, step, *key_words])))


def outer_generator(seed: int, step: int) -> Generator:
    return Generator(PCG64(SeedSequence([seed & _MASK64, _SEED_OUTER, step])))


def prior_generator(seed: int) -> Generator:
    return Generator(PCG64(SeedSequence([seed & _MASK64, _SEED_PRIOR])))


def _particle_keys(cloud: ParameterCloud, key_mode: str):
    """Per-particle seed-key tuples: slot indices or content digests."""
    if key_mode == "slot":
        return [(i,) for i in range(cloud.n_particles)]
    require(key_mode == "content", f"unknown key mode {key_mode!r}")
    seen: dict[bytes, int] = {}
    keys = []
    for theta, filt in zip(cloud.thetas, cloud.inner_filters):
        digest = content_digest(theta, filt)
        occurrence = seen.get(digest, 0)
        seen[digest] = occurrence + 1
        words = struct.unpack("<4I", digest)
        keys.append((*words, occurrence))
    return keys


def _score_particles(cloud, proposals, y, seed, step, keys):
    """Run inner predict/update for every proposed particle; returns
    (new_filters, log_likelihoods)."""
    filters = []
    log_u = np.empty(cloud.n_particles)
    for i in range(cloud.n_particles):
        prng = _particle_generator(seed, step, keys[i])
        filt = cloud.inner_filters[i].copy()
        filt.predict(proposals[i], prng)
        estimate = filt.update(np.asarray(y, dtype=float).ravel(), prng)
        log_u[i] = estimate.log_value
        filters.append(filt)
    return filters, log_u


def nhf_step(cloud: ParameterCloud, y, kernel: JitterKernel, seed: int,
             key_mode: str = "slot"):
    """One Monte Carlo recursive step: jitter, score, weight, resample.

    Returns ``(new_cloud, summary)``.  The summary is computed from the
    weighted pre-resampling cloud; the output cloud carries uniform weights.
    Each particle's stream drives its jitter draw and then its inner-filter
    noise, so particles can be processed in any order.
    """
    step = cloud.step + 1
    n = cloud.n_particles
    keys = _particle_keys(cloud, key_mode)
    y = np.asarray(y, dtype=float).ravel()
    proposals = np.empty_like(cloud.thetas)
    filters = []
    log_u = np.empty(n)
    for i in range(n):
        prng = _particle_generator(seed, step, keys[i])
        proposals[i] = kernel.propose(cloud.thetas[i], prng)
        filt = cloud.inner_filters[i].copy()
        filt.predict(proposals[i], prng)
        log_u[i] = filt.update(y, prng).log_value
        filters.append(filt)
    weights, degenerate = normalize_log_weights(log_u)
    flags = ["degenerate_weights"] if degenerate else []
    finite = log_u[np.isfinite(log_u)]
    summary = _weighted_summary(step, proposals, weights, filters, flags,
                                float(finite.max()) if finite.size else -np.inf)
    idx = multinomial_resample(weights, outer_generator(seed, step))
    new_cloud = ParameterCloud(
        thetas=proposals[idx].copy(),
        weights=np.full(n, 1.0 / n),
        inner_filters=[filters[j].copy() for j in idx],
        step=step,
    )
    return new_cloud, summary


def sqmc_step(cloud: ParameterCloud, y, kernel: JitterKernel, halton: HaltonStream,
              hilbert: HilbertMap, jitter_uniforms, seed: int, key_mode: str = "slot"):
    """One quasi-Monte Carlo recursive step.

    ``jitter_uniforms`` is the (N, k) uniform block reserved for this step's
    jitter (the permuted remainder of the previous step's point set, or the
    initialization block at the first step).  Returns ``(new_cloud, summary,
    next_jitter_uniforms)``.
    """
    step = cloud.step + 1
    n = cloud.n_particles
    keys = _particle_keys(cloud, key_mode)
    proposals = jitter(cloud.thetas, kernel, jitter_uniforms)
    filters, log_u = _score_particles(cloud, proposals, y, seed, step, keys)
    weights, degenerate = normalize_log_weights(log_u)
    flags = ["degenerate_weights"] if degenerate else []
    finite = log_u[np.isfinite(log_u)]
    summary = _weighted_summary(step, proposals, weights, filters, flags,
                                float(finite.max()) if finite.size else -np.inf)

    sort_perm = hilbert_sort(proposals, weights, hilbert)
    point_set = halton.next_block(n)
    scalars = point_set[:, 0]
    remainder = point_set[:, 1:]
    uniform_perm = np.argsort(scalars, kind="stable")
    slots = sorted_uniform_resample(weights[sort_perm], scalars[uniform_perm])
    selected = sort_perm[slots]
    new_cloud = ParameterCloud(
        thetas=proposals[selected].copy(),
        weights=np.full(n, 1.0 / n),
        inner_filters=[filters[j].copy() for j in selected],
        step=step,
    )
    return new_cloud, summary, remainder[uniform_perm]


def init_cloud(n: int, box, inner_factory, source, seed: int) -> ParameterCloud:
    """Draw the initial parameter cloud and build one inner filter per particle.

    ``inner_factory(theta, rng)`` returns a fresh inner filter; its rng is a
    per-particle stream keyed by (seed, step 0, slot).
    """
    thetas = draw_prior(n, box, source)
    filters = [
        inner_factory(thetas[i], _particle_generator(seed, 0, (i,)))
        for i in range(n)
    ]
    return ParameterCloud(thetas=thetas, weights=np.full(n, 1.0 / n),
                          inner_filters=filters, step=0)


def sqmc_stream_dimension(kernel: JitterKernel) -> int:
    """Point-set dimension for the SQMC driver: one resampling scalar plus
    the kernel's per-particle uniform demand."""
    return 1 + kernel.uniforms_needed()


def sqmc_init_uniform_block(halton: HaltonStream, n: int) -> NDArray:
    """Jitter uniforms for the first recursive step (drops the scalar part)."""
    return halton.next_block(n)[:, 1:]
