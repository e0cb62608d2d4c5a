"""State-space models, stochastic integrators and the observation operator.

The truth model is a stochastic two-scale Lorenz 96 system: ``d_x`` slow
variables arranged on a ring, each coupled to ``L`` fast variables.  The
forecast model replaces the unresolved fast coupling by a degree-2
polynomial in each slow variable, with coefficients estimated jointly with
the forcing.  Continuous dynamics are discretized either with
Euler-Maruyama or with a 4th-order Runge-Kutta scheme that injects a
Gaussian perturbation at every intermediate stage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.random import Generator, SeedSequence
from numpy.typing import NDArray

from .validation import check_finite_vector, require

# Variance of the RK4 stage-noise combination (1 + 4 + 4 + 1) / 36, i.e. the
# one-step output noise variance is RK4_NOISE_FACTOR * sigma^2 * h at leading
# order in h.  Used for the EKF process-noise accumulation and in tests.
RK4_NOISE_FACTOR = 10.0 / 36.0

_SEED_TRUTH = 0x7A55


@dataclass(frozen=True)
class TwoScaleLorenzParams:
    """Fixed parameters of the two-scale Lorenz 96 truth model."""

    F: float
    C: float
    H: float
    B: float
    d_x: int
    L: int

    def __post_init__(self):
        require(self.d_x >= 4, "d_x must be at least 4 (drift references x[j-2] and x[j+1])")
        require(self.L >= 1, "L must be a positive integer")
        require(self.C != 0.0 and self.B != 0.0, "C and B must be nonzero")


@dataclass(frozen=True)
class AnsatzParams:
    """Forecast-model parameters: forcing F and polynomial coefficients a1, a2."""

    F: float
    a1: float
    a2: float

    def __post_init__(self):
        require(np.isfinite([self.F, self.a1, self.a2]).all(), "ansatz parameters must be finite")

    @staticmethod
    def from_vector(theta) -> "AnsatzParams":
        theta = np.asarray(theta, dtype=float).ravel()
        require(theta.size == 3, "ansatz parameter vector must have 3 components (F, a1, a2)")
        return AnsatzParams(float(theta[0]), float(theta[1]), float(theta[2]))


def lorenz96_two_scale_drift(x, z, params: TwoScaleLorenzParams, fast_ring: str = "global"):
    """Drift of the two-scale Lorenz 96 system.

    Parameters
    ----------
    x : array of shape (d_x,) or (d_x, M)
        Slow variables (columns are independent states when 2-d).
    z : array of shape (d_x*L,) or (d_x*L, M)
        Fast variables on the same layout.
    params : TwoScaleLorenzParams
    fast_ring : {"global", "per_block"}
        Whether fast indices wrap around one ring of length d_x*L or within
        each block of L variables.

    Returns
    -------
    (dx, dz) : time derivatives with the shapes of ``x`` and ``z``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    d, L = params.d_x, params.L
    require(x.shape[0] == d, f"x has {x.shape[0]} slow components, expected {d}")
    require(z.shape[0] == d * L, f"z has {z.shape[0]} fast components, expected {d * L}")
    require(x.shape[1:] == z.shape[1:], "x and z batch shapes must agree")

    coupling = params.H * params.C / params.B
    block_sum = z.reshape(d, L, *z.shape[1:]).sum(axis=1)
    dx = (
        -np.roll(x, 1, axis=0) * (np.roll(x, 2, axis=0) - np.roll(x, -1, axis=0))
        - x
        + params.F
        - coupling * block_sum
    )

    if fast_ring == "global":
        zp1 = np.roll(z, -1, axis=0)
        zp2 = np.roll(z, -2, axis=0)
        zm1 = np.roll(z, 1, axis=0)
    elif fast_ring == "per_block":
        zb = z.reshape(d, L, *z.shape[1:])
        zp1 = np.roll(zb, -1, axis=1).reshape(z.shape)
        zp2 = np.roll(zb, -2, axis=1).reshape(z.shape)
        zm1 = np.roll(zb, 1, axis=1).reshape(z.shape)
    else:
        raise ValueError(f"unknown fast_ring mode: {fast_ring!r}")

    x_owner = np.repeat(x, L, axis=0)
    dz = (
        -params.C * params.B * zp1 * (zp2 - zm1)
        - params.C * z
        + params.C * params.F / params.B
        + coupling * x_owner
    )
    return dx, dz


def ansatz_drift(x, params: AnsatzParams):
    """Forecast-model drift: Lorenz 96 advection plus polynomial coupling term.

    Component j is ``-x[j-1]*(x[j-2] - x[j+1]) - x[j] + F - (a1*x[j]**2 + a2*x[j])``
    with circular indexing.
    """
    x = np.asarray(x, dtype=float)
    return (
        -np.roll(x, 1, axis=0) * (np.roll(x, 2, axis=0) - np.roll(x, -1, axis=0))
        - x
        + params.F
        - (params.a1 * x * x + params.a2 * x)
    )


_CYCLIC_INDEX_CACHE: dict = {}


def _cyclic_indices(d: int):
    cached = _CYCLIC_INDEX_CACHE.get(d)
    if cached is None:
        rows = np.arange(d)
        cached = (rows, (rows - 1) % d, (rows - 2) % d, (rows + 1) % d)
        _CYCLIC_INDEX_CACHE[d] = cached
    return cached


def ansatz_drift_jacobian(x, params: AnsatzParams) -> NDArray:
    """Analytic Jacobian of :func:`ansatz_drift` (cyclic sparse structure).

    The four column offsets (0, -1, -2, +1 modulo d) are pairwise distinct
    for d >= 4, so each band is written with one fancy assignment.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    rows, cm1, cm2, cp1 = _cyclic_indices(d)
    xm1 = x[cm1]
    jac = np.zeros((d, d))
    jac[rows, rows] = -1.0 - 2.0 * params.a1 * x - params.a2
    jac[rows, cm1] = x[cp1] - x[cm2]
    jac[rows, cm2] = -xm1
    jac[rows, cp1] = xm1
    return jac


class DriftField:
    """Deterministic drift of an SDE: maps (state, parameters) to a velocity.

    Subclasses set ``dimension`` and ``parameter_dimension`` and implement
    :meth:`evaluate`.  ``evaluate`` must be pure and accept states of shape
    ``(dimension,)`` or ``(dimension, M)`` (column-wise batches).
    """

    dimension: int
    parameter_dimension: int

    def evaluate(self, x, theta):
        raise NotImplementedError

    def jacobian(self, x, theta):
        """d(evaluate)/dx at ``x``; finite differences unless overridden."""
        return finite_difference_jacobian(lambda v: self.evaluate(v, theta), np.asarray(x, float))


def finite_difference_jacobian(fun, x, rel_step: float = 1e-6) -> NDArray:
    """Central-difference Jacobian with per-component step ``rel_step*(1+|x_j|)``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    jac = np.empty((d, d))
    for j in range(d):
        step = rel_step * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        jac[:, j] = (fun(xp) - fun(xm)) / (2.0 * step)
    return jac


class PolynomialAnsatzField(DriftField):
    """Forecast drift with theta = (F, a1, a2).

    Neighbor lookups use cached index arrays instead of rolls; this field
    sits in the innermost filter loops.
    """

    parameter_dimension = 3

    def __init__(self, d_x: int):
        require(d_x >= 4, "d_x must be at least 4")
        self.dimension = d_x
        rows, cm1, cm2, cp1 = _cyclic_indices(d_x)
        self._im1, self._im2, self._ip1 = cm1, cm2, cp1

    def evaluate(self, x, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        x = np.asarray(x, dtype=float)
        return (
            -x[self._im1] * (x[self._im2] - x[self._ip1])
            - x
            + theta[0]
            - (theta[1] * x * x + theta[2] * x)
        )

    def jacobian(self, x, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        x = np.asarray(x, dtype=float)
        d = x.shape[0]
        rows, cm1, cm2, cp1 = _cyclic_indices(d)
        xm1 = x[cm1]
        jac = np.zeros((d, d))
        jac[rows, rows] = -1.0 - 2.0 * theta[1] * x - theta[2]
        jac[rows, cm1] = x[cp1] - x[cm2]
        jac[rows, cm2] = -xm1
        jac[rows, cp1] = xm1
        return jac


class TwoScaleLorenzField(DriftField):
    """Joint slow+fast drift on the stacked state (x, z); parameters fixed."""

    parameter_dimension = 0

    def __init__(self, params: TwoScaleLorenzParams, fast_ring: str = "global"):
        self.params = params
        self.fast_ring = fast_ring
        self.dimension = params.d_x * (1 + params.L)

    def evaluate(self, s, theta=None):
        s = np.asarray(s, dtype=float)
        d = self.params.d_x
        dx, dz = lorenz96_two_scale_drift(s[:d], s[d:], self.params, self.fast_ring)
        return np.concatenate([dx, dz], axis=0)


class LinearDriftField(DriftField):
    """f(x) = A x, mainly for tests and oracle comparisons."""

    parameter_dimension = 0

    def __init__(self, a_matrix):
        self.a_matrix = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        require(self.a_matrix.shape[0] == self.a_matrix.shape[1], "A must be square")
        self.dimension = self.a_matrix.shape[0]

    def evaluate(self, x, theta=None):
        return self.a_matrix @ np.asarray(x, dtype=float)

    def jacobian(self, x, theta=None):
        return self.a_matrix.copy()


class CallableDriftField(DriftField):
    """Wraps a plain callable f(x, theta) as a drift field."""

    def __init__(self, fun, dimension: int, parameter_dimension: int = 0):
        self._fun = fun
        self.dimension = dimension
        self.parameter_dimension = parameter_dimension

    def evaluate(self, x, theta=None):
        return np.asarray(self._fun(np.asarray(x, dtype=float), theta), dtype=float)


def euler_maruyama_step(x, drift: DriftField, theta, h: float, sigma, w):
    """One Euler-Maruyama step: ``x + h*f(x, theta) + sigma*w``.

    ``w`` carries the integrated Wiener increment, i.e. N(0, h) per component.
    """
    x = np.asarray(x, dtype=float)
    return x + h * np.asarray(drift.evaluate(x, theta), dtype=float) + np.asarray(sigma) * w


def rk4_sde_step(x, drift: DriftField, theta, h: float, sigma, u):
    """One stochastic RK4 step with stage perturbations.

    ``u`` holds four noise blocks of the same shape as ``x`` (N(0, h) per
    component).  Stage states receive scaled perturbations mirroring the
    deterministic tableau (h/2, h/2, h placements), and the output combines
    the stage noises with the classical (1, 2, 2, 1)/6 weights, so the step
    reduces exactly to deterministic RK4 when ``sigma == 0``.
    """
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma)
    if u is None:
        u1 = u2 = u3 = u4 = 0.0
    else:
        u1, u2, u3, u4 = u

    k1 = np.asarray(drift.evaluate(x, theta), dtype=float)
    x1 = x + 0.5 * h * k1 + 0.5 * sigma * u1
    k2 = np.asarray(drift.evaluate(x1, theta), dtype=float)
    x2 = x + 0.5 * h * k2 + 0.5 * sigma * u2
    k3 = np.asarray(drift.evaluate(x2, theta), dtype=float)
    x3 = x + h * k3 + sigma * u3
    k4 = np.asarray(drift.evaluate(x3, theta), dtype=float)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if u is not None:
        out = out + (sigma / 6.0) * (u1 + 2.0 * u2 + 2.0 * u3 + u4)
    return out


def rk4_deterministic_step(x, drift: DriftField, theta, h: float):
    """Classical RK4 step (no noise)."""
    return rk4_sde_step(x, drift, theta, h, 0.0, None)


@dataclass(frozen=True)
class StateSpaceModel:
    """Discrete-time model: RK4 transition applied m times plus decimated observation.

    One of every K slow variables is observed (components K-1, 2K-1, ... in
    0-based indexing) in Gaussian noise of standard deviation ``sigma_o``.
    """

    drift: DriftField
    d_x: int
    d_theta: int
    d_y: int
    sigma: float
    sigma_o: float
    h: float
    m: int
    K: int

    def __post_init__(self):
        require(self.h > 0.0, "integration step h must be positive")
        require(self.m >= 1, "steps per observation m must be >= 1")
        require(1 <= self.K <= self.d_x, f"K={self.K} must lie in [1, d_x={self.d_x}]")
        require(self.d_y == self.d_x // self.K and self.d_y >= 1,
                f"d_y must equal floor(d_x/K) >= 1, got {self.d_y}")

    @property
    def observed_indices(self) -> NDArray:
        return np.arange(self.K - 1, self.d_x, self.K)[: self.d_y]

    @staticmethod
    def for_drift(drift: DriftField, sigma: float, sigma_o: float, h: float, m: int,
                  K: int = 1) -> "StateSpaceModel":
        d_x = drift.dimension
        return StateSpaceModel(drift=drift, d_x=d_x, d_theta=drift.parameter_dimension,
                               d_y=d_x // K, sigma=sigma, sigma_o=sigma_o, h=h, m=m, K=K)


def propagate_m_steps(x, drift: DriftField, theta, model: StateSpaceModel, rng: Generator = None):
    """Apply the stochastic RK4 step ``model.m`` consecutive times.

    Fresh noise (4 blocks per step, N(0, h) per component) is drawn from
    ``rng``; pass ``rng=None`` for the deterministic (sigma omitted) map.
    """
    x = np.asarray(x, dtype=float)
    if rng is None:
        for _ in range(model.m):
            x = rk4_sde_step(x, drift, theta, model.h, 0.0, None)
        return x
    noise = rng.standard_normal((model.m, 4) + x.shape) * np.sqrt(model.h)
    for k in range(model.m):
        x = rk4_sde_step(x, drift, theta, model.h, model.sigma, noise[k])
    return x


def observe(x, model: StateSpaceModel, r):
    """Decimated linear observation ``y_i = x[(i+1)K - 1] + r_i``."""
    x = np.asarray(x, dtype=float)
    require(x.shape[0] == model.d_x, f"state has {x.shape[0]} components, expected {model.d_x}")
    return x[model.observed_indices] + r


@dataclass
class Trajectory:
    """Recorded discrete-time path of the truth model."""

    times: NDArray            # step indices, shape (n_steps + 1,)
    slow_states: NDArray      # shape (n_steps + 1, d_x)
    fast_states: NDArray = None  # shape (n_steps + 1, d_x * L) or None

    def __post_init__(self):
        require(len(self.times) == len(self.slow_states), "times and states must share one length")
        check_finite_vector(np.asarray(self.slow_states).ravel(), "slow_states")


@dataclass(frozen=True)
class TruthConfig:
    """Everything needed to simulate the two-scale truth and its observations."""

    params: TwoScaleLorenzParams
    h: float = 5e-3
    m: int = 10
    K: int = 2
    sigma: float = 1.25e-3          # slow-variable noise scale
    sigma_fast: float = 1.25e-3     # fast-variable noise scale
    sigma_o: float = 4.0
    spin_up: float = 10.0           # time units discarded before recording
    init_spread: float = 0.1
    fast_ring: str = "global"

    def __post_init__(self):
        require(self.h > 0 and self.m >= 1, "h must be positive and m >= 1")
        require(self.spin_up >= 0, "spin_up must be nonnegative")

    @property
    def d_y(self) -> int:
        return self.params.d_x // self.K


def generate_ground_truth(config: TruthConfig, n_steps: int, seed: int):
    """Simulate the two-scale Lorenz 96 truth and decimated noisy observations.

    The joint (slow, fast) state is integrated with the stochastic RK4 step;
    the slow block uses noise scale ``sigma`` and the fast block
    ``sigma_fast``.  The initial condition is F + N(0, init_spread^2) per
    slow component and N(0, init_spread^2) per fast component, followed by a
    discarded spin-up of ``spin_up`` time units.  One observation is emitted
    every ``m`` recorded steps (the n-th observation sees the state at step
    ``n*m``).

    Returns
    -------
    (trajectory, observations)
        ``trajectory`` covers steps 0..n_steps; ``observations`` has shape
        ``(n_steps // m, d_y)``.
    """
    p = config.params
    d, L = p.d_x, p.L
    rng = Generator(np.random.PCG64(SeedSequence([int(seed) & 0xFFFFFFFF, _SEED_TRUTH])))

    field = TwoScaleLorenzField(p, config.fast_ring)
    sigma_vec = np.concatenate([np.full(d, config.sigma), np.full(d * L, config.sigma_fast)])
    model = StateSpaceModel(drift=field, d_x=field.dimension, d_theta=0, d_y=field.dimension,
                            sigma=1.0, sigma_o=config.sigma_o, h=config.h, m=1, K=1)

    s = np.concatenate([
        p.F + config.init_spread * rng.standard_normal(d),
        config.init_spread * rng.standard_normal(d * L),
    ])

    n_spin = int(round(config.spin_up / config.h))
    for _ in range(n_spin):
        u = rng.standard_normal((4,) + s.shape) * np.sqrt(config.h)
        s = rk4_sde_step(s, field, None, config.h, sigma_vec, u)

    slow = np.empty((n_steps + 1, d))
    fast = np.empty((n_steps + 1, d * L))
    slow[0], fast[0] = s[:d], s[d:]
    n_obs = n_steps // config.m
    d_y = config.d_y
    obs_model = StateSpaceModel(drift=field, d_x=d, d_theta=0, d_y=d_y, sigma=config.sigma,
                                sigma_o=config.sigma_o, h=config.h, m=config.m, K=config.K)
    ys = np.empty((n_obs, d_y))

    for k in range(1, n_steps + 1):
        u = rng.standard_normal((4,) + s.shape) * np.sqrt(config.h)
        s = rk4_sde_step(s, field, None, config.h, sigma_vec, u)
        slow[k], fast[k] = s[:d], s[d:]
        if k % config.m == 0:
            r = config.sigma_o * rng.standard_normal(d_y)
            ys[k // config.m - 1] = observe(s[:d], obs_model, r)

    traj = Trajectory(times=np.arange(n_steps + 1), slow_states=slow, fast_states=fast)
    return traj, ys


_BINARY_MAGIC = b"NHFBIN01"


def save_states_csv(times, states, path):
    """CSV dump: one row per step, step index first, then components."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    times = np.asarray(times)
    require(len(times) == len(states), "times and states must share one length")
    with open(path, "w") as fh:
        for t, row in zip(times, states):
            fh.write(",".join([str(int(t))] + [repr(float(v)) for v in row]) + "\n")


def load_states_csv(path):
    times, rows = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            times.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    return np.asarray(times), np.asarray(rows)


def save_states_binary(times, states, path):
    """Binary dump: magic, uint64 dims, then row-major little-endian float64.

    The step index is stored as the first column of the float matrix.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    times = np.asarray(times, dtype=float).reshape(-1, 1)
    require(len(times) == len(states), "times and states must share one length")
    mat = np.hstack([times, states]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<QQ", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes(order="C"))


def load_states_binary(path):
    raw = Path(path).read_bytes()
    require(raw[:8] == _BINARY_MAGIC, f"{path}: not a state dump (bad magic)")
    n_rows, n_cols = struct.unpack("<QQ", raw[8:24])
    mat = np.frombuffer(raw[24:], dtype="<f8").reshape(n_rows, n_cols)
    return mat[:, 0].astype(int), mat[:, 1:].copy()
