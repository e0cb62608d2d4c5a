"""Low-discrepancy machinery for the quasi-Monte Carlo parameter layer.

Provides plain (unscrambled) Halton sequences, the Box-Muller transform for
turning uniform points into Gaussian ones, a logistic rescaling map that
sends weighted parameter clouds into the unit hypercube, and the inverse
Hilbert space-filling-curve index used to order multi-dimensional particles
before inverse-CDF resampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .validation import check_weights, require

PSI_DENOM_FLOOR = 1e-12


def first_primes(count: int) -> list[int]:
    primes: list[int] = []
    n = 2
    while len(primes) < count:
        if all(n % p for p in primes if p * p <= n):
            primes.append(n)
        n += 1
    return primes


def radical_inverse(index: int, base: int) -> float:
    require(index >= 0, "index must be nonnegative")
    inv = 0.0
    f = 1.0
    while index > 0:
        f /= base
        inv += f * (index % base)
        index //= base
    return inv


@dataclass
class HaltonStream:
    """Sequential Halton point source in [0,1)^d (bases = first d primes).

    ``next_index`` starts at 1: index 0 is the all-zero point, which is
    skipped so that prior draws and Box-Muller inputs stay inside (0,1).
    """

    dimension: int
    next_index: int = 1
    bases: list[int] = field(init=False)

    def __post_init__(self):
        require(self.dimension >= 1, "dimension must be positive")
        require(self.next_index >= 0, "next_index must be nonnegative")
        self.bases = first_primes(self.dimension)

    def next_block(self, n: int) -> NDArray:
        """Return the next ``n`` points, shape (n, d), advancing the stream."""
        block = np.array([
            halton_point(self.next_index + i, self) for i in range(n)
        ])
        self.next_index += n
        return block.reshape(n, self.dimension)


def halton_point(index: int, stream: HaltonStream) -> NDArray:
    """Point ``index`` of the Halton sequence with the stream's bases (pure)."""
    return np.array([radical_inverse(index, b) for b in stream.bases])


def gaussian_from_uniform(u1, u2):
    """Box-Muller: two uniforms -> two independent standard normals.

    ``u1`` must lie in (0,1]; u1 = 0 hits the log singularity and is
    rejected.  Accepts scalars or same-shape arrays.
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    require((u1 > 0.0).all() and (u1 <= 1.0).all(), "u1 must lie in (0, 1]")
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    return radius * np.cos(angle), radius * np.sin(angle)


def gaussian_block_from_uniform(u_block) -> NDArray:
    """Map a (n, 2k) uniform block to (n, 2k) standard normals, column pairs."""
    u_block = np.atleast_2d(np.asarray(u_block, dtype=float))
    n, cols = u_block.shape
    require(cols % 2 == 0, "Box-Muller consumes uniforms in pairs; need an even column count")
    out = np.empty_like(u_block)
    for j in range(0, cols, 2):
        z1, z2 = gaussian_from_uniform(1.0 - u_block[:, j], u_block[:, j + 1])
        out[:, j], out[:, j + 1] = z1, z2
    return out


def psi_map(theta_points, weights, denom_floor: float = PSI_DENOM_FLOOR) -> NDArray:
    """Logistic rescaling of a weighted parameter cloud into (0,1)^d.

    Component-wise: with weighted mean m_j and variance s2_j, the anchors
    are lo_j = m_j - 2*s2_j and hi_j = m_j + 2*s2_j and the output is
    ``1 / (1 + exp(-(theta_ij - lo_j) / (hi_j - lo_j)))``.  A degenerate
    spread (hi - lo below ``denom_floor``) is floored, never an error.
    """
    theta = np.atleast_2d(np.asarray(theta_points, dtype=float))
    w = check_weights(weights, theta.shape[0])
    mean = w @ theta
    var = w @ (theta - mean) ** 2
    lo = mean - 2.0 * var
    denom = np.maximum(4.0 * var, denom_floor)
    return 1.0 / (1.0 + np.exp(-(theta - lo) / denom))


@dataclass(frozen=True)
class HilbertMap:
    """Quantized d-dimensional Hilbert coordinate-to-index transform."""

    dimension: int
    bits_per_dim: int

    def __post_init__(self):
        require(self.dimension >= 1 and self.bits_per_dim >= 1,
                "dimension and bits_per_dim must be positive")
        require(self.dimension * self.bits_per_dim <= 62,
                "dimension * bits_per_dim must not exceed 62")

    @staticmethod
    def for_dimension(dimension: int) -> "HilbertMap":
        return HilbertMap(dimension, min(16, 52 // dimension) if dimension > 1 else 16)


def _hilbert_cell_index(cell, bits: int) -> int:
    """Integer Hilbert index of an integer cell (Gray-code transform).

    Follows the classical transpose-form algorithm: undo the excess work of
    higher bits, Gray-encode across axes, then interleave the transposed
    bits (most significant plane first).  The curve starts at the origin.
    """
    x = [int(c) for c in cell]
    d = len(x)
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(d):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q >>= 1
    for i in range(1, d):
        x[i] ^= x[i - 1]
    t = 0
    q = 1 << (bits - 1)
    while q > 1:
        if x[d - 1] & q:
            t ^= q - 1
        q >>= 1
    for i in range(d):
        x[i] ^= t
    h = 0
    for bit in range(bits - 1, -1, -1):
        for i in range(d):
            h = (h << 1) | ((x[i] >> bit) & 1)
    return h


def hilbert_cell_of_index(h: int, dimension: int, bits: int) -> list[int]:
    """Inverse of :func:`_hilbert_cell_index`; used by the curve tests."""
    x = [0] * dimension
    pos = dimension * bits - 1
    for bit in range(bits - 1, -1, -1):
        for i in range(dimension):
            x[i] |= ((h >> pos) & 1) << bit
            pos -= 1
    t = x[dimension - 1] >> 1
    for i in range(dimension - 1, 0, -1):
        x[i] ^= x[i - 1]
    x[0] ^= t
    q = 2
    top = 1 << bits
    while q != top:
        p = q - 1
        for i in range(dimension - 1, -1, -1):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q <<= 1
    return x


def hilbert_index_int(point, hmap: HilbertMap) -> int:
    """Integer Hilbert index of a point in [0,1)^d (exact sort key)."""
    point = np.asarray(point, dtype=float).ravel()
    require(point.size == hmap.dimension,
            f"point has {point.size} components, expected {hmap.dimension}")
    require(((point >= 0.0) & (point < 1.0)).all(), "point must lie in [0, 1)^d")
    scale = 1 << hmap.bits_per_dim
    cell = np.minimum((point * scale).astype(np.int64), scale - 1)
    if hmap.dimension == 1:
        return int(cell[0])
    return _hilbert_cell_index(cell, hmap.bits_per_dim)


def hilbert_index(point, hmap: HilbertMap) -> float:
    """Hilbert curve index normalized to [0, 1).

    For ``dimension == 1`` this is the identity on the quantized value.
    """
    total_bits = hmap.dimension * hmap.bits_per_dim
    return hilbert_index_int(point, hmap) / float(1 << total_bits)


def hilbert_sort(theta_points, weights, hmap: HilbertMap) -> NDArray:
    """Permutation ordering particles by ascending Hilbert index of psi(theta).

    Ties (identical quantized cells) are broken by original index.
    """
    psi = psi_map(theta_points, weights)
    keys = np.array([hilbert_index_int(row, hmap) for row in psi])
    return np.argsort(keys, kind="stable")


def star_discrepancy_grid(points, resolution: int = 64) -> float:
    """Star discrepancy lower bound by evaluating anchored boxes on a grid."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = points.shape
    require(d == 2, "grid discrepancy evaluation is implemented for d = 2")
    edges = np.arange(1, resolution + 1) / resolution
    counts = np.zeros((resolution, resolution))
    ix = np.minimum((points[:, 0] * resolution).astype(int), resolution - 1)
    iy = np.minimum((points[:, 1] * resolution).astype(int), resolution - 1)
    np.add.at(counts, (ix, iy), 1.0)
    cum = counts.cumsum(axis=0).cumsum(axis=1) / n
    volume = np.outer(edges, edges)
    return float(np.abs(cum - volume).max())
