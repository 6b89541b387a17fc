"""Single-particle 1D harmonic oscillator in oscillator units.

Lengths are measured in the oscillator length and energies in hbar*omega,
so ``phi_n`` are the eigenfunctions of ``-1/2 d^2/dx^2 + x^2/2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_PI_QUARTER = np.pi ** -0.25
# rescale threshold for the scaled recurrence
_BIG = 1e150


def _check_mode(n: int) -> int:
    if int(n) != n or n < 0:
        raise ValueError(f"mode index must be a non-negative integer, got {n!r}")
    return int(n)


def hermite_functions(n_max: int, x) -> np.ndarray:
    """All oscillator eigenfunctions ``phi_0 .. phi_{n_max}`` at positions ``x``.

    Uses the normalized three-term recurrence

        phi_{n+1} = sqrt(2/(n+1)) x phi_n - sqrt(n/(n+1)) phi_{n-1}

    on the Gaussian-stripped functions ``psi_n = phi_n * exp(x^2/2)``. The
    common factor is carried as a per-point log scale and the running values
    are renormalized whenever they exceed 1e150, so neither the Gaussian
    underflow nor the polynomial growth can overflow for any finite ``x``.

    Returns
    -------
    ndarray of shape ``(n_max + 1,) + x.shape``
    """
    n_max = _check_mode(n_max)
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("positions must be finite")
    shape = x.shape
    xf = x.ravel()
    out = np.empty((n_max + 1, xf.size))
    log_scale = -0.5 * xf * xf
    prev = np.zeros_like(xf)
    cur = np.full_like(xf, _PI_QUARTER)
    out[0] = cur * np.exp(log_scale)
    for n in range(n_max):
        nxt = np.sqrt(2.0 / (n + 1)) * xf * cur - np.sqrt(n / (n + 1)) * prev
        prev, cur = cur, nxt
        big = np.abs(cur) > _BIG
        if np.any(big):
            cur[big] /= _BIG
            prev[big] /= _BIG
            log_scale[big] += np.log(_BIG)
        out[n + 1] = cur * np.exp(log_scale)
    return out.reshape((n_max + 1,) + shape)


def hermite_function(n: int, x):
    """Value of the normalized oscillator eigenfunction ``phi_n(x)``."""
    n = _check_mode(n)
    val = hermite_functions(n, x)[n]
    return float(val) if np.ndim(val) == 0 else val


def sp_energy(n: int) -> float:
    """Single-particle energy ``n + 1/2``."""
    return _check_mode(n) + 0.5


def x_squared_element(i: int, j: int) -> float:
    """Matrix element ``<phi_i| x^2 |phi_j>``."""
    i, j = _check_mode(i), _check_mode(j)
    if i == j:
        return i + 0.5
    lo, hi = min(i, j), max(i, j)
    if hi - lo == 2:
        return 0.5 * np.sqrt((lo + 1) * (lo + 2))
    return 0.0


def x_squared_matrix(n_modes: int) -> np.ndarray:
    """Dense ``x^2`` matrix over the first ``n_modes`` oscillator modes."""
    m = np.zeros((n_modes, n_modes))
    idx = np.arange(n_modes)
    m[idx, idx] = idx + 0.5
    off = 0.5 * np.sqrt((idx[:-2] + 1) * (idx[:-2] + 2))
    m[idx[:-2], idx[:-2] + 2] = off
    m[idx[:-2] + 2, idx[:-2]] = off
    return m


def momentum_mode_phase(n: int) -> complex:
    """Fourier eigenphase ``(-i)^n`` of ``phi_n``.

    With ``f~(k) = (2 pi)^(-1/2) int f(x) exp(-i k x) dx`` the transform of
    ``phi_n`` is ``(-i)^n phi_n(k)``.
    """
    return (1, -1j, -1, 1j)[_check_mode(n) % 4]


@dataclass(frozen=True)
class Grid:
    """Quadrature grid: ``sum(weights * f(points))`` approximates ``int f dx``."""

    points: np.ndarray
    weights: np.ndarray
    degree: int = -1  # integrand degree (polynomial x Gaussian) integrated exactly; -1 if none

    def __post_init__(self):
        if self.points.shape != self.weights.shape or self.points.ndim != 1:
            raise ValueError("points and weights must be 1D arrays of equal length")
        if np.any(np.diff(self.points) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if np.any(self.weights <= 0):
            raise ValueError("grid weights must be positive")

    def integrate(self, values, axis: int = -1):
        return np.tensordot(np.moveaxis(np.asarray(values), axis, -1), self.weights, axes=1)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point", "weight"])
            for p, wt in zip(self.points, self.weights):
                w.writerow([repr(float(p)), repr(float(wt))])

    @classmethod
    def from_csv(cls, path) -> "Grid":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(np.ascontiguousarray(data[:, 0]), np.ascontiguousarray(data[:, 1]))


def gauss_hermite_grid(n_points: int) -> Grid:
    """Gauss-Hermite rule for integrands ``phi_i(x) phi_j(x) p(x)``.

    The weights absorb the Gaussian factor. They are obtained from the
    Christoffel identity ``w_k exp(x_k^2) = 1 / sum_{n<N} phi_n(x_k)^2``,
    which stays finite where the raw weights underflow. The rule integrates
    ``exp(-x^2)`` times any polynomial of degree ``2N - 1`` exactly.
    """
    if n_points < 1:
        raise ValueError("need at least one node")
    nodes, _ = np.polynomial.hermite.hermgauss(n_points)
    nodes = np.sort(nodes)
    phi = hermite_functions(n_points - 1, nodes)
    weights = 1.0 / np.sum(phi * phi, axis=0)
    return Grid(nodes, weights, degree=2 * n_points - 1)


def default_grid(n_max: int) -> Grid:
    """Quadrature grid exact for products of modes up to ``n_max`` (``2 n_max + 16`` nodes)."""
    return gauss_hermite_grid(2 * n_max + 16)


def uniform_grid(x_max: float, n_points: int) -> Grid:
    """Equally spaced grid on ``[-x_max, x_max]`` with trapezoid weights."""
    pts = np.linspace(-x_max, x_max, n_points)
    h = pts[1] - pts[0]
    w = np.full(n_points, h)
    w[0] = w[-1] = h / 2
    return Grid(pts, w)
