"""Contact-interaction integrals in the oscillator product basis.

Two equal-mass particles in the same harmonic trap separate into a centre of
mass ``X = (x1 + x2)/sqrt(2)`` and a relative coordinate
``r = (x1 - x2)/sqrt(2)``, both again unit-frequency oscillators. A contact
term ``g delta(x1 - x2) = (g / sqrt(2)) delta(r)`` only acts on even relative
states, whose exact energies solve

    Gamma(3/4 - E/2) / Gamma(1/4 - E/2) = -g / (2 sqrt(2)).

The effective interaction is the Hermitian (Loewdin-orthonormalized) matrix
that reproduces these exact energies inside a truncated relative space. It is
rotated back to the product basis with the oscillator brackets of the 45
degree change of variables.

Tensor convention: ``W[i, j, k, l] = <i j| V |k l>`` with particle 1 going
``k -> i`` and particle 2 ``l -> j``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize, special

from . import __version__
from .sp_ho import gauss_hermite_grid, hermite_functions

SQRT2 = math.sqrt(2.0)
CHANNELS = ("AA", "BB", "AB")
TG = math.inf  # coupling value selecting the 1/g = 0 branch


class RootBracketError(RuntimeError):
    pass


class IllConditionedError(RuntimeError):
    pass


def _check_coupling(g: float) -> float:
    g = float(g)
    if math.isnan(g) or g < 0:
        raise ValueError(f"coupling must be >= 0 (or inf for the TG limit), got {g}")
    return g


def _condition(E: float, g: float) -> float:
    # entire form of the quantization condition, (p, q) ~ (2 sqrt2, g) on the unit circle
    if math.isinf(g):
        p, q = 0.0, 1.0
    else:
        nrm = math.hypot(2 * SQRT2, g)
        p, q = 2 * SQRT2 / nrm, g / nrm
    return p * special.rgamma(0.25 - E / 2) + q * special.rgamma(0.75 - E / 2)


def relative_energy_exact(g: float, nu: int) -> float:
    """Energy of the ``nu``-th even relative-motion state for contact coupling ``g``.

    ``g = inf`` gives the Tonks-Girardeau value ``2 nu + 3/2``. Each root is
    bracketed in ``(2 nu + 1/2, 2 nu + 3/2)`` between consecutive zeros of the
    two reciprocal-gamma terms.
    """
    g = _check_coupling(g)
    if int(nu) != nu or nu < 0:
        raise ValueError(f"nu must be a non-negative integer, got {nu!r}")
    lo, hi = 2 * nu + 0.5, 2 * nu + 1.5
    if g == 0:
        return lo
    if math.isinf(g):
        return hi
    f_lo, f_hi = _condition(lo, g), _condition(hi, g)
    if not (f_lo * f_hi < 0):
        raise RootBracketError(
            f"no sign change for g={g}, nu={nu}: f({lo})={f_lo:.3e}, f({hi})={f_hi:.3e}"
        )
    E = optimize.brentq(_condition, lo, hi, args=(g,), xtol=1e-15, maxiter=500)
    # residual as a Newton step in energy units
    h = 1e-6
    slope = (_condition(E + h, g) - _condition(E - h, g)) / (2 * h)
    resid = abs(_condition(E, g) / slope) if slope != 0 else math.inf
    if resid > 1e-12:
        raise RootBracketError(f"root residual {resid:.3e} too large for g={g}, nu={nu}, E={E}")
    return E


def relative_energies(g: float, count: int) -> np.ndarray:
    return np.array([relative_energy_exact(g, nu) for nu in range(count)])


@lru_cache(maxsize=64)
def _phi_even_at_zero(n_rel: int) -> np.ndarray:
    return hermite_functions(2 * n_rel - 2, np.zeros(1))[::2, 0].copy()


def relative_norm_squared(E: float, m_terms: int = 200_000) -> float:
    """Squared norm of the untruncated vector ``phi_2m(0) / (2m + 1/2 - E)``.

    Direct summation plus the asymptotic tail ``1 / (6 pi M^{3/2})``.
    """
    m = np.arange(m_terms, dtype=float)
    phi2 = np.exp(special.gammaln(m + 0.5) - special.gammaln(m + 1.0)) / np.pi
    terms = phi2 / (2 * m + 0.5 - E) ** 2
    return float(np.sum(terms[::-1]) + 1.0 / (6 * np.pi * m_terms ** 1.5))


def relative_wavefunction_coeffs(E: float, n_rel: int, normalization: str = "truncated") -> np.ndarray:
    """Expansion of the exact relative state with energy ``E`` over even modes.

    The exact state is proportional to ``phi_2m(0) / (2m + 1/2 - E)``.
    ``normalization="truncated"`` returns the first ``n_rel`` coefficients
    scaled to unit norm; ``"full"`` returns the first ``n_rel`` coefficients
    of the normalized untruncated state.
    """
    if n_rel < 2:
        raise ValueError("n_rel must be at least 2")
    m = np.arange(n_rel)
    denom = 2 * m + 0.5 - E
    if np.any(np.abs(denom) < 1e-12):
        raise ValueError(f"E={E} coincides with a noninteracting level; coefficients diverge")
    c = _phi_even_at_zero(n_rel) / denom
    if normalization == "truncated":
        c = c / np.linalg.norm(c)
    elif normalization == "full":
        c = c / math.sqrt(relative_norm_squared(E))
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if c[np.argmax(np.abs(c))] < 0:
        c = -c
    return c


@dataclass(frozen=True)
class RelativeSolution:
    g: float
    energies: np.ndarray
    coeffs: np.ndarray  # columns are states over even relative modes


def relative_solution(g: float, n_rel: int, normalization: str = "truncated") -> RelativeSolution:
    E = relative_energies(g, n_rel)
    C = np.column_stack([relative_wavefunction_coeffs(e, n_rel, normalization) for e in E])
    return RelativeSolution(g=float(g), energies=E, coeffs=C)


@lru_cache(maxsize=256)
def _effective_cached(g: float, n_rel: int, cond_max: float) -> np.ndarray:
    E0 = 2 * np.arange(n_rel) + 0.5
    if g == 0:
        return np.zeros((n_rel, n_rel))
    sol = relative_solution(g, n_rel, normalization="full")
    u, s, vt = np.linalg.svd(sol.coeffs)
    cond = (s[0] / s[-1]) ** 2
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditionedError(
            f"Gram matrix condition number {cond:.3e} exceeds {cond_max:.1e} "
            f"(g={g}, n_rel={n_rel}); raise n_rel"
        )
    z = u @ vt  # symmetric orthonormalization A (A^T A)^(-1/2)
    v = (z * sol.energies) @ z.T - np.diag(E0)
    v = 0.5 * (v + v.T)
    v.setflags(write=False)
    return v


def effective_relative_interaction(g: float, n_rel: int, cond_max: float = 1e12) -> np.ndarray:
    """Effective contact interaction over the lowest ``n_rel`` even relative modes.

    ``diag(2m + 1/2) + V`` has exactly the ``n_rel`` lowest exact even
    relative energies as eigenvalues.
    """
    g = _check_coupling(g)
    if n_rel < 2:
        raise ValueError("n_rel must be at least 2")
    return _effective_cached(g, int(n_rel), float(cond_max)).copy()


# -- oscillator brackets ---------------------------------------------------


def _bracket(i: int, j: int, N: int, n: int) -> float:
    """``<i j | N n>`` for ``X = (x1+x2)/sqrt2``, ``r = (x1-x2)/sqrt2``."""
    if i + j != N + n:
        return 0.0
    s = 0
    for k in range(max(0, i - n), min(N, i) + 1):
        s += math.comb(N, k) * math.comb(n, i - k) * (-1) ** (n - i + k)
    if s == 0:
        return 0.0
    ratio = Fraction(math.factorial(i) * math.factorial(j), math.factorial(N) * math.factorial(n) * 2 ** (N + n))
    return float(s) * math.sqrt(ratio)


@dataclass(frozen=True)
class MoshinskyTable:
    """Brackets ``C[i, j, N] = <i j | N, i + j - N>`` for ``i, j < n_modes``."""

    n_modes: int
    C: np.ndarray

    def __call__(self, i: int, j: int, N: int, n: int) -> float:
        if i + j != N + n or N < 0 or n < 0:
            return 0.0
        return float(self.C[i, j, N])


@lru_cache(maxsize=8)
def _moshinsky_cached(n_modes: int) -> np.ndarray:
    C = np.zeros((n_modes, n_modes, 2 * n_modes - 1))
    for i in range(n_modes):
        for j in range(n_modes):
            for N in range(i + j + 1):
                C[i, j, N] = _bracket(i, j, N, i + j - N)
    C.setflags(write=False)
    return C


def moshinsky_coefficients(n_modes: int) -> MoshinskyTable:
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    return MoshinskyTable(n_modes, _moshinsky_cached(int(n_modes)))


# -- pair tensors ----------------------------------------------------------


@dataclass(frozen=True)
class PairTensor:
    channel: str
    g: float
    W: np.ndarray
    kind: str
    pair_cutoff: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")
        if self.kind not in ("bare", "effective"):
            raise ValueError("kind must be 'bare' or 'effective'")
        n = self.W.shape[0]
        if self.W.shape != (n, n, n, n):
            raise ValueError("W must be a rank-4 cube")

    @property
    def n_modes(self) -> int:
        return self.W.shape[0]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.W, dtype="<f8").tobytes()).hexdigest()

    def with_channel(self, channel: str) -> "PairTensor":
        return PairTensor(channel, self.g, self.W, self.kind, self.pair_cutoff, dict(self.meta))


def effective_pair_tensor(g: float, n_modes: int, pair_cutoff: int | None = None,
                          channel: str = "AB") -> PairTensor:
    """Effective-interaction integrals on the pair space ``i + j <= pair_cutoff``.

    The pair space is an energy shell, so the centre-of-mass quantum number
    ``N`` is conserved and each ``N`` block sees the even relative modes
    ``n <= pair_cutoff - N``. The effective relative interaction is built for
    exactly that many modes, which makes the two-body spectrum inside the
    shell exact. Entries with ``i + j`` or ``k + l`` above the cutoff are zero.
    """
    g = _check_coupling(g)
    L = n_modes - 1 if pair_cutoff is None else int(pair_cutoff)
    if L < 0:
        raise ValueError("pair_cutoff must be >= 0")
    W = np.zeros((n_modes * n_modes, n_modes * n_modes))
    n_rel_used = {}
    if g != 0:
        # brackets are needed for i, j < n_modes with N + n up to 2 (n_modes - 1)
        C = _moshinsky_cached(n_modes)
        ii, jj = np.divmod(np.arange(n_modes * n_modes), n_modes)
        s = ii + jj
        for N in range(L + 1):
            n_rel = (L - N) // 2 + 1
            if n_rel < 2:
                # a single even relative mode: the exact energy fixes V directly
                v = np.array([[relative_energy_exact(g, 0) - 0.5]])
            else:
                v = effective_relative_interaction(g, n_rel)
            n_rel_used[N] = n_rel
            T = np.zeros((n_modes * n_modes, n_rel))
            for m in range(n_rel):
                rows = np.nonzero(s == N + 2 * m)[0]
                if rows.size:
                    T[rows, m] = C[ii[rows], jj[rows], N]
            W += T @ v @ T.T
    W = 0.5 * (W + W.T)
    W = W.reshape(n_modes, n_modes, n_modes, n_modes)
    return PairTensor(channel, g, W, "effective", L, {"n_rel": n_rel_used.get(0, (L // 2) + 1)})


def bare_pair_tensor(g: float, n_modes: int, channel: str = "AB") -> PairTensor:
    """``W[i,j,k,l] = g * int phi_i phi_j phi_k phi_l dx`` by exact Gauss-Hermite quadrature."""
    g = _check_coupling(g)
    if math.isinf(g):
        raise ValueError("the bare contact tensor is undefined at infinite coupling")
    # the integrand is a polynomial times exp(-2 x^2): substitute x = y / sqrt2 so the
    # Gauss-Hermite rule in y is exact
    grid = gauss_hermite_grid(2 * n_modes)
    phi = hermite_functions(n_modes - 1, grid.points / SQRT2)
    P = (phi[:, None, :] * phi[None, :, :]).reshape(n_modes * n_modes, -1)
    w = grid.weights / SQRT2
    W = g * (P * w) @ P.T
    W = 0.5 * (W + W.T)
    return PairTensor(channel, g, W.reshape((n_modes,) * 4), "bare", 2 * (n_modes - 1))


def check_pair_tensor(t: PairTensor, atol: float = 1e-12) -> None:
    """Raise if the exchange or hermiticity symmetries are violated."""
    W = t.W
    scale = max(1.0, float(np.max(np.abs(W))))
    if np.max(np.abs(W - W.transpose(2, 3, 0, 1))) > atol * scale:
        raise ValueError(f"{t.channel} tensor is not symmetric (W_ijkl != W_klij)")
    if np.max(np.abs(W - W.transpose(1, 0, 3, 2))) > atol * scale:
        raise ValueError(f"{t.channel} tensor breaks particle exchange (W_ijkl != W_jilk)")


# -- cache files -----------------------------------------------------------


def save_pair_tensor(path, tensor: PairTensor) -> None:
    """Write ``<path>`` (raw little-endian float64, C order) and ``<path>.json``."""
    path = Path(path)
    data = np.ascontiguousarray(tensor.W, dtype="<f8")
    path.write_bytes(data.tobytes())
    side = {
        "format": "bosemix-pair-tensor",
        "version": 1,
        "code_version": __version__,
        "channel": tensor.channel,
        "g": tensor.g if math.isfinite(tensor.g) else "inf",
        "n_modes": tensor.n_modes,
        "kind": tensor.kind,
        "pair_cutoff": tensor.pair_cutoff,
        "meta": {str(k): v for k, v in tensor.meta.items()},
        "sha256": hashlib.sha256(data.tobytes()).hexdigest(),
    }
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_pair_tensor(path) -> PairTensor:
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    if side.get("format") != "bosemix-pair-tensor" or side.get("version") != 1:
        raise ValueError(f"{path}: unsupported pair-tensor file")
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != side["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    n = side["n_modes"]
    W = np.frombuffer(raw, dtype="<f8").reshape((n,) * 4).astype(float)
    g = math.inf if side["g"] == "inf" else float(side["g"])
    return PairTensor(side["channel"], g, W, side["kind"], side["pair_cutoff"], side.get("meta", {}))
