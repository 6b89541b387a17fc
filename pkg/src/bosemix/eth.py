"""Matrix-element statistics of an observable in the many-body eigenbasis.

The quantities here test the eigenstate-thermalization picture: off-diagonal
elements ``O_mn`` inside an energy window should be Gaussian distributed
(kurtosis 3), while a hidden symmetry shows up as a spike of exact zeros
between states of different symmetry classes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special, stats

from .eigen import SpectrumResult
from .fock import BasisTable
from .hamiltonian import ManyBodyOperator

DEFAULT_WINDOW = (2600, 2800)
DEFAULT_THRESHOLD = 1e-8
MIN_SAMPLES = 1000
SYMMETRY_TOL = 1e-10


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObservableMatrix:
    window: tuple  # inclusive eigenstate index range (m_lo, m_hi)
    indices: np.ndarray  # eigenstate indices covered, ascending
    elements: np.ndarray  # O[a, b] = <indices[a]| O |indices[b]>
    energies: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.elements).copy()

    def offdiagonal(self, mask=None) -> np.ndarray:
        """Upper-triangle elements ``O_mn`` with ``m < n``, optionally restricted by a boolean mask."""
        O = self.elements
        if mask is not None:
            keep = np.nonzero(np.asarray(mask, bool))[0]
            O = O[np.ix_(keep, keep)]
        iu = np.triu_indices(O.shape[0], 1)
        return O[iu]

    def restrict(self, mask) -> "ObservableMatrix":
        keep = np.nonzero(np.asarray(mask, bool))[0]
        return ObservableMatrix(self.window, self.indices[keep], self.elements[np.ix_(keep, keep)],
                                self.energies[keep])

    def to_csv(self, path) -> None:
        """Rows ``m, n, E_m, E_n, O_mn`` for ``m <= n``."""
        iu = np.triu_indices(self.indices.size)
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "n", "E_m", "E_n", "O_mn"])
            for a, b in zip(*iu):
                w.writerow([int(self.indices[a]), int(self.indices[b]), repr(float(self.energies[a])),
                            repr(float(self.energies[b])), repr(float(self.elements[a, b]))])


def _check_same_basis(spectrum: SpectrumResult, op: ManyBodyOperator):
    want = spectrum.meta.get("basis_checksum")
    if want is not None and want != op.basis.checksum():
        raise ValueError("observable and spectrum live on different bases")
    if op.dimension != spectrum.dimension:
        raise ValueError(f"observable dimension {op.dimension} != spectrum dimension {spectrum.dimension}")


def eigenbasis_elements(spectrum: SpectrumResult, op: ManyBodyOperator, indices) -> np.ndarray:
    """Dense ``<m|O|n>`` for the given eigenstate indices."""
    _check_same_basis(spectrum, op)
    V = spectrum.columns(np.asarray(indices))
    return V.T @ (op.to_csr() @ V)


def eigenbasis_diagonal(spectrum: SpectrumResult, op: ManyBodyOperator) -> np.ndarray:
    """``<m|O|m>`` for every eigenstate, computed block by block."""
    _check_same_basis(spectrum, op)
    full = op.to_csr()
    out = np.empty(spectrum.n_states)
    for b in spectrum.blocks:
        sub = full[b.rows][:, b.rows]
        out[b.cols] = np.einsum("ij,ij->j", b.vectors, sub @ b.vectors)
    return out


def observable_matrix(spectrum: SpectrumResult, op: ManyBodyOperator, window=DEFAULT_WINDOW) -> ObservableMatrix:
    """Observable in the eigenbasis over the inclusive index window ``(m_lo, m_hi)``."""
    lo, hi = (int(w) for w in window)
    if not 0 <= lo <= hi < spectrum.n_states:
        raise IndexError(f"window {window} outside the spectrum of {spectrum.n_states} states")
    idx = np.arange(lo, hi + 1)
    O = eigenbasis_elements(spectrum, op, idx)
    asym = float(np.max(np.abs(O - O.T)))
    if asym > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(O)))):
        raise ValueError(f"eigenbasis matrix is not symmetric (max deviation {asym:.2e})")
    O = 0.5 * (O + O.T)
    return ObservableMatrix((lo, hi), idx, O, spectrum.energies[idx].copy())


def _samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size < MIN_SAMPLES:
        raise ValueError(f"{x.size} samples, need at least {MIN_SAMPLES}")
    if np.var(x) <= 1e-30 * max(1.0, float(np.mean(x * x))):
        raise ZeroVarianceError("samples have zero variance")
    return x


def kurtosis(samples) -> float:
    """Fourth central moment over the squared variance (population estimator); 3 for a Gaussian."""
    return float(stats.kurtosis(_samples(samples), fisher=False, bias=True))


@dataclass(frozen=True)
class BandProfile:
    m: np.ndarray
    n: np.ndarray
    omega: np.ndarray
    magnitude: np.ndarray

    def to_csv(self, path) -> None:
        np.savetxt(Path(path), np.column_stack([self.m, self.n, self.omega, self.magnitude]),
                   delimiter=",", header="m,n,omega,abs_O", comments="", fmt=["%d", "%d", "%.17g", "%.17g"])


def offdiag_band_profile(obs: ObservableMatrix) -> BandProfile:
    """All pairs ``m < n`` with ``omega = |E_m - E_n|`` and ``|O_mn|``."""
    if obs.indices.size < 2:
        raise ValueError("window needs at least two states")
    a, b = np.triu_indices(obs.indices.size, 1)
    return BandProfile(obs.indices[a], obs.indices[b], np.abs(obs.energies[a] - obs.energies[b]),
                       np.abs(obs.elements[a, b]))


@dataclass(frozen=True, eq=False)
class SectorLabeling:
    weights: np.ndarray  # w_m, support on Fock states with equal A and B occupations
    retained: np.ndarray  # bool, w_m >= threshold
    threshold: float
    indices: np.ndarray  # eigenstate indices the labels refer to

    @property
    def removed_fraction(self) -> float:
        return float(1.0 - self.retained.mean())


def diagonal_fock_states(basis: BasisTable) -> np.ndarray:
    """Basis indices of the states whose A and B occupations coincide."""
    if basis.meta.n_a != basis.meta.n_b:
        raise ValueError("equal-occupation states need N_A == N_B")
    same = np.array([basis.configs_a[a] == basis.configs_b[b] for a, b in zip(basis.cfg_a, basis.cfg_b)],
                    dtype=bool)
    return np.nonzero(same)[0]


def sector_filter(spectrum: SpectrumResult, basis: BasisTable, threshold: float = DEFAULT_THRESHOLD,
                  indices=None) -> SectorLabeling:
    """Label eigenstates by their weight on equal-occupation Fock states.

    States below ``threshold`` are removed; at ``g_A = g_B`` these are the
    states odd under exchanging the two components, whose weight vanishes
    identically. The weight is not invariant under rotations inside a
    degenerate eigenspace.
    """
    if spectrum.dimension != len(basis):
        raise ValueError("spectrum and basis sizes differ")
    diag = diagonal_fock_states(basis)
    mask = np.zeros(len(basis), bool)
    mask[diag] = True
    w = np.zeros(spectrum.n_states)
    for b in spectrum.blocks:
        sel = mask[b.rows]
        if np.any(sel):
            w[b.cols] = np.sum(b.vectors[sel] ** 2, axis=0)
    idx = np.arange(spectrum.n_states) if indices is None else np.asarray(indices)
    w = w[idx]
    return SectorLabeling(w, w >= threshold, float(threshold), idx)


@dataclass(frozen=True)
class GaussianFit:
    mean: float
    std: float
    residual: float  # total-variation distance between histogram and fitted normal, in [0, 1]


def gaussian_fit(samples, bins: int = 60) -> GaussianFit:
    """Moment-matched normal distribution and a histogram residual."""
    x = _samples(samples)
    mu, sd = float(np.mean(x)), float(np.std(x))
    edges = np.linspace(mu - 5 * sd, mu + 5 * sd, bins + 1)
    counts, _ = np.histogram(x, edges)
    model = np.diff(special.ndtr((edges - mu) / sd))
    resid = 0.5 * (np.sum(np.abs(counts / x.size - model)) + (1 - counts.sum() / x.size)
                   + (1 - model.sum()))
    return GaussianFit(mu, sd, float(resid))


def eth_summary(obs: ObservableMatrix, labels: SectorLabeling | None = None) -> dict:
    """Scalar ETH diagnostics for JSON export."""
    k = kurtosis(obs.offdiagonal())
    out = {"window": list(obs.window), "n_states": int(obs.indices.size),
           "kurtosis": k, "inverse_kurtosis": 1.0 / k}
    if labels is not None:
        keep = labels.retained[np.searchsorted(labels.indices, obs.indices)]
        kr = kurtosis(obs.offdiagonal(keep))
        out.update({"threshold": labels.threshold, "removed_fraction": labels.removed_fraction,
                    "retained_in_window": int(keep.sum()), "retained_kurtosis": kr,
                    "retained_inverse_kurtosis": 1.0 / kr})
    return out


def write_json(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
