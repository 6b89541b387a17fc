"""Sudden-quench dynamics in the many-body eigenbasis and equilibrium ensembles.

A product initial state is expanded in the eigenstates of the post-quench
Hamiltonian, ``|psi(t)> = sum_m c_m exp(-i E_m t) |m>``. Long-time behaviour
is compared with the diagonal ensemble (weights ``|c_m|^2``) and the
microcanonical ensemble (flat average over an energy window).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .eigen import SpectrumResult
from .eth import ObservableMatrix
from .fock import BasisTable, FockState
from .hamiltonian import ManyBodyOperator, one_body_density_matrices
from .sp_ho import hermite_functions, momentum_mode_phase

log = logging.getLogger(__name__)

DROP_TOL = 1e-12
DROP_WARN = 1e-6
DROP_FAIL = 1e-3


class DroppedMassError(RuntimeError):
    pass


# -- initial state -----------------------------------------------------------


@dataclass(frozen=True)
class InitialStateSpec:
    """Two-boson pair superpositions for each component.

    ``pairs_a`` and ``pairs_b`` hold ``(i, j, amplitude)`` triples. With
    ``convention="fock"`` the amplitude multiplies the normalized Fock state
    with one boson in mode ``i`` and one in ``j``. With ``"symmetrized"`` it
    multiplies the first-quantized sum over ``i != j`` particle labels of
    ``phi_i(x_1) phi_j(x_2)``, which carries Fock weight 2 for ``i == j`` and
    ``sqrt(2)`` otherwise.
    """

    pairs_a: tuple
    pairs_b: tuple
    convention: str = "fock"

    def __post_init__(self):
        if self.convention not in ("fock", "symmetrized"):
            raise ValueError("convention must be 'fock' or 'symmetrized'")


def reference_initial_state(convention: str = "fock") -> InitialStateSpec:
    """A: ten pairs ``(i, 19 - i)``; B: ``(0, 0)`` and ``(0, 1)``, all with equal amplitude."""
    return InitialStateSpec(tuple((i, 19 - i, 1.0) for i in range(10)), ((0, 0, 1.0), (0, 1, 1.0)), convention)


def _component_amplitudes(pairs, convention) -> dict:
    amps = {}
    for i, j, a in pairs:
        i, j = sorted((int(i), int(j)))
        if i < 0:
            raise ValueError("mode indices must be non-negative")
        w = a if convention == "fock" else a * (2.0 if i == j else math.sqrt(2.0))
        amps[(i, j)] = amps.get((i, j), 0.0) + w
    nrm = math.sqrt(sum(abs(v) ** 2 for v in amps.values()))
    if nrm == 0:
        raise ValueError("initial-state component has zero norm")
    return {k: v / nrm for k, v in amps.items()}


def _occ(i, j):
    occ = [0] * (j + 1)
    occ[i] += 1
    occ[j] += 1
    return tuple(occ)


def component_energy(spec: InitialStateSpec, component: str) -> float:
    """Noninteracting energy of one component of the initial state."""
    pairs = spec.pairs_a if component == "A" else spec.pairs_b
    amps = _component_amplitudes(pairs, spec.convention)
    return float(sum(abs(a) ** 2 * (i + j + 1.0) for (i, j), a in amps.items()))


def noninteracting_energy(spec: InitialStateSpec) -> float:
    return component_energy(spec, "A") + component_energy(spec, "B")


def build_initial_state(spec: InitialStateSpec, basis: BasisTable, project: bool = False):
    """Initial-state vector over ``basis``.

    With ``project=True`` components that fall outside the basis (for
    instance the wrong parity) are discarded and the rest renormalized;
    otherwise they raise. Returns ``(vector, retained_weight)``.
    """
    if basis.meta.n_a != 2 or basis.meta.n_b != 2:
        raise ValueError("pair initial states need two bosons per component")
    amp_a = _component_amplitudes(spec.pairs_a, spec.convention)
    amp_b = _component_amplitudes(spec.pairs_b, spec.convention)
    psi = np.zeros(len(basis))
    missing = 0.0
    for (ia, ja), aa in amp_a.items():
        for (ib, jb), ab in amp_b.items():
            k = basis.lookup(FockState(_occ(ia, ja), _occ(ib, jb)))
            if k is None:
                if not project:
                    raise ValueError(f"Fock state A{(ia, ja)} B{(ib, jb)} lies outside the basis")
                missing += abs(aa * ab) ** 2
            else:
                psi[k] += aa * ab
    retained = float(psi @ psi)
    if retained == 0:
        raise ValueError("initial state has no weight inside the basis")
    psi /= math.sqrt(retained)
    return psi, retained


def overlaps(state, spectrum: SpectrumResult, basis: BasisTable | None = None) -> np.ndarray:
    """``c_m = <m|state>``; ``sum |c_m|^2`` is 1 when the spectrum spans the state."""
    if basis is not None and spectrum.meta.get("basis_checksum") not in (None, basis.checksum()):
        raise ValueError("spectrum was computed on a different basis")
    return spectrum.overlaps(np.asarray(state))


def completeness(c) -> float:
    return float(np.sum(np.abs(c) ** 2))


def _keep(c, drop_tol):
    w = np.abs(c) ** 2
    keep = w >= drop_tol
    dropped = float(w[~keep].sum())
    if dropped > DROP_FAIL:
        raise DroppedMassError(f"dropped overlap mass {dropped:.2e} exceeds {DROP_FAIL}")
    if dropped > DROP_WARN:
        log.warning("dropped overlap mass %.2e", dropped)
    return np.nonzero(keep)[0], dropped


# -- time evolution ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Evolution:
    times: np.ndarray
    values: np.ndarray
    dropped_mass: float
    warnings: tuple = ()


def evolve_expectation(obs: ObservableMatrix, c, energies, times, drop_tol: float = DROP_TOL,
                       chunk: int = 512) -> Evolution:
    """``O(t) = sum_mn c_m* c_n exp(-i (E_n - E_m) t) O_mn`` from eigenbasis elements.

    ``c`` and ``energies`` are indexed by global eigenstate index; ``obs``
    must cover every state whose weight is at least ``drop_tol``.
    """
    c = np.asarray(c)
    E = np.asarray(energies, float)
    times = np.asarray(times, float)
    if not np.all(np.isfinite(times)):
        raise ValueError("times must be finite")
    idx, dropped = _keep(c, drop_tol)
    pos = np.searchsorted(obs.indices, idx)
    if np.any(pos >= obs.indices.size) or np.any(obs.indices[np.minimum(pos, obs.indices.size - 1)] != idx):
        raise ValueError("observable window does not cover every populated eigenstate")
    O = obs.elements[np.ix_(pos, pos)]
    cc, ee = c[idx], E[idx]
    out = np.empty(times.size)
    for s in range(0, times.size, chunk):
        a = cc[:, None] * np.exp(-1j * np.outer(ee, times[s:s + chunk]))
        out[s:s + chunk] = np.einsum("mt,mt->t", a.conj(), O @ a).real
    warn = (f"dropped mass {dropped:.2e}",) if dropped > DROP_WARN else ()
    return Evolution(times, out, dropped, warn)


def evolve_states(spectrum: SpectrumResult, c, times, drop_tol: float = DROP_TOL):
    """Fock-basis states ``psi(t)`` as columns, yielded in time chunks of at most 256.

    Yields ``(time_slice, states)``; eigenstates below ``drop_tol`` weight are skipped.
    """
    c = np.asarray(c)
    times = np.asarray(times, float)
    idx, _ = _keep(c, drop_tol)
    for s in range(0, times.size, 256):
        t = times[s:s + 256]
        a = np.zeros((spectrum.n_states, t.size), dtype=complex)
        a[idx] = c[idx, None] * np.exp(-1j * np.outer(spectrum.energies[idx], t))
        yield slice(s, s + t.size), spectrum.expand(a)


def expectation_series(spectrum: SpectrumResult, op: ManyBodyOperator, c, times,
                       drop_tol: float = DROP_TOL) -> Evolution:
    """``<psi(t)| O |psi(t)>`` evaluated on Fock-basis states."""
    times = np.asarray(times, float)
    full = op.to_csr()
    out = np.empty(times.size)
    _, dropped = _keep(np.asarray(c), drop_tol)
    for sl, psi in evolve_states(spectrum, c, times, drop_tol):
        out[sl] = np.einsum("it,it->t", psi.conj(), full @ psi).real
    return Evolution(times, out, dropped, (f"dropped mass {dropped:.2e}",) if dropped > DROP_WARN else ())


# -- ensembles -----------------------------------------------------------------


def diagonal_ensemble(c, diag) -> float:
    """``sum_m |c_m|^2 O_mm``."""
    return float(np.sum(np.abs(np.asarray(c)) ** 2 * np.asarray(diag)))


@dataclass(frozen=True)
class EnsembleWindow:
    e_mid: float
    delta_e: float = 2.0

    @classmethod
    def from_overlaps(cls, c, energies, delta_e: float = 2.0) -> "EnsembleWindow":
        w = np.abs(np.asarray(c)) ** 2
        return cls(float(np.sum(w * energies) / np.sum(w)), delta_e)

    def members(self, energies) -> np.ndarray:
        sel = np.nonzero(np.abs(np.asarray(energies) - self.e_mid) <= self.delta_e)[0]
        if sel.size == 0:
            raise ValueError(f"no eigenstate within {self.delta_e} of E = {self.e_mid}")
        return sel


def microcanonical_ensemble(energies, diag, window: EnsembleWindow):
    """Flat average of ``O_mm`` over the window; returns ``(value, N_mc)``."""
    sel = window.members(energies)
    return float(np.mean(np.asarray(diag)[sel])), int(sel.size)


@dataclass(frozen=True, eq=False)
class ThermalizationMetrics:
    delta: np.ndarray  # O(t) - O_ME
    variance: float
    relative_deviation: float | None  # |(O_DE - O_ME) / O_DE|, None when O_DE = 0
    t_window: tuple


def thermalization_metrics(times, series, de: float, me: float, t0: float = 100.0,
                           t1: float = 400.0) -> ThermalizationMetrics:
    times = np.asarray(times, float)
    series = np.asarray(series, float)
    if t1 <= t0:
        raise ValueError("t1 must exceed t0")
    sel = (times >= t0 - 1e-9) & (times <= t1 + 1e-9)
    if not np.any(sel) or times[sel][0] > t0 + 1e-6 or times[sel][-1] < t1 - 1e-6:
        raise ValueError(f"series does not cover [{t0}, {t1}]")
    delta = series - me
    rel = None if de == 0 else abs((de - me) / de)
    return ThermalizationMetrics(delta, float(np.var(delta[sel])), rel, (t0, t1))


# -- one-body profiles ---------------------------------------------------------


def _profile_from_rho(rho, basis_fns) -> np.ndarray:
    """``sum_ij rho_ij conj(f_i) f_j`` for a stack of ``rho`` (T, n, n) and functions (n, X)."""
    return np.einsum("tix,ix->tx", rho @ basis_fns, basis_fns.conj())


def _real(val, what):
    if np.iscomplexobj(val):
        if np.max(np.abs(val.imag), initial=0.0) > 1e-10 * max(1.0, float(np.max(np.abs(val.real)))):
            raise ValueError(f"{what} has an imaginary part")
        val = val.real
    return val


def _check_trace(rho, n_particles):
    tr = np.real(np.trace(rho, axis1=-2, axis2=-1))
    if np.max(np.abs(tr - n_particles)) > 1e-8:
        raise ValueError(f"one-body density trace {tr} differs from N = {n_particles}")


def density_profile(component: str, basis: BasisTable, states, x) -> np.ndarray:
    """``n(x) = sum_ij rho_ij phi_i(x) phi_j(x)`` for each column of ``states``; shape ``(T, X)``."""
    n = basis.meta.n_a if component == "A" else basis.meta.n_b
    rho = one_body_density_matrices(basis, component, states)
    _check_trace(rho, n)
    phi = hermite_functions(basis.n_modes - 1, np.asarray(x, float))
    return _real(_profile_from_rho(rho, phi), "density")


def momentum_functions(n_modes: int, k) -> np.ndarray:
    """Fourier transforms ``(-i)^n phi_n(k)`` of the oscillator modes, shape ``(n_modes, K)``."""
    phase = np.array([momentum_mode_phase(n) for n in range(n_modes)])
    return phase[:, None] * hermite_functions(n_modes - 1, np.asarray(k, float))


def momentum_profile(basis: BasisTable, states, k) -> np.ndarray:
    """Total momentum distribution ``n(k)`` summed over both components; shape ``(T, K)``."""
    f = momentum_functions(basis.n_modes, k)
    total = 0.0
    for comp, n in (("A", basis.meta.n_a), ("B", basis.meta.n_b)):
        if n == 0:
            continue
        rho = one_body_density_matrices(basis, comp, states)
        _check_trace(rho, n)
        total = total + _profile_from_rho(rho, f)
    return _real(total, "momentum distribution")


def ensemble_density_matrix(spectrum: SpectrumResult, basis: BasisTable, component: str, weights,
                            chunk: int = 512) -> np.ndarray:
    """``sum_m w_m rho_m`` over eigenstates with nonzero weight."""
    weights = np.asarray(weights, float)
    idx = np.nonzero(weights)[0]
    out = np.zeros((basis.n_modes, basis.n_modes))
    for s in range(0, idx.size, chunk):
        part = idx[s:s + chunk]
        out += one_body_density_matrices(basis, component, spectrum.columns(part), weights[part])
    return out


def ensemble_profiles(spectrum: SpectrumResult, basis: BasisTable, c, window: EnsembleWindow, x=None, k=None,
                      component: str = "B") -> dict:
    """DE and ME density (``component``) and total momentum profiles."""
    w_de = np.abs(np.asarray(c)) ** 2
    w_me = np.zeros(spectrum.n_states)
    members = window.members(spectrum.energies)
    w_me[members] = 1.0 / members.size
    out = {}
    for name, w in (("DE", w_de), ("ME", w_me)):
        if x is not None:
            rho = ensemble_density_matrix(spectrum, basis, component, w)
            phi = hermite_functions(basis.n_modes - 1, np.asarray(x, float))
            out[f"density_{name}"] = _profile_from_rho(rho[None], phi)[0]
        if k is not None:
            f = momentum_functions(basis.n_modes, k)
            tot = 0.0
            for comp in ("A", "B"):
                rho = ensemble_density_matrix(spectrum, basis, comp, w)
                tot = tot + _profile_from_rho(rho[None].astype(complex), f)[0]
            out[f"momentum_{name}"] = _real(tot, "momentum distribution")
    return out


@dataclass(frozen=True, eq=False)
class ProfileDeviations:
    pointwise: np.ndarray  # |n(x, t) - n_ME(x)|
    integrated: np.ndarray  # integral over x of the above, per time
    de_me: float  # integral of |n_DE - n_ME|


def profile_deviations(profiles, me_profile, de_profile, grid) -> ProfileDeviations:
    """Absolute deviations from the ME profile and their trapezoid integrals over ``grid``."""
    grid = np.asarray(grid, float)
    profiles = np.atleast_2d(np.asarray(profiles, float))
    me_profile = np.asarray(me_profile, float)
    de_profile = np.asarray(de_profile, float)
    if profiles.shape[1] != grid.size or me_profile.shape != grid.shape or de_profile.shape != grid.shape:
        raise ValueError("profiles and grid do not match")
    d = np.abs(profiles - me_profile)
    return ProfileDeviations(d, np.trapezoid(d, grid, axis=1),
                             float(np.trapezoid(np.abs(de_profile - me_profile), grid)))


# -- full protocol -------------------------------------------------------------


@dataclass(eq=False)
class QuenchRecord:
    couplings: dict
    overlaps: np.ndarray
    times: np.ndarray
    series: dict = field(default_factory=dict)
    ensembles: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def settings_checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.settings, sort_keys=True).encode()).hexdigest()

    def summary(self) -> dict:
        return {"couplings": self.couplings, "ensembles": self.ensembles, "metrics": self.metrics,
                "settings": self.settings, "settings_checksum": self.settings_checksum,
                "completeness": completeness(self.overlaps), "warnings": self.warnings}

    def write(self, directory) -> dict:
        """Write CSV time series, profile arrays (``.npy`` + JSON) and a JSON summary; returns paths."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {}
        scalars = [k for k, v in self.series.items() if np.ndim(v) == 1]
        if scalars:
            p = d / "quench_series.csv"
            np.savetxt(p, np.column_stack([self.times] + [self.series[k] for k in scalars]), delimiter=",",
                       header=",".join(["t"] + scalars), comments="", fmt="%.17g")
            paths["series"] = p
        for k, v in self.series.items():
            if np.ndim(v) == 2:
                p = d / f"{k}.npy"
                np.save(p, np.ascontiguousarray(v, dtype="<f8"))
                Path(str(p) + ".json").write_text(json.dumps(
                    {"shape": list(v.shape), "dtype": "<f8", "axes": ["t", "grid"],
                     "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}, indent=2))
                paths[k] = p
        p = d / "quench_summary.json"
        p.write_text(json.dumps(self.summary(), indent=2, sort_keys=True, default=_json_default))
        paths["summary"] = p
        return paths


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def run_quench(spectrum: SpectrumResult, basis: BasisTable, hamiltonian: ManyBodyOperator,
               observable: ManyBodyOperator, spec: InitialStateSpec | None = None, t_max: float = 400.0,
               dt: float = 0.1, delta_e: float = 2.0, t_window=(100.0, 400.0), x=None, k=None,
               project: bool = False, drop_tol: float = DROP_TOL) -> QuenchRecord:
    """Quench protocol: overlaps, observable and profile dynamics, ensembles and deviation metrics."""
    from .eth import eigenbasis_diagonal

    spec = spec or reference_initial_state()
    psi0, retained = build_initial_state(spec, basis, project)
    c = overlaps(psi0, spectrum, basis)
    comp = completeness(c)
    if abs(comp - 1) > 1e-8:
        raise ValueError(f"overlap completeness {comp:.12f}; the spectrum does not span the initial state")
    times = np.round(np.arange(int(round(t_max / dt)) + 1) * dt, 12)
    window = EnsembleWindow.from_overlaps(c, spectrum.energies, delta_e)
    rec = QuenchRecord(dict(hamiltonian.meta or {}).get("couplings", {}), c, times)
    rec.settings = {"t_max": t_max, "dt": dt, "delta_e": delta_e, "t_window": list(t_window),
                    "drop_tol": drop_tol, "convention": spec.convention, "project": project,
                    "initial_energy_noninteracting": noninteracting_energy(spec), "retained_weight": retained,
                    "basis_checksum": basis.checksum()}

    # one pass over the Fock-basis trajectory serves every time series
    want_x, want_k = x is not None, k is not None
    u_op, h_op = observable.to_csr(), hamiltonian.to_csr()
    u_t, e_t, norms = np.empty(times.size), np.empty(times.size), np.empty(times.size)
    dens, mom = [], []
    for sl, psi in evolve_states(spectrum, c, times, drop_tol):
        u_t[sl] = np.einsum("it,it->t", psi.conj(), u_op @ psi).real
        e_t[sl] = np.einsum("it,it->t", psi.conj(), h_op @ psi).real
        norms[sl] = np.linalg.norm(psi, axis=0)
        if want_x:
            dens.append(density_profile("B", basis, psi, x))
        if want_k:
            mom.append(momentum_profile(basis, psi, k))
    _, dropped = _keep(c, drop_tol)
    if dropped > DROP_WARN:
        rec.warnings.append(f"dropped mass {dropped:.2e}")
    diag = eigenbasis_diagonal(spectrum, observable)
    u_de = diagonal_ensemble(c, diag)
    u_me, n_mc = microcanonical_ensemble(spectrum.energies, diag, window)
    m = thermalization_metrics(times, u_t, u_de, u_me, *t_window)
    rec.series.update({"U": u_t, "delta_U": m.delta, "energy": e_t})
    rec.ensembles.update({"E_mid": window.e_mid, "N_mc": n_mc, "U_DE": u_de, "U_ME": u_me})
    rec.metrics.update({"var_delta_U": m.variance, "delta_U_DE_ME": m.relative_deviation,
                        "dropped_mass": dropped, "energy_drift": float(np.max(np.abs(e_t - e_t[0]))),
                        "norm_drift": float(np.max(np.abs(norms - 1)))})

    if want_x or want_k:
        prof = ensemble_profiles(spectrum, basis, c, window, x, k, "B")
        sel = (times >= t_window[0] - 1e-9) & (times <= t_window[1] + 1e-9)
        if x is not None:
            nb = np.concatenate(dens)
            dev = profile_deviations(nb, prof["density_ME"], prof["density_DE"], x)
            rec.series.update({"density_B": nb, "Delta_nB": dev.integrated})
            rec.ensembles.update({"density_B_DE": prof["density_DE"], "density_B_ME": prof["density_ME"]})
            rec.metrics.update({"Delta_nB_DE_ME": dev.de_me, "var_Delta_nB": float(np.var(dev.integrated[sel]))})
        if k is not None:
            nk = np.concatenate(mom)
            dev = profile_deviations(nk, prof["momentum_ME"], prof["momentum_DE"], k)
            rec.series.update({"momentum": nk, "Delta_nk": dev.integrated})
            rec.metrics.update({"Delta_nk_DE_ME": dev.de_me})
    return rec
