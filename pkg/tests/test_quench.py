import json
import math

import numpy as np
import pytest

from bosemix.eigen import diagonalize
from bosemix.eth import eigenbasis_diagonal, observable_matrix
from bosemix.fock import enumerate_basis
from bosemix.hamiltonian import assemble_one_body, build_hamiltonian, one_body_density_matrices, trap_potential_spec
from bosemix.quench import (DroppedMassError, EnsembleWindow, InitialStateSpec, build_initial_state, completeness,
                            component_energy, density_profile, diagonal_ensemble, evolve_expectation,
                            evolve_states, expectation_series, microcanonical_ensemble, momentum_profile,
                            noninteracting_energy, overlaps, reference_initial_state, profile_deviations, run_quench,
                            thermalization_metrics)
from bosemix.sp_ho import hermite_functions, uniform_grid

SMALL_STATE = InitialStateSpec(tuple((i, 9 - i, 1.0) for i in range(5)), ((0, 0, 1.0), (0, 1, 1.0)))


@pytest.fixture(scope="module")
def small():
    b = enumerate_basis(2, 2, 10, "both", "component")
    H = build_hamiltonian(b, 2.5, 0.7, 3.1)
    spec = diagonalize(H)
    U = assemble_one_body(b, trap_potential_spec(b.n_modes))
    psi, _ = build_initial_state(SMALL_STATE, b)
    return b, H, spec, U, overlaps(psi, spec, b)


def test_reference_initial_state_energy():
    spec = reference_initial_state()
    assert component_energy(spec, "A") == pytest.approx(20.0, abs=1e-12)
    assert component_energy(spec, "B") == pytest.approx(1.5, abs=1e-12)
    assert noninteracting_energy(spec) == pytest.approx(21.5, abs=1e-12)
    sym = reference_initial_state("symmetrized")
    # Fock weights 2 and sqrt2: probabilities 2/3 and 1/3 on |2_0> and |1_0 1_1>
    assert component_energy(sym, "B") == pytest.approx(1.0 * 2 / 3 + 2.0 / 3)
    with pytest.raises(ValueError):
        InitialStateSpec((), (), "other")


def test_initial_state_vector_and_projection():
    both = enumerate_basis(2, 2, 20, "both", "component")
    psi, kept = build_initial_state(reference_initial_state(), both)
    assert kept == pytest.approx(1.0) and np.linalg.norm(psi) == pytest.approx(1.0)
    assert np.count_nonzero(psi) == 20
    even = enumerate_basis(2, 2, 20, "even", "component")
    with pytest.raises(ValueError, match="outside the basis"):
        build_initial_state(reference_initial_state(), even)
    psi_e, kept_e = build_initial_state(reference_initial_state(), even, project=True)
    assert kept_e == pytest.approx(0.5)
    assert np.count_nonzero(psi_e) == 10


def test_overlaps_complete(small):
    _, _, spec, _, c = small
    assert completeness(c) == pytest.approx(1.0, abs=1e-12)


def test_dual_route_expectation(small):
    # eigenbasis double sum versus Fock-basis evolution
    _, _, spec, U, c = small
    times = np.linspace(0, 30, 301)
    obs = observable_matrix(spec, U, (0, spec.n_states - 1))
    a = evolve_expectation(obs, c, spec.energies, times, drop_tol=0.0)
    b = expectation_series(spec, U, c, times, drop_tol=0.0)
    assert np.allclose(a.values, b.values, atol=1e-10)


def test_norm_and_energy_conservation_4000_steps(small):
    _, H, spec, _, c = small
    times = np.arange(4001) * 0.1
    e = expectation_series(spec, H, c, times, drop_tol=0.0).values
    assert np.max(np.abs(e - e[0])) < 1e-8
    for _, psi in evolve_states(spec, c, times, drop_tol=0.0):
        assert np.max(np.abs(np.linalg.norm(psi, axis=0) - 1)) < 1e-10


def test_long_time_average_is_diagonal_ensemble(small):
    _, _, spec, U, c = small
    obs = observable_matrix(spec, U, (0, spec.n_states - 1))
    rng = np.random.default_rng(5)
    times = np.sort(rng.uniform(0, 1e7, 40_000))
    avg = evolve_expectation(obs, c, spec.energies, times, drop_tol=0.0).values.mean()
    de = diagonal_ensemble(c, eigenbasis_diagonal(spec, U))
    assert avg == pytest.approx(de, abs=1e-3)


def test_momentum_profile_against_position_space_fourier(small, rng):
    b, _, spec, _, c = small
    psi = spec.expand(c * np.exp(-1j * spec.energies * 3.3))
    k = np.array([-2.5, -0.4, 0.0, 1.1, 3.0])
    nk = momentum_profile(b, psi[:, None], k)[0]
    g = uniform_grid(12.0, 1601)
    phi = hermite_functions(b.n_modes - 1, g.points)
    oracle = np.zeros(k.size)
    for comp in ("A", "B"):
        rho = one_body_density_matrices(b, comp, psi[:, None])[0]
        G = phi.T @ rho @ phi  # <psi+(x) psi(x')>
        ph = np.exp(-1j * np.outer(k, g.points)) * g.weights
        oracle += np.real(np.einsum("kx,xy,ky->k", ph.conj(), G, ph)) / (2 * math.pi)
    assert np.allclose(nk, oracle, atol=1e-6)
    kk = uniform_grid(12.0, 961)
    assert kk.integrate(momentum_profile(b, psi[:, None], kk.points)[0]) == pytest.approx(4.0, abs=1e-8)


def test_density_profile_normalized(small):
    b, _, spec, _, c = small
    g = uniform_grid(10.0, 801)
    psi = spec.expand(c * np.exp(-0.7j * spec.energies))
    n = density_profile("B", b, psi[:, None], g.points)[0]
    assert g.integrate(n) == pytest.approx(2.0, abs=1e-8)
    assert np.all(n > -1e-12)


def test_ensembles_and_metrics(small):
    _, _, spec, U, c = small
    diag = eigenbasis_diagonal(spec, U)
    win = EnsembleWindow.from_overlaps(c, spec.energies, 2.0)
    assert win.e_mid == pytest.approx(np.sum(np.abs(c) ** 2 * spec.energies))
    me, n_mc = microcanonical_ensemble(spec.energies, diag, win)
    sel = np.abs(spec.energies - win.e_mid) <= 2.0
    assert n_mc == sel.sum() and me == pytest.approx(diag[sel].mean())
    with pytest.raises(ValueError):
        EnsembleWindow(1e6, 1.0).members(spec.energies)
    t = np.arange(0, 401) * 1.0
    m = thermalization_metrics(t, np.sin(t) + 2.0, 2.5, 2.0, 100, 400)
    assert m.variance == pytest.approx(np.var(np.sin(t[100:]) + 0.0), rel=1e-12)
    assert m.relative_deviation == pytest.approx(0.2)
    with pytest.raises(ValueError):
        thermalization_metrics(t[:200], t[:200], 1, 1, 100, 400)


def test_profile_deviations():
    x = np.linspace(-1, 1, 201)
    d = profile_deviations(np.vstack([x * 0 + 1, x * 0]), x * 0, x * 0 + 0.5, x)
    assert np.allclose(d.integrated, [2.0, 0.0])
    assert d.de_me == pytest.approx(1.0)


def test_dropped_mass_guard(small):
    _, _, spec, U, c = small
    obs = observable_matrix(spec, U, (0, spec.n_states - 1))
    with pytest.raises(DroppedMassError):
        evolve_expectation(obs, c, spec.energies, [0.0], drop_tol=1e-2)


def test_run_quench_end_to_end(small, tmp_path):
    b, H, spec, U, _ = small
    x = np.linspace(-7, 7, 141)
    rec = run_quench(spec, b, H, U, SMALL_STATE, t_max=60, dt=0.1, t_window=(20, 60), x=x, k=x)
    assert rec.metrics["energy_drift"] < 1e-8 and rec.metrics["norm_drift"] < 1e-10
    assert rec.series["density_B"].shape == (601, 141)
    assert rec.ensembles["N_mc"] > 0
    paths = rec.write(tmp_path)
    summ = json.loads(paths["summary"].read_text())
    assert summ["completeness"] == pytest.approx(1.0)
    side = json.loads((tmp_path / "density_B.npy.json").read_text())
    assert side["shape"] == [601, 141]
    data = np.loadtxt(paths["series"], delimiter=",", skiprows=1)
    assert data.shape == (601, 6)  # t, U, delta_U, energy, Delta_nB, Delta_nk
