import json

import numpy as np
import pytest

from bosemix.eigen import diagonalize
from bosemix.eth import (ZeroVarianceError, diagonal_fock_states, eigenbasis_diagonal, eigenbasis_elements,
                         eth_summary, gaussian_fit, kurtosis, observable_matrix, offdiag_band_profile,
                         sector_filter, write_json)
from bosemix.fock import FockState, enumerate_basis
from bosemix.hamiltonian import assemble_one_body, build_hamiltonian, trap_potential_spec


@pytest.fixture(scope="module")
def system():
    b = enumerate_basis(2, 2, 10, "even", "component")
    H = build_hamiltonian(b, 4.0, 4.0, 4.0)
    spec = diagonalize(H)
    U = assemble_one_body(b, trap_potential_spec(b.n_modes))
    return b, spec, U


def test_kurtosis_reference_distributions(rng):
    assert kurtosis(rng.standard_normal(100_000)) == pytest.approx(3.0, abs=0.1)
    assert kurtosis(rng.uniform(-1, 1, 100_000)) == pytest.approx(1.8, abs=0.05)
    assert kurtosis(rng.laplace(size=200_000)) == pytest.approx(6.0, abs=0.3)
    with pytest.raises(ValueError):
        kurtosis(np.ones(10))
    with pytest.raises(ZeroVarianceError):
        kurtosis(np.full(2000, 0.3))


def test_kurtosis_scale_and_shift_invariant(rng):
    x = rng.gamma(2.0, size=5000)
    assert kurtosis(3.5 * x - 7) == pytest.approx(kurtosis(x), rel=1e-10)


def test_gaussian_fit(rng):
    g = gaussian_fit(rng.normal(2.0, 0.5, 50_000))
    assert g.mean == pytest.approx(2.0, abs=0.01) and g.std == pytest.approx(0.5, abs=0.01)
    assert g.residual < 0.03
    assert gaussian_fit(rng.uniform(size=50_000)).residual > 0.05


def test_observable_matrix(system):
    b, spec, U = system
    obs = observable_matrix(spec, U, (40, 90))
    assert obs.elements.shape == (51, 51)
    assert np.allclose(obs.elements, obs.elements.T)
    assert np.allclose(obs.diagonal, eigenbasis_diagonal(spec, U)[40:91])
    V = spec.vectors[:, 40:91]
    assert np.allclose(obs.elements, V.T @ U.to_dense() @ V, atol=1e-10)
    W = spec.vectors[:, [3, 4]]
    assert np.allclose(eigenbasis_elements(spec, U, [3, 4]), W.T @ U.to_dense() @ W, atol=1e-10)
    with pytest.raises(IndexError):
        observable_matrix(spec, U, (0, spec.n_states))


def test_band_profile_and_csv(system, tmp_path):
    _, spec, U = system
    obs = observable_matrix(spec, U, (10, 30))
    prof = offdiag_band_profile(obs)
    assert prof.m.size == 21 * 20 // 2
    assert np.all(prof.omega >= 0)
    prof.to_csv(tmp_path / "band.csv")
    obs.to_csv(tmp_path / "o.csv")
    rows = (tmp_path / "o.csv").read_text().splitlines()
    assert len(rows) == 1 + 21 * 22 // 2


def test_sector_filter_removes_exchange_odd_states(system):
    b, spec, _ = system
    lab = sector_filter(spec, b)
    # exchange parity of each eigenstate from the A <-> B permutation
    perm = np.array([b.lookup(FockState(s.occ_b, s.occ_a)) for s in b.states])
    V = spec.vectors
    swap = np.einsum("im,im->m", V[perm], V)
    nondegenerate = np.r_[np.diff(spec.energies) > 1e-7, True] & np.r_[True, np.diff(spec.energies) > 1e-7]
    odd = nondegenerate & (swap < -0.999)
    even = nondegenerate & (swap > 0.999)
    assert odd.any() and even.any()
    assert np.all(lab.weights[odd] < 1e-20)
    assert np.all(lab.retained[even])
    assert 0.3 < lab.removed_fraction < 0.6
    diag = diagonal_fock_states(b)
    assert all(b.state(k).occ_a == b.state(k).occ_b for k in diag)


def test_eth_summary(system, rng, tmp_path):
    b, spec, U = system
    obs = observable_matrix(spec, U, (100, 200))
    lab = sector_filter(spec, b)
    summ = eth_summary(obs, lab)
    assert summ["inverse_kurtosis"] == pytest.approx(1 / summ["kurtosis"])
    assert summ["retained_in_window"] <= 101
    write_json(tmp_path / "s.json", summ)
    assert json.loads((tmp_path / "s.json").read_text())["window"] == [100, 200]
    with pytest.raises(ValueError):
        diagonal_fock_states(enumerate_basis(2, 1, 5))
