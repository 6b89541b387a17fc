import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bosemix.fock import FockState, enumerate_basis
from bosemix.hamiltonian import (OneBodySpec, assemble_hamiltonian, assemble_one_body, build_hamiltonian,
                                 common_pair_cutoff, load_operator, one_body_density_matrices,
                                 one_body_density_matrix, required_pair_cutoff, save_operator,
                                 trap_potential_spec)
from bosemix.interaction import bare_pair_tensor, effective_pair_tensor, relative_energy_exact


def _random_tensor(n, rng):
    W = rng.normal(size=(n,) * 4)
    W = W + W.transpose(2, 3, 0, 1)
    W = W + W.transpose(1, 0, 3, 2)
    return W


def _sym_amp(occ):
    """First-quantized symmetric amplitude over ordered mode tuples for an occupation vector."""
    modes = [m for m, o in enumerate(occ) for _ in range(o)]
    perms = set(itertools.permutations(modes))
    return {p: 1.0 / math.sqrt(len(perms)) for p in perms}


def _brute_intra(configs, W):
    """<F| 1/2 sum_{a != b} V_ab |F'> from first-quantized symmetric states of one component."""
    amps = [_sym_amp(c) for c in configs]
    n = len(configs)
    out = np.zeros((n, n))
    for r in range(n):
        for c in range(n):
            tot = 0.0
            for p, ap in amps[r].items():
                for q, aq in amps[c].items():
                    N = len(p)
                    for a in range(N):
                        for b in range(N):
                            if a == b:
                                continue
                            if any(p[k] != q[k] for k in range(N) if k not in (a, b)):
                                continue
                            tot += 0.5 * ap * aq * W[p[a], p[b], q[a], q[b]]
            out[r, c] = tot
    return out


def test_zero_coupling_is_fock_diagonal():
    b = enumerate_basis(2, 2, 10, "even", "component")
    H = build_hamiltonian(b, 0, 0, 0).to_dense()
    assert np.array_equal(H, np.diag(b.energies))


@pytest.mark.parametrize("n_particles", [2, 3])
def test_intra_component_matches_first_quantized(n_particles, rng):
    b = enumerate_basis(n_particles, 0, n_particles / 2 + 4, "both", "total")
    W = _random_tensor(b.n_modes, rng)
    from bosemix.interaction import PairTensor
    t = PairTensor("AA", 1.0, W, "bare", 2 * b.n_modes)
    H = assemble_hamiltonian(b, w_a=t).to_dense()
    configs = [b.state(k).occ_a for k in range(len(b))]
    oracle = np.diag(b.energies) + _brute_intra(configs, W)
    assert np.allclose(H, oracle, atol=1e-12)


def test_inter_component_matches_tensor(rng):
    # one boson per component: <i_A j_B| H_AB |k_A l_B> = W[i, j, k, l]
    b = enumerate_basis(1, 1, 6, "both", "total")
    W = _random_tensor(b.n_modes, rng)
    from bosemix.interaction import PairTensor
    H = assemble_hamiltonian(b, w_ab=PairTensor("AB", 1.0, W, "bare", 20)).to_dense()
    idx = [(s.occ_a.index(1), s.occ_b.index(1)) for s in b.states]
    for r, (i, j) in enumerate(idx):
        for c, (k, l) in enumerate(idx):
            expect = W[i, j, k, l] + (b.energies[r] if r == c else 0.0)
            assert H[r, c] == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("g", [1.0, 5.0, 20.0])
def test_one_plus_one_exact(g):
    b = enumerate_basis(1, 1, 12, "both", "total")
    ev = np.linalg.eigvalsh(build_hamiltonian(b, 0, 0, g).to_dense())
    exact = sorted(N + 0.5 + (n + 0.5 if n % 2 else relative_energy_exact(g, n // 2))
                   for N in range(11) for n in range(11 - N))
    assert np.allclose(ev[:10], exact[:10], atol=1e-10)


def test_pair_cutoffs():
    b = enumerate_basis(2, 2, 20, "even", "component")
    assert required_pair_cutoff(b, "AA") == 19
    assert required_pair_cutoff(b, "AB") == 38
    assert common_pair_cutoff(b) == 38
    with pytest.raises(ValueError, match="covers pairs"):
        assemble_hamiltonian(b, w_ab=effective_pair_tensor(1.0, b.n_modes, 10))


def test_equal_couplings_keep_exchange_symmetry():
    b = enumerate_basis(2, 2, 9, "even", "component")
    H = build_hamiltonian(b, 3.0, 3.0, 3.0).to_dense()
    perm = np.array([b.lookup(FockState(s.occ_b, s.occ_a)) for s in b.states])
    assert np.allclose(H[np.ix_(perm, perm)], H, atol=1e-12)
    # unequal intra couplings break it
    H2 = build_hamiltonian(b, 3.0, 1.0, 3.0).to_dense()
    assert not np.allclose(H2[np.ix_(perm, perm)], H2, atol=1e-6)


def test_bare_tensor_hamiltonian_is_symmetric():
    b = enumerate_basis(2, 1, 7, "both", "total")
    op = build_hamiltonian(b, 1.0, 0.0, 2.0, kind="bare")
    H = op.to_dense()
    assert np.allclose(H, H.T)
    assert op.meta["g_AB"] == 2.0 and op.meta["pair_cutoff"] == common_pair_cutoff(b)
    with pytest.raises(ValueError):
        build_hamiltonian(b, 1, 1, 1, kind="weird")


def test_trap_potential_virial_on_fock_states():
    # <F| 1/2 sum x^2 |F> = E(F) / 2 for any Fock state
    b = enumerate_basis(2, 2, 8, "both", "total")
    U = assemble_one_body(b, trap_potential_spec(b.n_modes)).to_dense()
    assert np.allclose(np.diag(U), b.energies / 2)
    with pytest.raises(ValueError):
        OneBodySpec("C", np.eye(2))
    with pytest.raises(ValueError):
        OneBodySpec("A", np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_density_matrix_of_fock_state_and_trace(rng):
    b = enumerate_basis(2, 2, 8, "both", "component")
    k = 17
    e = np.zeros(len(b))
    e[k] = 1.0
    rho = one_body_density_matrix(b, "A", e)
    assert np.allclose(rho, np.diag(b.state(k).occ_a))
    psi = rng.normal(size=(len(b), 5)) + 1j * rng.normal(size=(len(b), 5))
    psi /= np.linalg.norm(psi, axis=0)
    rhos = one_body_density_matrices(b, "B", psi)
    assert np.allclose(np.trace(rhos, axis1=1, axis2=2), 2.0)
    assert np.allclose(rhos, rhos.conj().transpose(0, 2, 1))
    w = rng.random(5)
    mixed = one_body_density_matrices(b, "B", psi, weights=w)
    assert np.allclose(mixed, np.einsum("t,tij->ij", w, rhos))
    with pytest.raises(ValueError):
        one_body_density_matrix(b, "A", 2 * e)


@given(st.integers(0, 10**6))
def test_density_matrix_matches_operator_expectation(seed):
    # rho_ij = <psi| a+_i a_j |psi> equals the expectation of the lifted one-body operator
    rng = np.random.default_rng(seed)
    b = enumerate_basis(2, 1, 6, "both", "total")
    psi = rng.normal(size=len(b))
    psi /= np.linalg.norm(psi)
    o = rng.normal(size=(b.n_modes, b.n_modes))
    o = o + o.T
    op = assemble_one_body(b, OneBodySpec("A", o)).to_dense()
    rho = one_body_density_matrix(b, "A", psi)
    assert np.sum(rho * o) == pytest.approx(psi @ op @ psi, abs=1e-10)


def test_operator_roundtrip(tmp_path):
    b = enumerate_basis(2, 2, 7, "even", "component")
    op = build_hamiltonian(b, 1.0, 2.0, 3.0)
    save_operator(tmp_path / "h.bin", op)
    back = load_operator(tmp_path / "h.bin", b)
    assert (back.to_csr() != op.to_csr()).nnz == 0
    other = enumerate_basis(2, 2, 7, "odd", "component")
    with pytest.raises(ValueError):
        load_operator(tmp_path / "h.bin", other)
