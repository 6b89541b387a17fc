"""Second-quantized many-body operators over a ``BasisTable``.

The Hamiltonian is

    H = sum_s [ sum_i (i + 1/2) n_{s,i}
                + 1/2 sum_{ijkl} W^s_{ijkl} a+_{s,i} a+_{s,j} a_{s,l} a_{s,k} ]
        + sum_{ijkl} W^AB_{ijkl} a+_{A,i} a+_{B,j} a_{B,l} a_{A,k}

with ``W[i, j, k, l] = <i j|V|k l>``. Intra-component pieces are applied with
explicit sqrt-occupation factors on the configuration list of one component;
the inter-component piece is a sum of Kronecker products of one-body
transition operators. Both are lifted to the (product-space) many-body basis
and restricted to the states actually present in the table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sps

from .fock import BasisTable
from .interaction import CHANNELS, PairTensor, bare_pair_tensor, check_pair_tensor, effective_pair_tensor
from .sp_ho import x_squared_matrix

DROP_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class ManyBodyOperator:
    """Real symmetric operator stored as its upper triangle (diagonal included)."""

    basis: BasisTable
    upper: sps.csr_matrix
    kind: str = "hamiltonian"
    meta: dict | None = None

    @property
    def dimension(self) -> int:
        return self.upper.shape[0]

    def to_csr(self) -> sps.csr_matrix:
        diag = sps.diags(self.upper.diagonal())
        return (self.upper + self.upper.T - diag).tocsr()

    def to_dense(self, dtype=float) -> np.ndarray:
        m = self.upper.toarray().astype(dtype, copy=False)
        d = np.diagonal(m).copy()
        m += m.T
        m[np.diag_indices_from(m)] = d
        return m

    def triplets(self):
        coo = self.upper.tocoo()
        return coo.row, coo.col, coo.data

    def submatrix(self, rows: np.ndarray) -> "ManyBodyOperator":
        """Restriction to a subset of basis states (kept as the same basis reference)."""
        full = self.to_csr()[rows][:, rows]
        return ManyBodyOperator(self.basis, sps.triu(full, format="csr"), self.kind, self.meta)


def _from_full(basis, full: sps.spmatrix, kind, meta=None) -> ManyBodyOperator:
    full = full.tocsr()
    full.data[np.abs(full.data) < DROP_TOL] = 0.0
    full.eliminate_zeros()
    up = sps.triu(full, format="csr")
    up.sort_indices()
    return ManyBodyOperator(basis, up, kind, meta or {})


# -- component-level algebra ---------------------------------------------


class ComponentSpace:
    """Operators acting on the configuration list of one component."""

    def __init__(self, configs: tuple):
        self.configs = configs
        self.n_modes = len(configs[0])
        self.lookup = {c: k for k, c in enumerate(configs)}
        self._transitions = None

    def __len__(self):
        return len(self.configs)

    @property
    def transitions(self):
        """Arrays ``(i, j, row, col, amp)`` with ``<row| a+_i a_j |col> = amp``."""
        if self._transitions is None:
            rows = []
            for col, c in enumerate(self.configs):
                for j, nj in enumerate(c):
                    if nj == 0:
                        continue
                    tmp = list(c)
                    tmp[j] -= 1
                    for i in range(self.n_modes):
                        tmp[i] += 1
                        row = self.lookup.get(tuple(tmp))
                        if row is not None:
                            rows.append((i, j, row, col, np.sqrt(nj * tmp[i])))
                        tmp[i] -= 1
            arr = np.array(rows, dtype=float).reshape(-1, 5)
            self._transitions = (arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64),
                                 arr[:, 2].astype(np.int64), arr[:, 3].astype(np.int64), arr[:, 4])
        return self._transitions

    def one_body(self, o: np.ndarray) -> np.ndarray:
        """Dense matrix of ``sum_ij o_ij a+_i a_j``."""
        i, j, r, c, amp = self.transitions
        m = np.zeros((len(self), len(self)))
        np.add.at(m, (r, c), o[i, j] * amp)
        return m

    def two_body(self, W: np.ndarray) -> np.ndarray:
        """Dense matrix of ``1/2 sum_ijkl W_ijkl a+_i a+_j a_l a_k``."""
        n = self.n_modes
        m = np.zeros((len(self), len(self)))
        ii, jj = np.divmod(np.arange(n * n), n)
        for col, c in enumerate(self.configs):
            occ = [(k, nk) for k, nk in enumerate(c) if nk]
            for k, nk in occ:
                for l, nl in occ:
                    nl_eff = nl - (k == l)
                    if nl_eff <= 0:
                        continue
                    alpha = np.sqrt(nk * nl_eff)
                    mid = list(c)
                    mid[k] -= 1
                    mid[l] -= 1
                    coeff = 0.5 * alpha * W[:, :, k, l].ravel()
                    for p in np.nonzero(coeff)[0]:
                        i, j = ii[p], jj[p]
                        mid[j] += 1
                        beta = np.sqrt(mid[j])
                        mid[i] += 1
                        beta *= np.sqrt(mid[i])
                        row = self.lookup.get(tuple(mid))
                        if row is not None:
                            m[row, col] += coeff[p] * beta
                        mid[i] -= 1
                        mid[j] -= 1
        return m

    def transition_operators(self):
        """``{(i, j): sparse a+_i a_j}`` for every mode pair with a nonzero matrix."""
        i, j, r, c, amp = self.transitions
        ops = {}
        key = i * self.n_modes + j
        order = np.argsort(key, kind="stable")
        bounds = np.searchsorted(key[order], np.arange(self.n_modes * self.n_modes + 1))
        for p in range(self.n_modes * self.n_modes):
            sel = order[bounds[p]:bounds[p + 1]]
            if sel.size:
                ops[divmod(p, self.n_modes)] = sps.csr_matrix(
                    (amp[sel], (r[sel], c[sel])), shape=(len(self), len(self)))
        return ops


@lru_cache(maxsize=16)
def _spaces(basis: BasisTable):
    return ComponentSpace(basis.configs_a), ComponentSpace(basis.configs_b)


def component_spaces(basis: BasisTable):
    return _spaces(basis)


def _product_rows(basis: BasisTable) -> np.ndarray:
    return basis.cfg_a * len(basis.configs_b) + basis.cfg_b


def _lift(basis: BasisTable, op_a=None, op_b=None) -> sps.csr_matrix:
    """``op_a x 1 + 1 x op_b`` on the product space, restricted to the basis."""
    na, nb = len(basis.configs_a), len(basis.configs_b)
    total = sps.csr_matrix((na * nb, na * nb))
    if op_a is not None:
        total = total + sps.kron(sps.csr_matrix(op_a), sps.identity(nb), format="csr")
    if op_b is not None:
        total = total + sps.kron(sps.identity(na), sps.csr_matrix(op_b), format="csr")
    rows = _product_rows(basis)
    return total[rows][:, rows]


def required_pair_cutoff(basis: BasisTable, channel: str) -> int:
    """Largest ``i + j`` a pair in ``channel`` can reach inside ``basis``."""
    xa = np.array([sum(i * o for i, o in enumerate(c)) for c in basis.configs_a])
    xb = np.array([sum(i * o for i, o in enumerate(c)) for c in basis.configs_b])
    if channel == "AA":
        return int(xa.max()) if basis.meta.n_a >= 2 else 0
    if channel == "BB":
        return int(xb.max()) if basis.meta.n_b >= 2 else 0
    if basis.meta.n_a == 0 or basis.meta.n_b == 0:
        return 0
    return int((xa[basis.cfg_a] + xb[basis.cfg_b]).max())


def _check_tensor(basis, t: PairTensor | None, channel):
    if t is None:
        return
    if t.n_modes != basis.n_modes:
        raise ValueError(f"{channel} tensor has {t.n_modes} modes, basis has {basis.n_modes}")
    check_pair_tensor(t)
    need = required_pair_cutoff(basis, channel)
    if t.kind == "effective" and t.pair_cutoff < need:
        raise ValueError(f"{channel} effective tensor covers pairs up to {t.pair_cutoff}, basis reaches {need}")


def assemble_hamiltonian(basis: BasisTable, w_a: PairTensor | None = None, w_b: PairTensor | None = None,
                         w_ab: PairTensor | None = None) -> ManyBodyOperator:
    """Many-body Hamiltonian in the oscillator Fock basis; ``None`` tensors mean no coupling."""
    for t, ch in ((w_a, "AA"), (w_b, "BB"), (w_ab, "AB")):
        _check_tensor(basis, t, ch)
    sa, sb = component_spaces(basis)
    h1 = np.diag(np.arange(basis.n_modes) + 0.5)
    ha = sa.one_body(h1)
    hb = sb.one_body(h1)
    if w_a is not None and w_a.g != 0 and basis.meta.n_a >= 2:
        ha = ha + sa.two_body(w_a.W)
    if w_b is not None and w_b.g != 0 and basis.meta.n_b >= 2:
        hb = hb + sb.two_body(w_b.W)
    full = _lift(basis, ha, hb)
    if w_ab is not None and w_ab.g != 0 and basis.meta.n_a and basis.meta.n_b:
        full = full + _inter_component(basis, sa, sb, w_ab.W)
    full = 0.5 * (full + full.T)
    meta = {
        "couplings": {t.channel: t.g for t in (w_a, w_b, w_ab) if t is not None},
        "tensor_kind": sorted({t.kind for t in (w_a, w_b, w_ab) if t is not None}),
        "basis_checksum": basis.checksum(),
    }
    return _from_full(basis, full, "hamiltonian", meta)


def common_pair_cutoff(basis: BasisTable) -> int:
    """Largest pair mode sum reachable in any channel of ``basis``."""
    return max(required_pair_cutoff(basis, ch) for ch in CHANNELS)


def build_hamiltonian(basis: BasisTable, g_a: float, g_b: float, g_ab: float, kind: str = "effective",
                      pair_cutoff: int | None = None) -> ManyBodyOperator:
    """Hamiltonian for contact couplings ``(g_A, g_B, g_AB)``.

    All three channels use the same pair space (``common_pair_cutoff`` by
    default), so equal couplings give the same two-body operator in every
    channel and the pseudo-spin symmetry of the equal-coupling point is kept
    by the interaction.
    """
    if kind not in ("effective", "bare"):
        raise ValueError("kind must be 'effective' or 'bare'")
    L = common_pair_cutoff(basis) if pair_cutoff is None else int(pair_cutoff)
    cache = {}

    def tensor(g, channel):
        if g not in cache:
            cache[g] = (effective_pair_tensor(g, basis.n_modes, L, channel) if kind == "effective"
                        else bare_pair_tensor(g, basis.n_modes, channel))
        return cache[g].with_channel(channel)

    op = assemble_hamiltonian(basis, tensor(g_a, "AA"), tensor(g_b, "BB"), tensor(g_ab, "AB"))
    op.meta.update({"g_A": float(g_a), "g_B": float(g_b), "g_AB": float(g_ab), "pair_cutoff": L})
    return op


def _inter_component(basis, sa: ComponentSpace, sb: ComponentSpace, W) -> sps.csr_matrix:
    # sum_{ik} E^A_{ik} (x) [sum_{jl} W_ijkl E^B_{jl}]
    n = basis.n_modes
    ea = sa.transition_operators()
    bi, bj, br, bc, bamp = sb.transitions
    na, nb = len(sa), len(sb)
    rows = _product_rows(basis)
    pos = np.full(na * nb, -1, dtype=np.int64)
    pos[rows] = np.arange(rows.size)
    acc = []
    for (i, k), e in ea.items():
        vals = W[i, bi, k, bj] * bamp
        keep = np.abs(vals) > 0
        if not np.any(keep):
            continue
        mb = sps.csr_matrix((vals[keep], (br[keep], bc[keep])), shape=(nb, nb))
        term = sps.kron(e, mb, format="coo")
        r, c = pos[term.row], pos[term.col]
        ok = (r >= 0) & (c >= 0)
        acc.append((r[ok], c[ok], term.data[ok]))
    if not acc:
        return sps.csr_matrix((rows.size, rows.size))
    r = np.concatenate([a[0] for a in acc])
    c = np.concatenate([a[1] for a in acc])
    v = np.concatenate([a[2] for a in acc])
    return sps.csr_matrix((v, (r, c)), shape=(rows.size, rows.size))


@dataclass(frozen=True)
class OneBodySpec:
    component: str  # "A", "B" or "both"
    matrix: np.ndarray

    def __post_init__(self):
        if self.component not in ("A", "B", "both"):
            raise ValueError("component must be 'A', 'B' or 'both'")
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("one-body matrix must be square")
        if not np.allclose(m, m.T, atol=1e-14, rtol=0):
            raise ValueError("one-body matrix must be symmetric")


def trap_potential_spec(n_modes: int) -> OneBodySpec:
    """``U = 1/2 sum x^2`` over both components."""
    return OneBodySpec("both", 0.5 * x_squared_matrix(n_modes))


def assemble_one_body(basis: BasisTable, spec: OneBodySpec) -> ManyBodyOperator:
    """``sum_ij o_ij a+_i a_j`` on the selected component(s)."""
    if spec.matrix.shape[0] != basis.n_modes:
        raise ValueError(f"one-body matrix has {spec.matrix.shape[0]} modes, basis has {basis.n_modes}")
    sa, sb = component_spaces(basis)
    oa = sa.one_body(spec.matrix) if spec.component in ("A", "both") else None
    ob = sb.one_body(spec.matrix) if spec.component in ("B", "both") else None
    full = _lift(basis, oa, ob)
    return _from_full(basis, 0.5 * (full + full.T), "one_body_observable", {"component": spec.component})


# -- reduced densities -----------------------------------------------------


def _product_amplitudes(basis: BasisTable, states: np.ndarray) -> np.ndarray:
    """Columns of ``states`` reshaped to ``(T, n_cfg_a, n_cfg_b)`` (zero outside the basis)."""
    psi = np.zeros((states.shape[1], len(basis.configs_a), len(basis.configs_b)), dtype=states.dtype)
    psi[:, basis.cfg_a, basis.cfg_b] = states.T
    return psi


def one_body_density_matrices(basis: BasisTable, component: str, states, weights=None,
                              chunk: int = 256) -> np.ndarray:
    """``rho_ij = <a+_i a_j>`` for each column of ``states``.

    With ``weights`` the weighted sum over columns is returned instead (a
    mixed state). Returns shape ``(T, n, n)`` or ``(n, n)``.
    """
    states = np.asarray(states)
    if states.ndim == 1:
        states = states[:, None]
    if component not in ("A", "B"):
        raise ValueError("component must be 'A' or 'B'")
    sa, sb = component_spaces(basis)
    space = sa if component == "A" else sb
    i, j, r, c, amp = space.transitions
    n = basis.n_modes
    T = states.shape[1]
    out = np.zeros((1 if weights is not None else T, n, n), dtype=np.result_type(states.dtype, float))
    for s in range(0, T, chunk):
        psi = _product_amplitudes(basis, states[:, s:s + chunk])
        if component == "B":
            psi = psi.transpose(0, 2, 1)
        if weights is not None:
            w = np.asarray(weights)[s:s + chunk]
            # stack the columns side by side so the weighted sum is one matmul
            left = (psi * w[:, None, None]).transpose(1, 0, 2).reshape(psi.shape[1], -1)
            right = psi.transpose(1, 0, 2).reshape(psi.shape[1], -1)
            gram = (left @ right.conj().T)[None]
        else:
            gram = psi @ psi.conj().transpose(0, 2, 1)  # G[a, a'] = sum_b psi[a,b] conj(psi[a',b])
        # rho_ij = sum E_ij[row, col] G[col, row]
        vals = amp[None, :] * gram[:, c, r]
        target = out if weights is not None else out[s:s + chunk]
        flat = target.reshape(target.shape[0], n * n)
        idx = i * n + j
        for t in range(vals.shape[0]):
            flat[t] += np.bincount(idx, weights=vals[t].real, minlength=n * n) + (
                1j * np.bincount(idx, weights=vals[t].imag, minlength=n * n) if np.iscomplexobj(vals) else 0)
    return out[0] if weights is not None else out


def one_body_density_matrix(basis: BasisTable, component: str, state, tol: float = 1e-10) -> np.ndarray:
    """``rho_ij = <psi| a+_i a_j |psi>`` of one normalized state."""
    state = np.asarray(state)
    nrm = np.vdot(state, state).real
    if abs(nrm - 1) > tol:
        raise ValueError(f"state norm^2 = {nrm} is not 1 within {tol}")
    rho = one_body_density_matrices(basis, component, state)[0]
    return rho if np.iscomplexobj(rho) and np.any(rho.imag) else rho.real


# -- operator cache --------------------------------------------------------


def save_operator(path, op: ManyBodyOperator) -> None:
    """Upper-triangle triplets as raw ``<i8 row, <i8 col, <f8 value`` blocks plus a JSON sidecar."""
    path = Path(path)
    r, c, v = op.triplets()
    payload = (np.asarray(r, "<i8").tobytes() + np.asarray(c, "<i8").tobytes() + np.asarray(v, "<f8").tobytes())
    path.write_bytes(payload)
    side = {"format": "bosemix-operator", "version": 1, "kind": op.kind, "dimension": op.dimension,
            "nnz": int(len(v)), "basis_checksum": op.basis.checksum(), "meta": op.meta or {},
            "sha256": hashlib.sha256(payload).hexdigest()}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True, default=str))


def load_operator(path, basis: BasisTable) -> ManyBodyOperator:
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != side["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    if side["basis_checksum"] != basis.checksum():
        raise ValueError(f"{path}: operator was built for a different basis")
    nnz, d = side["nnz"], side["dimension"]
    r = np.frombuffer(raw[:8 * nnz], "<i8")
    c = np.frombuffer(raw[8 * nnz:16 * nnz], "<i8")
    v = np.frombuffer(raw[16 * nnz:], "<f8")
    up = sps.csr_matrix((v.astype(float), (r, c)), shape=(d, d))
    return ManyBodyOperator(basis, up, side["kind"], side["meta"])
