"""Energy-truncated, parity-resolved Fock basis for a two-component Bose gas.

A many-body state is a pair of occupation vectors over oscillator modes.
Two truncation rules are available:

``"total"``
    noninteracting energy of the whole state ``E(F) <= e_max``.
``"component"``
    each component separately, ``E_A(F) <= e_max`` and ``E_B(F) <= e_max``.

Every state is a product of one configuration per component, so the table
also keeps, for each state, the index of its A and B configuration in the
per-component lists. Operators act on those small lists and are lifted to
the many-body basis through ``BasisTable.product_index``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

PARITIES = ("even", "odd", "both")
TRUNCATIONS = ("total", "component")
DEFAULT_MAX_DIM = 200_000
BASIS_FORMAT_VERSION = 1


class EmptyBasisError(ValueError):
    pass


class BasisTooLargeError(ValueError):
    def __init__(self, dimension: int, cap: int):
        super().__init__(f"basis dimension {dimension} exceeds the cap {cap}")
        self.dimension = dimension
        self.cap = cap


@dataclass(frozen=True)
class FockState:
    occ_a: tuple
    occ_b: tuple

    @property
    def n_a(self) -> int:
        return sum(self.occ_a)

    @property
    def n_b(self) -> int:
        return sum(self.occ_b)

    @property
    def excitation(self) -> int:
        """Sum of occupied mode indices over both components."""
        return _excitation(self.occ_a) + _excitation(self.occ_b)

    @property
    def energy(self) -> float:
        return self.excitation + 0.5 * (self.n_a + self.n_b)

    @property
    def parity(self) -> int:
        return -1 if self.excitation % 2 else 1

    def key(self, n_modes: int):
        """Canonical lookup key: A then B occupations, each padded to ``n_modes``.

        Returns ``None`` if a mode at or above ``n_modes`` is occupied.
        """
        a, b = _pad(self.occ_a, n_modes), _pad(self.occ_b, n_modes)
        if a is None or b is None:
            return None
        return a + b


def _excitation(occ) -> int:
    return sum(i * o for i, o in enumerate(occ))


def _pad(occ, n: int) -> tuple:
    occ = tuple(int(o) for o in occ)
    if len(occ) > n:
        return None if any(occ[n:]) else occ[:n]
    return occ + (0,) * (n - len(occ))


def component_configs(n_particles: int, max_excitation: int, n_modes: int) -> list[tuple]:
    """All occupation vectors of ``n_particles`` bosons with mode-index sum <= ``max_excitation``."""
    if n_particles == 0:
        return [(0,) * n_modes]
    out = []
    for modes in combinations_with_replacement(range(n_modes), n_particles):
        if sum(modes) <= max_excitation:
            occ = [0] * n_modes
            for m in modes:
                occ[m] += 1
            out.append(tuple(occ))
    return out


def _max_excitation(e_max: float, n_particles: int) -> int:
    # half-integer energies: compare in units of 1/2 to stay exact
    return math.floor(e_max - 0.5 * n_particles + 1e-9)


@dataclass(frozen=True)
class BasisMeta:
    n_a: int
    n_b: int
    e_max: float
    parity: str
    n_modes: int
    truncation: str


@dataclass(frozen=True, eq=False)
class BasisTable:
    """Ordered many-body basis with reverse lookup.

    Ordering is by noninteracting energy, then by the concatenated occupation
    vector in descending lexicographic order (lower modes filled first).
    """

    meta: BasisMeta
    configs_a: tuple
    configs_b: tuple
    cfg_a: np.ndarray  # per state, index into configs_a
    cfg_b: np.ndarray
    index: dict = field(repr=False)

    def __len__(self) -> int:
        return self.cfg_a.size

    @property
    def dimension(self) -> int:
        return self.cfg_a.size

    @property
    def n_modes(self) -> int:
        return self.meta.n_modes

    def state(self, k: int) -> FockState:
        return FockState(self.configs_a[self.cfg_a[k]], self.configs_b[self.cfg_b[k]])

    @property
    def states(self) -> list[FockState]:
        return [self.state(k) for k in range(len(self))]

    @property
    def energies(self) -> np.ndarray:
        ea = np.array([_excitation(c) for c in self.configs_a]) + 0.5 * self.meta.n_a
        eb = np.array([_excitation(c) for c in self.configs_b]) + 0.5 * self.meta.n_b
        return ea[self.cfg_a] + eb[self.cfg_b]

    @property
    def parities(self) -> np.ndarray:
        ex = self.excitations
        return np.where(ex % 2 == 0, 1, -1)

    @property
    def excitations(self) -> np.ndarray:
        xa = np.array([_excitation(c) for c in self.configs_a])
        xb = np.array([_excitation(c) for c in self.configs_b])
        return xa[self.cfg_a] + xb[self.cfg_b]

    @property
    def product_index(self) -> np.ndarray:
        """``(len(configs_a), len(configs_b))`` array of basis indices, -1 where absent."""
        m = np.full((len(self.configs_a), len(self.configs_b)), -1, dtype=np.int64)
        m[self.cfg_a, self.cfg_b] = np.arange(len(self))
        return m

    def lookup(self, state: FockState):
        key = state.key(self.n_modes)
        return None if key is None else self.index.get(key)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta.__dict__, sort_keys=True).encode())
        occ = np.array([self.configs_a[a] + self.configs_b[b] for a, b in zip(self.cfg_a, self.cfg_b)],
                       dtype="<i4")
        h.update(occ.tobytes())
        return h.hexdigest()

    def to_jsonl(self, path) -> None:
        """One header line, then one JSON object per state (format version 1)."""
        with open(Path(path), "w") as fh:
            header = {"format": "bosemix-basis", "version": BASIS_FORMAT_VERSION,
                      "meta": self.meta.__dict__, "dimension": len(self), "checksum": self.checksum()}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for k in range(len(self)):
                s = self.state(k)
                fh.write(json.dumps({"index": k, "occ_a": list(s.occ_a), "occ_b": list(s.occ_b),
                                     "energy": s.energy, "parity": s.parity}) + "\n")


def state_index(table: BasisTable, state: FockState):
    """Index of ``state`` in ``table`` or ``None`` if it lies outside the truncation."""
    if len(table) == 0:
        raise ValueError("empty table")
    return table.lookup(state)


def _components(n_a, n_b, e_max, truncation):
    if truncation == "total":
        k = _max_excitation(e_max, n_a + n_b)
        ka = kb = k
    elif truncation == "component":
        ka = _max_excitation(e_max, n_a)
        kb = _max_excitation(e_max, n_b)
    else:
        raise ValueError(f"truncation must be one of {TRUNCATIONS}, got {truncation!r}")
    if min(ka, kb) < 0:
        raise EmptyBasisError(f"e_max={e_max} is below the ground configuration energy")
    # highest reachable mode: one particle carrying all the excitation
    n_modes = max(ka if n_a else 0, kb if n_b else 0) + 1
    if truncation == "total":
        n_modes = ka + 1
    return ka, kb, n_modes


def _parity_ok(ex, parity):
    if parity == "even":
        return ex % 2 == 0
    if parity == "odd":
        return ex % 2 == 1
    return np.ones_like(ex, dtype=bool)


def _selection(n_a, n_b, e_max, parity, truncation):
    if parity not in PARITIES:
        raise ValueError(f"parity must be one of {PARITIES}, got {parity!r}")
    if n_a < 0 or n_b < 0:
        raise ValueError("particle numbers must be non-negative")
    ka, kb, n_modes = _components(n_a, n_b, e_max, truncation)
    ca = component_configs(n_a, ka, n_modes)
    cb = component_configs(n_b, kb, n_modes)
    xa = np.array([_excitation(c) for c in ca])
    xb = np.array([_excitation(c) for c in cb])
    ex = xa[:, None] + xb[None, :]
    keep = _parity_ok(ex, parity)
    if truncation == "total":
        keep &= ex <= ka
    return ca, cb, xa, xb, keep, n_modes


def basis_dimension(n_a: int, n_b: int, e_max: float, parity: str = "even",
                    truncation: str = "total") -> int:
    try:
        return int(_selection(n_a, n_b, e_max, parity, truncation)[4].sum())
    except EmptyBasisError:
        return 0


def enumerate_basis(n_a: int, n_b: int, e_max: float, parity: str = "even",
                    truncation: str = "total", max_dim: int = DEFAULT_MAX_DIM) -> BasisTable:
    """Build the truncated many-body basis.

    Raises
    ------
    EmptyBasisError
        no state fits under ``e_max`` with the requested parity.
    BasisTooLargeError
        the dimension exceeds ``max_dim``; the exception carries it.
    """
    ca, cb, xa, xb, keep, n_modes = _selection(n_a, n_b, e_max, parity, truncation)
    dim = int(keep.sum())
    if dim == 0:
        raise EmptyBasisError(f"no {parity} states for N=({n_a},{n_b}) at e_max={e_max}")
    if dim > max_dim:
        raise BasisTooLargeError(dim, max_dim)
    ia, ib = np.nonzero(keep)
    # sort key: excitation, then occupations descending (lexsort: last key is primary)
    occ = np.array([ca[a] + cb[b] for a, b in zip(ia, ib)], dtype=np.int64)
    keys = [-occ[:, c] for c in range(occ.shape[1] - 1, -1, -1)]
    order = np.lexsort(keys + [xa[ia] + xb[ib]])
    ia, ib = ia[order], ib[order]
    index = {ca[a] + cb[b]: k for k, (a, b) in enumerate(zip(ia, ib))}
    meta = BasisMeta(n_a, n_b, float(e_max), parity, n_modes, truncation)
    return BasisTable(meta, tuple(ca), tuple(cb), ia.astype(np.int64), ib.astype(np.int64), index)


def dimension_scan(n_a: int, n_b: int, parity: str, e_max_values, truncation: str = "total"):
    """``[(e_max, dimension), ...]`` over the given cutoffs."""
    values = list(e_max_values)
    if not values:
        raise ValueError("empty e_max range")
    return [(float(e), basis_dimension(n_a, n_b, e, parity, truncation)) for e in values]


def find_e_max(n_a: int, n_b: int, parity: str, target: int, e_max_values,
               truncation: str = "total"):
    """Smallest cutoff in ``e_max_values`` whose dimension equals ``target``, else ``None``."""
    for e, d in dimension_scan(n_a, n_b, parity, sorted(e_max_values), truncation):
        if d == target:
            return e
    return None


def sector_indices(table: BasisTable, parity: str) -> np.ndarray:
    """Indices of the states of ``table`` with the given parity."""
    return np.nonzero(_parity_ok(table.excitations, parity))[0]
