"""Eigendecomposition of many-body operators and spectrum files.

A spectrum is kept as one or more independent blocks. When the operator
does not couple the two spatial-parity sectors each sector is diagonalized
on its own, which halves the dense problem size and keeps the eigenvector
storage block diagonal.

Spectrum file layout (all integers and floats little-endian)::

    b"BOSEMIX-SPECTRUM\\n"
    uint64          header length in bytes
    header          UTF-8 JSON: version, dimension, block sizes, meta, sha256 of payload
    payload         energies (D x float64), then for each block:
                    rows (n x int64), cols (k x int64), vectors (n*k float64, column-major)
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import __version__
from .fock import BasisTable, sector_indices
from .hamiltonian import ManyBodyOperator

log = logging.getLogger(__name__)

MAGIC = b"BOSEMIX-SPECTRUM\n"
FORMAT_VERSION = 1
DEFAULT_MAX_DIM = 10_000


class DimensionCapError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class SpectrumFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralBlock:
    rows: np.ndarray  # basis indices spanned by the block
    cols: np.ndarray  # positions of the block eigenvalues in the global ascending list
    vectors: np.ndarray  # (len(rows), len(cols))


@dataclass(frozen=True, eq=False)
class SpectrumResult:
    energies: np.ndarray
    blocks: tuple
    meta: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return sum(b.rows.size for b in self.blocks)

    @property
    def n_states(self) -> int:
        return self.energies.size

    @property
    def vectors(self) -> np.ndarray:
        """Dense ``(D, n_states)`` eigenvector matrix (assembled for multi-block spectra)."""
        if len(self.blocks) == 1 and np.array_equal(self.blocks[0].rows, np.arange(self.dimension)) \
                and np.array_equal(self.blocks[0].cols, np.arange(self.n_states)):
            return self.blocks[0].vectors
        v = np.zeros((self.dimension, self.n_states))
        for b in self.blocks:
            v[np.ix_(b.rows, b.cols)] = b.vectors
        return v

    def block_of(self) -> np.ndarray:
        out = np.empty(self.n_states, dtype=np.int64)
        for k, b in enumerate(self.blocks):
            out[b.cols] = k
        return out

    def columns(self, indices) -> np.ndarray:
        """Fock-basis eigenvectors for the given global eigenstate indices."""
        indices = np.asarray(indices)
        out = np.zeros((self.dimension, indices.size))
        which = self.block_of()[indices]
        for k, b in enumerate(self.blocks):
            sel = np.nonzero(which == k)[0]
            if sel.size:
                local = np.searchsorted(b.cols, indices[sel])
                out[np.ix_(b.rows, sel)] = b.vectors[:, local]
        return out

    def overlaps(self, state) -> np.ndarray:
        """``c_m = <m|state>`` for every eigenstate."""
        state = np.asarray(state)
        if state.shape[0] != self.dimension:
            raise ValueError(f"state has length {state.shape[0]}, spectrum basis has {self.dimension}")
        c = np.zeros(self.n_states, dtype=np.result_type(state.dtype, float))
        for b in self.blocks:
            c[b.cols] = b.vectors.T @ state[b.rows]
        return c

    def expand(self, amplitudes) -> np.ndarray:
        """Fock-basis vector(s) ``sum_m a_m |m>``; ``amplitudes`` is ``(n_states,)`` or ``(n_states, T)``."""
        a = np.asarray(amplitudes)
        out = np.zeros((self.dimension,) + a.shape[1:], dtype=np.result_type(a.dtype, float))
        for b in self.blocks:
            part = a[b.cols]
            if np.iscomplexobj(part):
                # two real products avoid promoting the eigenvectors to complex; the
                # contiguous copies keep matmul on the BLAS path
                out[b.rows] = (b.vectors @ np.ascontiguousarray(part.real)
                               + 1j * (b.vectors @ np.ascontiguousarray(part.imag)))
            else:
                out[b.rows] = b.vectors @ part
        return out


def _fix_signs(v: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(v), axis=0)
    s = np.sign(v[idx, np.arange(v.shape[1])])
    s[s == 0] = 1
    v *= s
    return v


def _split_blocks(op: ManyBodyOperator):
    basis = op.basis
    if basis.meta.parity != "both":
        return [np.arange(op.dimension)]
    even = sector_indices(basis, "even")
    odd = sector_indices(basis, "odd")
    if even.size == 0 or odd.size == 0:
        return [np.arange(op.dimension)]
    full = op.to_csr()
    if full[even][:, odd].count_nonzero():
        return [np.arange(op.dimension)]
    return [even, odd]


def _check(H_dense, w, v, norm):
    ortho = float(np.max(np.abs(v.T @ v - np.eye(v.shape[1])))) if v.shape[1] else 0.0
    resid = float(np.max(np.linalg.norm(H_dense @ v - v * w, axis=0))) if v.shape[1] else 0.0
    return ortho, resid / max(norm, 1e-300)


def diagonalize(op: ManyBodyOperator, mode: str = "full", k: int | None = None,
                max_dim: int = DEFAULT_MAX_DIM, check: bool = True, split_parity: bool = True,
                tol: float = 1e-8) -> SpectrumResult:
    """Eigenpairs of a symmetric many-body operator.

    ``mode="full"`` returns all eigenpairs by dense decomposition (per parity
    block when possible); ``mode="lowest_k"`` returns the ``k`` lowest by an
    iterative Lanczos solver. Orthonormality and residual bounds are checked
    and recorded in ``meta``.
    """
    if mode not in ("full", "lowest_k"):
        raise ValueError("mode must be 'full' or 'lowest_k'")
    blocks_rows = _split_blocks(op) if split_parity else [np.arange(op.dimension)]
    full = op.to_csr()
    results = []
    worst_ortho = worst_resid = 0.0
    for rows in blocks_rows:
        sub = full[rows][:, rows]
        if mode == "full":
            if rows.size > max_dim:
                raise DimensionCapError(f"block dimension {rows.size} exceeds the dense cap {max_dim}")
            H = sub.toarray()
            w, v = sla.eigh(H.copy(), overwrite_a=True, check_finite=False)
        else:
            if k is None or k < 1:
                raise ValueError("lowest_k mode needs k >= 1")
            kk = min(k, rows.size)
            if kk >= rows.size - 1:
                H = sub.toarray()
                w, v = sla.eigh(H.copy(), overwrite_a=True)
                w, v = w[:kk], v[:, :kk]
            else:
                H = sub
                try:
                    w, v = spla.eigsh(sub, k=kk, which="SA", tol=1e-12)
                except spla.ArpackNoConvergence as exc:
                    raise ConvergenceError(f"Lanczos did not converge: {len(exc.eigenvalues)} of {kk} pairs") from exc
                order = np.argsort(w)
                w, v = w[order], v[:, order]
        v = _fix_signs(np.ascontiguousarray(v))
        if check:
            norm = float(np.max(np.abs(w))) if w.size else 1.0
            ortho, resid = _check(H, w, v, norm)
            worst_ortho, worst_resid = max(worst_ortho, ortho), max(worst_resid, resid)
        results.append((rows, w, v))
        del H
    if check and (worst_ortho > tol or worst_resid > tol):
        raise ConvergenceError(f"eigenpairs fail the bounds: orthonormality {worst_ortho:.2e}, "
                               f"relative residual {worst_resid:.2e}")
    energies_all = np.concatenate([w for _, w, _ in results])
    order = np.argsort(energies_all, kind="stable")
    position = np.empty_like(order)
    position[order] = np.arange(order.size)
    blocks, start = [], 0
    for rows, w, v in results:
        cols = position[start:start + w.size]
        start += w.size
        srt = np.argsort(cols)
        blocks.append(SpectralBlock(rows, cols[srt], v[:, srt]))
    meta = dict(op.meta or {})
    meta.update({"mode": mode, "n_blocks": len(blocks), "orthonormality": worst_ortho,
                 "relative_residual": worst_resid, "basis_checksum": op.basis.checksum(),
                 "basis": dict(op.basis.meta.__dict__)})
    return SpectrumResult(energies_all[order], tuple(blocks), meta)


def eigenvalue_drift(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    """Per-level change of the ascending eigenvalues between two cutoffs."""
    n = min(coarse.size, fine.size)
    return np.abs(np.asarray(fine[:n]) - np.asarray(coarse[:n]))


def converged_count(drift: np.ndarray, tol: float) -> int:
    """Number of leading levels whose drift stays below ``tol``."""
    bad = np.nonzero(drift > tol)[0]
    return int(drift.size if bad.size == 0 else bad[0])


# -- persistence -----------------------------------------------------------


def save_spectrum(path, spec: SpectrumResult) -> None:
    parts = [np.asarray(spec.energies, "<f8").tobytes()]
    sizes = []
    for b in spec.blocks:
        parts += [np.asarray(b.rows, "<i8").tobytes(), np.asarray(b.cols, "<i8").tobytes(),
                  np.asarray(b.vectors, "<f8").tobytes(order="F")]
        sizes.append([int(b.rows.size), int(b.cols.size)])
    payload = b"".join(parts)
    header = {"format": "bosemix-spectrum", "version": FORMAT_VERSION, "code_version": __version__,
              "n_states": int(spec.n_states), "dimension": int(spec.dimension), "blocks": sizes,
              "meta": spec.meta, "sha256": hashlib.sha256(payload).hexdigest()}
    hb = json.dumps(header, sort_keys=True, default=_json_default).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(payload)
    tmp.replace(path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def load_spectrum(path, basis: BasisTable | None = None) -> SpectrumResult:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise SpectrumFileError(f"{path}: not a spectrum file")
    off = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    header = json.loads(raw[off + 8:off + 8 + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise SpectrumFileError(f"{path}: unsupported version {header.get('version')}")
    payload = raw[off + 8 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise SpectrumFileError(f"{path}: checksum mismatch")
    if basis is not None and header["meta"].get("basis_checksum") != basis.checksum():
        raise SpectrumFileError(f"{path}: spectrum belongs to a different basis")
    n = header["n_states"]
    pos = 8 * n
    energies = np.frombuffer(payload[:pos], "<f8").astype(float)
    blocks = []
    for nr, nc in header["blocks"]:
        rows = np.frombuffer(payload[pos:pos + 8 * nr], "<i8").astype(np.int64)
        pos += 8 * nr
        cols = np.frombuffer(payload[pos:pos + 8 * nc], "<i8").astype(np.int64)
        pos += 8 * nc
        vec = np.frombuffer(payload[pos:pos + 8 * nr * nc], "<f8").reshape((nr, nc), order="F").astype(float)
        pos += 8 * nr * nc
        blocks.append(SpectralBlock(rows, cols, vec))
    return SpectrumResult(energies, tuple(blocks), header["meta"])
