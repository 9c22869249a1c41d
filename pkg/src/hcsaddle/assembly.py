"""P1 finite element matrices for the high-contrast saddle formulation.

Everything is expressed in the block dof ordering of :class:`TriMesh`
(closed inclusions first, background last, Dirichlet nodes removed).
Sparse matrices are ``scipy.sparse.csr_matrix`` with sorted indices and no
stored zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from .mesh import TriMesh


class AssemblyError(ValueError):
    pass


def _tri_geometry(pts: np.ndarray):
    """Gradients of the barycentric basis and areas for a stack of triangles."""
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    x, y = pts[..., 0], pts[..., 1]
    # b_k, c_k such that grad(phi_k) = (b_k, c_k) / (2 * area)
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    return b, c, 0.5 * np.abs(area2), single


def _check_area(area: np.ndarray, pts: np.ndarray, ids=None):
    diam2 = np.max(np.sum((pts - np.roll(pts, 1, axis=-2)) ** 2, axis=-1), axis=-1)
    bad = area <= 1e-14 * diam2
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        tid = k if ids is None else int(ids[k])
        raise AssemblyError(f"degenerate triangle {tid}")


def local_stiffness(tri, ids=None) -> np.ndarray:
    """Element stiffness ``int grad(phi_j) . grad(phi_k)`` for one or many triangles."""
    b, c, area, single = _tri_geometry(tri)
    _check_area(area, np.asarray(tri, float).reshape(-1, 3, 2), ids)
    K = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area[:, None, None])
    return K[0] if single else K


def local_mass(tri, ids=None) -> np.ndarray:
    b, c, area, single = _tri_geometry(tri)
    _check_area(area, np.asarray(tri, float).reshape(-1, 3, 2), ids)
    pattern = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
    M = area[:, None, None] / 12.0 * pattern
    return M[0] if single else M


def _require_ordered(mesh: TriMesh):
    if not mesh.is_ordered:
        raise AssemblyError("mesh has no dof ordering; run classify_and_order first")


def _scatter(mesh: TriMesh, local: np.ndarray, elems: np.ndarray, index: np.ndarray, size: int) -> sp.csr_matrix:
    """Sum element matrices into a ``size x size`` matrix, dropping entries with index -1."""
    t = index[mesh.triangles[elems]]  # (E, 3)
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    vals = local.reshape(-1)
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(size, size)).tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


def stiffness_local_all(mesh: TriMesh) -> np.ndarray:
    return local_stiffness(mesh.nodes[mesh.triangles], ids=np.arange(len(mesh.triangles)))


def assemble_A(mesh: TriMesh, coefficient: np.ndarray | None = None) -> sp.csr_matrix:
    """Dirichlet-eliminated stiffness matrix; ``coefficient`` is an optional per-element weight."""
    _require_ordered(mesh)
    K = stiffness_local_all(mesh)
    if coefficient is not None:
        K = K * np.asarray(coefficient, float)[:, None, None]
    return _scatter(mesh, K, np.arange(len(mesh.triangles)), mesh.dof, mesh.N)


def _block_index(mesh: TriMesh, i: int) -> np.ndarray:
    """Map node -> local index inside closed inclusion ``i`` (or -1)."""
    off = mesh.offsets
    idx = mesh.dof - off[i - 1]
    inside = (mesh.dof >= off[i - 1]) & (mesh.dof < off[i])
    return np.where(inside, idx, -1)


def assemble_B(mesh: TriMesh) -> list[sp.csr_matrix]:
    """Neumann stiffness matrices ``B_i`` of the closed inclusions."""
    _require_ordered(mesh)
    if mesh.m < 1:
        raise AssemblyError("mesh has no inclusions")
    K = stiffness_local_all(mesh)
    out = []
    for i, ni in enumerate(mesh.n_i, start=1):
        if ni == 0:
            raise AssemblyError(f"inclusion {i} is empty")
        elems = np.flatnonzero(mesh.elem_label == i)
        out.append(_scatter(mesh, K[elems], elems, _block_index(mesh, i), ni))
    return out


def assemble_mass_D(mesh: TriMesh) -> sp.csr_matrix:
    """Block-diagonal mass matrix of the inclusions, ``n x n``."""
    _require_ordered(mesh)
    elems = np.flatnonzero(mesh.elem_label > 0)
    M = local_mass(mesh.nodes[mesh.triangles[elems]], ids=elems)
    idx = np.where((mesh.dof >= 0) & (mesh.dof < mesh.n), mesh.dof, -1)
    return _scatter(mesh, M, elems, idx, mesh.n)


def block_diag(blocks: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    if not blocks:
        return sp.csr_matrix((0, 0))
    return sp.block_diag(blocks, format="csr")


def _check_eps(eps, m) -> np.ndarray:
    eps = np.asarray(eps, dtype=float).reshape(-1)
    if eps.size != m:
        raise AssemblyError(f"expected {m} eps values, got {eps.size}")
    if np.any(eps < 0) or not np.all(np.isfinite(eps)):
        raise AssemblyError("eps values must be finite and non-negative")
    return eps


def assemble_sigma(B_blocks: Sequence[sp.spmatrix], eps) -> LinearOperator:
    """Action of ``diag(eps_1 B_1, ..., eps_m B_m)``; all-zero eps gives the zero map."""
    eps = _check_eps(eps, len(B_blocks))
    sizes = [b.shape[0] for b in B_blocks]
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    n = int(off[-1])

    def matvec(x):
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.zeros(n)
        for i, B in enumerate(B_blocks):
            if eps[i] != 0.0:
                y[off[i]:off[i + 1]] = eps[i] * (B @ x[off[i]:off[i + 1]])
        return y

    return LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=float)


def _nodal_load(mesh: TriMesh, f, quadrature: str = "one-point") -> np.ndarray:
    """Load integrated against every nodal basis function, Dirichlet nodes included."""
    pts = mesh.nodes[mesh.triangles]
    area = np.abs(mesh.areas())
    P = len(mesh.nodes)
    if callable(f):
        if quadrature == "one-point":
            fc = np.asarray(f(pts.mean(axis=1)), dtype=float).reshape(-1)
            contrib = np.repeat((fc * area / 3.0)[:, None], 3, axis=1)
        elif quadrature == "three-point":
            mids = 0.5 * (pts + np.roll(pts, -1, axis=1))  # midpoints of edges (0,1),(1,2),(2,0)
            fm = np.asarray(f(mids.reshape(-1, 2)), dtype=float).reshape(-1, 3)
            # basis j equals 1/2 at the two midpoints of its incident edges
            contrib = area[:, None] / 3.0 * 0.5 * (fm + np.roll(fm, 1, axis=1))
        else:
            raise AssemblyError(f"unknown quadrature {quadrature!r}")
    else:
        contrib = np.repeat((float(f) * area / 3.0)[:, None], 3, axis=1)
    return np.bincount(mesh.triangles.ravel(), weights=contrib.ravel(), minlength=P)


def assemble_load(mesh: TriMesh, f: float | Callable = 50.0, quadrature: str = "one-point") -> np.ndarray:
    """Load vector ``F`` of length ``N`` (homogeneous Dirichlet data needs no lift)."""
    _require_ordered(mesh)
    full = _nodal_load(mesh, f, quadrature)
    return full[mesh.order].copy()


@dataclass(frozen=True)
class FemBlocks:
    """All assembled operators of one mesh and one contrast assignment."""

    A: sp.csr_matrix
    B_blocks: tuple[sp.csr_matrix, ...]
    eps: np.ndarray
    M_D: sp.csr_matrix
    F: np.ndarray
    n_i: tuple[int, ...]

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return int(sum(self.n_i))

    @property
    def n0(self) -> int:
        return self.N - self.n

    @property
    def m(self) -> int:
        return len(self.n_i)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_i)]).astype(int)

    @property
    def A_DD(self) -> sp.csr_matrix:
        return self.A[: self.n, : self.n]

    @property
    def A_D0(self) -> sp.csr_matrix:
        return self.A[: self.n, self.n:]

    @property
    def A_0D(self) -> sp.csr_matrix:
        return self.A[self.n:, : self.n]

    @property
    def A_00(self) -> sp.csr_matrix:
        return self.A[self.n:, self.n:]

    @property
    def B_D(self) -> sp.csr_matrix:
        return block_diag(self.B_blocks)

    @property
    def B(self) -> sp.csr_matrix:
        """``[B_D, 0]`` of shape ``n x N``."""
        return sp.hstack([self.B_D, sp.csr_matrix((self.n, self.n0))], format="csr")

    @property
    def sigma(self) -> LinearOperator:
        return assemble_sigma(self.B_blocks, self.eps)

    def sigma_matrix(self) -> sp.csr_matrix:
        return block_diag([e * b for e, b in zip(self.eps, self.B_blocks)])

    def with_eps(self, eps) -> "FemBlocks":
        return FemBlocks(self.A, self.B_blocks, _check_eps(eps, self.m), self.M_D, self.F, self.n_i)


def assemble(mesh: TriMesh, eps=None, f: float | Callable = 50.0, quadrature: str = "one-point") -> FemBlocks:
    """Assemble every block; ``eps=None`` means the limit problem (all zero)."""
    _require_ordered(mesh)
    eps = np.zeros(mesh.m) if eps is None else _check_eps(eps, mesh.m)
    B = tuple(assemble_B(mesh)) if mesh.m else ()
    M_D = assemble_mass_D(mesh) if mesh.m else sp.csr_matrix((0, 0))
    return FemBlocks(assemble_A(mesh), B, eps, M_D, assemble_load(mesh, f, quadrature), mesh.n_i)


def assemble_primal(blocks: FemBlocks, eps=None) -> sp.csr_matrix:
    """Classical FEM matrix ``A + sum_i B_i / eps_i`` (coefficient ``1 + 1/eps_i`` inside inclusion i)."""
    eps = blocks.eps if eps is None else _check_eps(eps, blocks.m)
    if np.any(eps == 0):
        raise AssemblyError("assemble_primal needs eps_i > 0; use the limit saddle system for eps = 0")
    inv = block_diag([b / e for e, b in zip(eps, blocks.B_blocks)])
    pad = sp.csr_matrix((blocks.N, blocks.N))
    if blocks.n:
        pad = sp.block_diag([inv, sp.csr_matrix((blocks.n0, blocks.n0))], format="csr")
    K = (blocks.A + pad).tocsr()
    K.sort_indices()
    return K


def export_matrix_market(mat, path) -> None:
    """Write a sparse or dense operator in MatrixMarket coordinate format."""
    if isinstance(mat, LinearOperator):
        mat = sp.csr_matrix(mat @ np.eye(mat.shape[1]))
    scipy.io.mmwrite(str(Path(path)), sp.coo_matrix(mat), symmetry="general")
