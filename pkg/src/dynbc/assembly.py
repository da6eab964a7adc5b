"""P1 finite element matrices on bulk triangles and boundary edges.

Bulk mass/stiffness use the exact affine-element formulas (element mass
``area/12 * [[2,1,1],[1,2,1],[1,1,2]]``, stiffness from constant gradients);
surface matrices use the 1D P1 formulas per boundary edge.  Assembled
matrices are immutable; duplicate entries are accumulated in sorted
(row, col) order so assembly is bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, triangle_areas


class AssemblyError(Exception):
    """Invalid input to matrix assembly."""


def _coo_accumulate(rows, cols, vals, shape):
    """Sum duplicate (row, col) triplets in sorted order; returns CSR pieces."""
    order = np.lexsort((cols, rows))
    r, c, v = rows[order], cols[order], vals[order]
    new_run = np.empty(len(r), dtype=bool)
    new_run[0] = True
    np.not_equal(r[1:], r[:-1], out=new_run[1:])
    same_col = np.equal(c[1:], c[:-1])
    new_run[1:] |= ~same_col
    starts = np.flatnonzero(new_run)
    data = np.add.reduceat(v, starts)
    rr, cc = r[starts], c[starts]
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rr, minlength=shape[0]), out=indptr[1:])
    return indptr, cc.astype(np.int64), data


@dataclass(frozen=True)
class SparseSymMatrix:
    """Structurally symmetric sparse matrix in compressed row form."""

    dim: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @staticmethod
    def from_coo(dim: int, rows, cols, vals) -> "SparseSymMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        indptr, indices, data = _coo_accumulate(rows, cols, vals, (dim, dim))
        m = SparseSymMatrix(dim, indptr, indices, data)
        m._check_structure()
        return m

    @staticmethod
    def from_scipy(a) -> "SparseSymMatrix":
        a = sp.csr_matrix(a)
        a.sum_duplicates()
        if a.shape[0] != a.shape[1]:
            raise AssemblyError("SparseSymMatrix requires a square matrix")
        m = SparseSymMatrix(a.shape[0], a.indptr.astype(np.int64),
                            a.indices.astype(np.int64), a.data.astype(float))
        m._check_structure()
        return m

    def _check_structure(self) -> None:
        a = self.csr
        pattern = (a != 0).astype(np.int8)
        if (pattern != pattern.T).nnz:
            raise AssemblyError("matrix pattern is not structurally symmetric")

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr),
                             shape=(self.dim, self.dim))

    @property
    def nnz(self) -> int:
        return len(self.data)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal()

    def scaled(self, c: float) -> "SparseSymMatrix":
        return SparseSymMatrix(self.dim, self.indptr, self.indices,
                               c * self.data)

    def value_asymmetry(self) -> float:
        """max |a_ij - a_ji|; the assembly invariant bounds this by
        1e-14 * max|a|."""
        a = self.csr
        d = a - a.T
        return float(np.abs(d.data).max()) if d.nnz else 0.0


def _kappa_per_element(kappa, mesh: Mesh) -> np.ndarray:
    centroids = mesh.nodes[mesh.triangles].mean(axis=1)
    if callable(kappa):
        k = np.asarray(kappa(centroids), dtype=float)
        if k.shape != (len(mesh.triangles),):
            raise AssemblyError("kappa callable must return one value per element")
    else:
        k = np.asarray(kappa, dtype=float)
        if k.ndim == 0:
            k = np.full(len(mesh.triangles), float(k))
        elif k.shape != (len(mesh.triangles),):
            raise AssemblyError("kappa array must have one value per element")
    if not np.all(k > 0.0):
        raise AssemblyError(f"kappa must be positive, min={k.min()}")
    return k


def assemble_bulk(mesh: Mesh, kappa, alpha_omega: float):
    """Assemble (M_omega, A_omega) with A_omega = kappa-stiffness + alpha_omega*M."""
    if alpha_omega < 0.0:
        raise AssemblyError("alpha_omega must be nonnegative")
    k = _kappa_per_element(kappa, mesh)
    tri = mesh.triangles
    areas = triangle_areas(mesh.nodes, tri)
    bad = np.flatnonzero(areas <= 0.0)
    if bad.size:
        raise AssemblyError(f"degenerate element {int(bad[0])} in assembly")

    x = mesh.nodes[tri, 0]
    y = mesh.nodes[tri, 1]
    b = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
    c = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
    # K_e[i,j] = kappa (b_i b_j + c_i c_j) / (4 T)
    ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])
    ke *= (k / (4.0 * areas))[:, None, None]
    me = np.tile((np.ones((3, 3)) + np.eye(3)) / 12.0, (len(tri), 1, 1))
    me *= areas[:, None, None]

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    m = SparseSymMatrix.from_coo(mesh.n_omega, rows, cols, me.ravel())
    a = SparseSymMatrix.from_coo(mesh.n_omega, rows, cols,
                                 (ke + alpha_omega * me).ravel())
    if np.any(m.diagonal() <= 0.0):
        raise AssemblyError("mass matrix has a nonpositive diagonal entry")
    return m, a


def assemble_surface(mesh: Mesh, beta: float, alpha_gamma: float):
    """Assemble (M_gamma, A_gamma) on the boundary cycle in boundary-local
    numbering 0..n_gamma-1."""
    if beta < 0.0 or alpha_gamma < 0.0:
        raise AssemblyError("beta and alpha_gamma must be nonnegative")
    n1 = mesh.n_interior
    edges = mesh.boundary_edges
    loc = edges - n1
    if loc.min() < 0:
        raise AssemblyError("boundary edge references a non-boundary node")
    d = mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]]
    lengths = np.hypot(d[:, 0], d[:, 1])
    bad = np.flatnonzero(lengths <= 0.0)
    if bad.size:
        raise AssemblyError(f"zero-length boundary edge {int(bad[0])}")

    me = (lengths[:, None, None] / 6.0) * (np.ones((2, 2)) + np.eye(2))
    ke = (beta / lengths)[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])

    rows = np.repeat(loc, 2, axis=1).ravel()
    cols = np.tile(loc, (1, 2)).ravel()
    m = SparseSymMatrix.from_coo(mesh.n_gamma, rows, cols, me.ravel())
    a = SparseSymMatrix.from_coo(mesh.n_gamma, rows, cols,
                                 (ke + alpha_gamma * me).ravel())
    return m, a


@dataclass(frozen=True)
class BlockSystem:
    """Bulk matrices split at the interior/boundary index boundary, plus the
    surface matrices.  n1 interior and n2 boundary unknowns."""

    M11: SparseSymMatrix
    M12: sp.csr_matrix
    M21: sp.csr_matrix
    M22: SparseSymMatrix
    A11: SparseSymMatrix
    A12: sp.csr_matrix
    A21: sp.csr_matrix
    A22: SparseSymMatrix
    M_gamma: SparseSymMatrix | None
    A_gamma: SparseSymMatrix | None
    n1: int
    n2: int


def _split(mat: SparseSymMatrix, n1: int):
    a = mat.csr
    return (SparseSymMatrix.from_scipy(a[:n1, :n1]), sp.csr_matrix(a[:n1, n1:]),
            sp.csr_matrix(a[n1:, :n1]), SparseSymMatrix.from_scipy(a[n1:, n1:]))


def partition_blocks(m_omega: SparseSymMatrix, a_omega: SparseSymMatrix,
                     n_gamma: int, m_gamma: SparseSymMatrix | None = None,
                     a_gamma: SparseSymMatrix | None = None) -> BlockSystem:
    """Split the bulk matrices at the trailing n_gamma rows/columns."""
    dim = m_omega.dim
    if a_omega.dim != dim:
        raise AssemblyError("mass and stiffness dimensions differ")
    if not (0 <= n_gamma < dim):
        raise AssemblyError(f"n_gamma={n_gamma} must satisfy 0 <= n_gamma < {dim}")
    n1 = dim - n_gamma
    m11, m12, m21, m22 = _split(m_omega, n1)
    a11, a12, a21, a22 = _split(a_omega, n1)
    for x, xt in ((m12, m21), (a12, a21)):
        diff = abs(x - xt.T)
        scale = max(np.abs(x.data).max(initial=0.0), 1.0)
        if diff.nnz and np.abs(diff.data).max() > 1e-14 * scale:
            raise AssemblyError("off-diagonal blocks are not transposes")
    if m_gamma is not None and m_gamma.dim != n_gamma:
        raise AssemblyError("surface matrix dimension != n_gamma")
    return BlockSystem(M11=m11, M12=m12, M21=m21, M22=m22, A11=a11, A12=a12,
                       A21=a21, A22=a22, M_gamma=m_gamma, A_gamma=a_gamma,
                       n1=n1, n2=n_gamma)


def assemble_block_system(mesh: Mesh, kappa, alpha_omega: float, beta: float,
                          alpha_gamma: float):
    """Assemble bulk and surface matrices and partition them.

    Returns (m_omega, a_omega, blocks)."""
    m_omega, a_omega = assemble_bulk(mesh, kappa, alpha_omega)
    m_gamma, a_gamma = assemble_surface(mesh, beta, alpha_gamma)
    blocks = partition_blocks(m_omega, a_omega, mesh.n_gamma, m_gamma, a_gamma)
    return m_omega, a_omega, blocks


def dump_matrix(matrix, path) -> None:
    """Coordinate text dump: header '% dim <n> nnz <k>', then 1-based
    'i j value' lines."""
    a = matrix.csr if isinstance(matrix, SparseSymMatrix) else sp.csr_matrix(matrix)
    coo = a.tocoo()
    with open(path, "w") as f:
        f.write(f"% dim {a.shape[0]} nnz {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{i + 1} {j + 1} {v:.17g}\n")
