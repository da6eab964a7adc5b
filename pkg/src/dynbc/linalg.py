"""Symmetric positive definite solves, generalized-eigenvalue constant
estimation, and the weak CFL check.

Small systems (below ``dense_threshold``) use a dense Cholesky factorization;
larger ones use conjugate gradients with diagonal preconditioning.  Every
solve enforces the residual contract ||A x - b|| <= rel_tol ||b||.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .assembly import SparseSymMatrix


class SolveError(RuntimeError):
    """Linear solve failed; carries the final residual norm."""

    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


class EigenError(RuntimeError):
    """Power iteration breakdown or non-convergence."""


@dataclass(frozen=True)
class SolveConfig:
    rel_tol: float = 1e-12
    max_iter: int | None = None  # None: max(10 * dim, 1000)
    dense_threshold: int = 200

    def __post_init__(self):
        if not (0.0 < self.rel_tol <= 1e-6):
            raise ValueError(f"rel_tol must lie in (0, 1e-6], got {self.rel_tol}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be positive")


DEFAULT_SOLVE = SolveConfig()


def _as_csr(matrix) -> sp.csr_matrix:
    if isinstance(matrix, SparseSymMatrix):
        return matrix.csr
    return sp.csr_matrix(matrix)


class SpdSolver:
    """Reusable solver for one SPD matrix; factors lazily on first solve."""

    def __init__(self, matrix, cfg: SolveConfig = DEFAULT_SOLVE):
        self.a = _as_csr(matrix)
        self.cfg = cfg
        self.dim = self.a.shape[0]
        self._chol = None
        self._diag = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.dim,):
            raise ValueError(f"rhs must have length {self.dim}")
        if not np.all(np.isfinite(rhs)):
            raise ValueError("rhs contains non-finite entries")
        b_norm = float(np.linalg.norm(rhs))
        if b_norm == 0.0:
            return np.zeros(self.dim)
        if self.dim < self.cfg.dense_threshold:
            x = self._solve_dense(rhs)
        else:
            x = self._solve_cg(rhs, b_norm)
        res = float(np.linalg.norm(self.a @ x - rhs))
        if res > self.cfg.rel_tol * b_norm:
            raise SolveError(
                f"solve residual {res:.3e} exceeds {self.cfg.rel_tol:.1e} * ||b||",
                residual=res)
        return x

    def _solve_dense(self, rhs):
        if self._chol is None:
            try:
                self._chol = scipy.linalg.cho_factor(self.a.toarray())
            except scipy.linalg.LinAlgError as e:
                raise SolveError(f"matrix is not positive definite: {e}") from e
        x = scipy.linalg.cho_solve(self._chol, rhs)
        # two rounds of iterative refinement keep ill-conditioned systems
        # inside the residual contract
        for _ in range(2):
            r = rhs - self.a @ x
            if np.linalg.norm(r) <= self.cfg.rel_tol * np.linalg.norm(rhs):
                break
            x = x + scipy.linalg.cho_solve(self._chol, r)
        return x

    def _solve_cg(self, rhs, b_norm):
        if self._diag is None:
            d = self.a.diagonal()
            if np.any(d <= 0.0):
                raise SolveError("nonpositive diagonal entry in SPD solve")
            self._diag = d
        a, d = self.a, self._diag
        max_iter = self.cfg.max_iter or max(10 * self.dim, 1000)
        tol = self.cfg.rel_tol * b_norm
        x = np.zeros(self.dim)
        # restarts guard against drift of the recurred residual near the
        # attainable floor: each pass begins from the true residual
        iters_left = max_iter
        true_norm = b_norm
        for _ in range(4):
            r = rhs - a @ x
            z = r / d
            p = z.copy()
            rz = float(r @ z)
            while iters_left > 0:
                iters_left -= 1
                ap = a @ p
                pap = float(p @ ap)
                if pap <= 0.0:
                    raise SolveError("matrix is not positive definite (p'Ap <= 0)")
                alpha = rz / pap
                x += alpha * p
                r -= alpha * ap
                if np.linalg.norm(r) <= 0.5 * tol:
                    break
                z = r / d
                rz_new = float(r @ z)
                p = z + (rz_new / rz) * p
                rz = rz_new
            true_norm = float(np.linalg.norm(rhs - a @ x))
            if true_norm <= tol or iters_left <= 0:
                break
        if true_norm > tol:
            raise SolveError(
                f"CG did not converge in {max_iter} iterations, "
                f"residual {true_norm:.3e}", residual=true_norm)
        return x


def solve_spd(matrix, rhs, cfg: SolveConfig = DEFAULT_SOLVE) -> np.ndarray:
    """Solve an SPD system to the residual contract of ``cfg``."""
    return SpdSolver(matrix, cfg).solve(rhs)


def gen_eig_max(a, b, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest lambda with A v = lambda B v, by power iteration on B^{-1}A.

    A must be symmetric positive semidefinite and B SPD.  Breakdowns (iterate
    in the null space of A) restart from a perturbed vector.
    """
    a = _as_csr(a)
    dim = a.shape[0]
    if dim == 0:
        raise EigenError("empty pencil")
    bsolve = SpdSolver(b, SolveConfig(rel_tol=1e-12))
    b_csr = bsolve.a
    if b_csr.shape[0] != dim:
        raise EigenError("pencil dimensions differ")
    rng = np.random.default_rng(2718)

    v = rng.standard_normal(dim)
    v /= math.sqrt(float(v @ (b_csr @ v)))
    lam_prev = None
    restarts = 0
    for _ in range(max_iter):
        w = a @ v
        lam = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0 or not math.isfinite(nw):
            restarts += 1
            if restarts > 5:
                raise EigenError("persistent power-iteration breakdown")
            v = rng.standard_normal(dim)
            v /= math.sqrt(float(v @ (b_csr @ v)))
            lam_prev = None
            continue
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
        z = bsolve.solve(w)
        v = z / math.sqrt(float(z @ (b_csr @ z)))
    raise EigenError(f"power iteration did not converge in {max_iter} iterations")


def estimate_cM(mesh, blocks, tol: float = 1e-8) -> float:
    """Sharp constant in ||.||_{M22}^2 <= c_M h_gamma ||.||_{M_gamma}^2."""
    if blocks.M_gamma is None:
        raise EigenError("block system carries no surface mass matrix")
    return gen_eig_max(blocks.M22, blocks.M_gamma.scaled(mesh.h_gamma), tol=tol)


def estimate_cinv(mesh, blocks, tol: float = 1e-8) -> float:
    """Inverse-estimate constant: ||.||_{A22}^2 <= c_inv h^-2 ||.||_{M22}^2
    for blocks assembled with alpha_omega = 0."""
    return mesh.h ** 2 * gen_eig_max(blocks.A22, blocks.M22, tol=tol)


@dataclass(frozen=True)
class CflReport:
    """Weak CFL condition (7 c_inv c_M) tau < 3 h and its ingredients."""

    c_M: float
    c_inv: float
    tau: float
    tau_max: float
    satisfied: bool
    h: float
    h_gamma: float = math.nan

    @property
    def c_A(self) -> float:
        return self.c_M * self.c_inv

    def c_alpha_M(self, alpha_omega: float) -> float:
        return self.c_M * alpha_omega

    CSV_HEADER = "h,h_gamma,c_M,c_inv,tau,tau_max,satisfied"

    def csv_row(self) -> str:
        return (f"{self.h:.17g},{self.h_gamma:.17g},{self.c_M:.17g},"
                f"{self.c_inv:.17g},{self.tau:.17g},{self.tau_max:.17g},"
                f"{int(self.satisfied)}")


def check_cfl(tau: float, h: float, c_M: float, c_inv: float,
              h_gamma: float = math.nan) -> CflReport:
    """Evaluate the weak CFL condition for one step size."""
    if tau <= 0.0 or h <= 0.0 or c_M <= 0.0 or c_inv <= 0.0:
        raise ValueError("tau, h, c_M, c_inv must all be positive")
    tau_max = 3.0 * h / (7.0 * c_inv * c_M)
    return CflReport(c_M=c_M, c_inv=c_inv, tau=tau, tau_max=tau_max,
                     satisfied=bool(7.0 * c_inv * c_M * tau < 3.0 * h),
                     h=h, h_gamma=h_gamma)
