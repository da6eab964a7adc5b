"""Time integrators for the bulk-surface system split at the boundary.

All schemes advance the triple (u1, p, dp) where u1 holds the interior
nodal values, p the boundary values, and dp the discrete backward
difference of p from the previous step.  The boundary trace u2 is never
stored; the constraint u2 = p is built into the equations, and the
Lagrange multiplier of the constrained formulation is eliminated.

Schemes
-------
``lie``     two sub-steps, implicit Euler each; the bulk step carries the
            boundary derivative information (M12 dp, and M22 dp / M21 du1
            feed the boundary step).
``naive``   the same two sub-steps with every derivative coupling term
            dropped; retained to demonstrate its error plateau.
``euler``   the coupled one-solve implicit Euler baseline.
``strang``  symmetrized half/full/half sweep: explicit Euler half-step in
            the bulk, midpoint rule on the boundary, implicit Euler
            half-step in the bulk.  Conditionally stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg

from .assembly import BlockSystem, assemble_block_system
from .linalg import DEFAULT_SOLVE, SolveConfig, SpdSolver
from .mesh import Mesh
from .problems import DiscreteInitialData, ProblemSpec, initial_data

BLOWUP_THRESHOLD = 1e6


class SchemeError(RuntimeError):
    pass


class BlowUpError(SchemeError):
    """State exceeded the blow-up threshold (or went non-finite)."""

    def __init__(self, t: float, max_abs: float):
        super().__init__(f"blow-up at t={t:.6g}: max |entry| = {max_abs:.3e}")
        self.t = t
        self.max_abs = max_abs


class NewtonError(SchemeError):
    """Newton iteration did not reach the tolerance."""

    def __init__(self, iterations: int, residual: float):
        super().__init__(f"Newton did not converge in {iterations} iterations, "
                         f"residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class StepState:
    """One time level: interior values, boundary values, boundary difference."""

    u1: np.ndarray
    p: np.ndarray
    dp: np.ndarray
    t: float

    @property
    def u(self) -> np.ndarray:
        """Full bulk vector (u1, p), using the trace identification u2 = p."""
        return np.concatenate([self.u1, self.p])


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 30

    def __post_init__(self):
        if self.tol <= 0.0 or self.max_iter < 1:
            raise ValueError("NewtonConfig needs tol > 0 and max_iter >= 1")


DEFAULT_NEWTON = NewtonConfig()


@dataclass
class NewtonStats:
    iterations: int
    residuals: list[float]


def _dense_or_lu_solver(dense_threshold: int) -> Callable:
    """Linear solver for (possibly unsymmetric) Newton Jacobians."""

    def solve(jac, rhs):
        if sp.issparse(jac):
            if jac.shape[0] < dense_threshold:
                return np.linalg.solve(jac.toarray(), rhs)
            return sp.linalg.splu(sp.csc_matrix(jac)).solve(rhs)
        return np.linalg.solve(np.asarray(jac, dtype=float), rhs)

    return solve


def newton_solve(residual: Callable, jacobian: Callable, p_start: np.ndarray,
                 cfg: NewtonConfig = DEFAULT_NEWTON,
                 lin_solve: Callable | None = None):
    """Plain Newton iteration; returns (solution, NewtonStats).

    Stops once ||residual||_2 <= cfg.tol; the iteration count equals the
    number of Jacobian solves performed.
    """
    lin_solve = lin_solve or _dense_or_lu_solver(DEFAULT_SOLVE.dense_threshold)
    x = np.array(p_start, dtype=float)
    history: list[float] = []
    for k in range(cfg.max_iter + 1):
        r = np.atleast_1d(np.asarray(residual(x), dtype=float))
        rn = float(np.linalg.norm(r))
        history.append(rn)
        if not math.isfinite(rn):
            raise NewtonError(k, rn)
        if rn <= cfg.tol:
            return x, NewtonStats(iterations=k, residuals=history)
        if k == cfg.max_iter:
            break
        try:
            dx = lin_solve(jacobian(x), -r)
        except Exception as e:
            raise NewtonError(k, rn) from e
        x = x + dx
    raise NewtonError(cfg.max_iter, history[-1])


class DiscreteSystem:
    """Assembled matrices for one (mesh, coefficients) pair plus solver caches.

    The per-(stage, tau) SPD solvers are cached, so factorizations are
    reused across the steps of an integration.
    """

    def __init__(self, mesh: Mesh, blocks: BlockSystem, m_omega, a_omega,
                 solve_cfg: SolveConfig = DEFAULT_SOLVE):
        if blocks.M_gamma is None or blocks.A_gamma is None:
            raise SchemeError("schemes need the surface matrices")
        self.mesh = mesh
        self.blocks = blocks
        self.m_omega = m_omega
        self.a_omega = a_omega
        self.solve_cfg = solve_cfg
        self.n1 = blocks.n1
        self.n2 = blocks.n2
        b = blocks
        self.M11, self.M12, self.M21, self.M22 = (b.M11.csr, b.M12, b.M21,
                                                  b.M22.csr)
        self.A11, self.A12, self.A21, self.A22 = (b.A11.csr, b.A12, b.A21,
                                                  b.A22.csr)
        self.Mg = b.M_gamma.csr
        self.Ag = b.A_gamma.csr
        self.Momega = m_omega.csr
        self._solvers: dict = {}
        self._mats: dict = {}
        self.unsym_solve = _dense_or_lu_solver(solve_cfg.dense_threshold)

    def matrix(self, key: str, tau: float) -> sp.csr_matrix:
        mk = (key, tau)
        if mk not in self._mats:
            if key == "lie_bulk":
                m = self.M11 / tau + self.A11
            elif key == "gamma":
                m = self.Mg / tau + self.Ag
            elif key == "euler":
                mhat = sp.bmat([[self.M11, self.M12],
                                [self.M21, self.M22 + self.Mg]], format="csr")
                ahat = sp.bmat([[self.A11, self.A12],
                                [self.A21, self.A22 + self.Ag]], format="csr")
                m = mhat / tau + ahat
            elif key == "euler_mass":
                m = sp.bmat([[self.M11, self.M12],
                             [self.M21, self.M22 + self.Mg]], format="csr")
            elif key == "strang_gamma":
                m = self.Mg / tau + 0.5 * self.Ag
            elif key == "strang_bulk":
                m = 2.0 * self.M11 / tau + self.A11
            elif key == "mass11":
                m = self.M11
            else:
                raise KeyError(key)
            self._mats[mk] = sp.csr_matrix(m)
        return self._mats[mk]

    def solver(self, key: str, tau: float) -> SpdSolver:
        sk = (key, tau)
        if sk not in self._solvers:
            self._solvers[sk] = SpdSolver(self.matrix(key, tau), self.solve_cfg)
        return self._solvers[sk]

    # -- nodal forcing, realized as mass matrix times nodal values --------

    def bulk_nodal(self, spec: ProblemSpec, t: float, u1, p) -> np.ndarray | None:
        if spec.f_omega is None:
            return None
        u = np.concatenate([u1, p])
        return np.asarray(spec.f_omega(t, self.mesh.nodes, u), dtype=float)

    def bulk_forcing(self, spec: ProblemSpec, t: float, u1, p):
        """(f1, f2): interior/boundary split of M_omega times nodal forcing."""
        g = self.bulk_nodal(spec, t, u1, p)
        if g is None:
            return np.zeros(self.n1), np.zeros(self.n2)
        f = self.Momega @ g
        return f[:self.n1], f[self.n1:]

    def gamma_nodal(self, spec: ProblemSpec, t: float, p) -> np.ndarray:
        if spec.f_gamma is None:
            return np.zeros(self.n2)
        xg = self.mesh.boundary_nodes
        return np.asarray(spec.f_gamma(t, xg, p), dtype=float)

    def gamma_forcing(self, spec: ProblemSpec, t: float, p) -> np.ndarray:
        return self.Mg @ self.gamma_nodal(spec, t, p)


def discretize(mesh: Mesh, spec: ProblemSpec,
               solve_cfg: SolveConfig = DEFAULT_SOLVE) -> DiscreteSystem:
    """Assemble the block system for the coefficients of ``spec``."""
    m_omega, a_omega, blocks = assemble_block_system(
        mesh, spec.kappa, spec.alpha_omega, spec.beta, spec.alpha_gamma)
    return DiscreteSystem(mesh, blocks, m_omega, a_omega, solve_cfg)


def _ensure_finite(t: float, *vecs) -> None:
    for v in vecs:
        if not np.all(np.isfinite(v)):
            raise BlowUpError(t, math.inf)
        m = float(np.abs(v).max(initial=0.0))
        if m > BLOWUP_THRESHOLD:
            raise BlowUpError(t, m)


def _record(stats, item) -> None:
    if stats is not None:
        stats.append(item)


def _solve_bulk_stage(system: DiscreteSystem, spec: ProblemSpec, key: str,
                      tau: float, t_eval: float, rhs_const: np.ndarray,
                      u1_start: np.ndarray, p_arg: np.ndarray,
                      newton: NewtonConfig, stats) -> np.ndarray:
    """Solve (system.matrix(key)) u1 = rhs_const + f1(t_eval; u1, p_arg).

    Linear solve when the bulk forcing is state-independent, Newton on the
    interior block otherwise.
    """
    mat = system.matrix(key, tau)
    if not spec.omega_state_dependent:
        f1, _ = system.bulk_forcing(spec, t_eval, u1_start, p_arg)
        return system.solver(key, tau).solve(rhs_const + f1)
    n1 = system.n1
    nodes1 = system.mesh.nodes[:n1]

    def f1_of(v):
        f1, _ = system.bulk_forcing(spec, t_eval, v, p_arg)
        return f1

    def residual(v):
        return mat @ v - rhs_const - f1_of(v)

    def jacobian(v):
        dg = np.asarray(spec.df_omega(t_eval, nodes1, v), dtype=float)
        return mat - system.M11 @ sp.diags(dg)

    u1_new, st = newton_solve(residual, jacobian, u1_start, newton,
                              system.unsym_solve)
    _record(stats, st)
    return u1_new


def _solve_gamma_stage(system: DiscreteSystem, spec: ProblemSpec, key: str,
                       tau: float, t_eval: float, rhs_const: np.ndarray,
                       p_start: np.ndarray, newton: NewtonConfig, stats,
                       midpoint_with: np.ndarray | None = None) -> np.ndarray:
    """Solve (system.matrix(key)) p = rhs_const + M_gamma g(t_eval; arg(p)).

    ``midpoint_with`` switches the state argument to the average with the
    given vector (Strang's midpoint rule), which halves the Jacobian term.
    """
    mat = system.matrix(key, tau)
    if not spec.gamma_state_dependent:
        arg = p_start if midpoint_with is None else midpoint_with
        return system.solver(key, tau).solve(
            rhs_const + system.gamma_forcing(spec, t_eval, arg))
    xg = system.mesh.boundary_nodes
    scale = 1.0 if midpoint_with is None else 0.5

    def p_arg(q):
        return q if midpoint_with is None else 0.5 * (q + midpoint_with)

    def residual(q):
        return mat @ q - rhs_const - system.gamma_forcing(spec, t_eval, p_arg(q))

    def jacobian(q):
        dg = np.asarray(spec.df_gamma(t_eval, xg, p_arg(q)), dtype=float)
        return mat - scale * (system.Mg @ sp.diags(dg))

    p_new, st = newton_solve(residual, jacobian, p_start, newton,
                             system.unsym_solve)
    _record(stats, st)
    return p_new


def lie_step(state: StepState, tau: float, system: DiscreteSystem,
             spec: ProblemSpec, newton: NewtonConfig = DEFAULT_NEWTON,
             stats: list | None = None) -> StepState:
    """One step of the derivative-aware two-stage splitting.

    Stage 1 (bulk):    (M11/tau + A11) u1' = M11 u1/tau + f1' - M12 dp - A12 p
    Stage 2 (surface): (Mg/tau + Ag) p' = Mg p/tau + fg(p') + f2'
                       - M22 dp - A22 p - M21 (u1'-u1)/tau - A21 u1'
    """
    t1 = state.t + tau
    rhs1 = (system.M11 @ state.u1 / tau - system.M12 @ state.dp
            - system.A12 @ state.p)
    u1n = _solve_bulk_stage(system, spec, "lie_bulk", tau, t1, rhs1,
                            state.u1, state.p, newton, stats)
    _ensure_finite(t1, u1n)
    du1 = (u1n - state.u1) / tau

    _, f2 = system.bulk_forcing(spec, t1, u1n, state.p)
    rhs2 = (system.Mg @ state.p / tau + f2 - system.M22 @ state.dp
            - system.A22 @ state.p - system.M21 @ du1 - system.A21 @ u1n)
    pn = _solve_gamma_stage(system, spec, "gamma", tau, t1, rhs2, state.p,
                            newton, stats)
    _ensure_finite(t1, pn)
    return StepState(u1=u1n, p=pn, dp=(pn - state.p) / tau, t=t1)


def naive_pdae_step(state: StepState, tau: float, system: DiscreteSystem,
                    spec: ProblemSpec, newton: NewtonConfig = DEFAULT_NEWTON,
                    stats: list | None = None) -> StepState:
    """Lie-type splitting without any derivative information.

    Identical to :func:`lie_step` with the M12 dp, M22 dp, and M21 du1
    coupling terms removed; kept as the reference failure mode.
    """
    t1 = state.t + tau
    rhs1 = system.M11 @ state.u1 / tau - system.A12 @ state.p
    u1n = _solve_bulk_stage(system, spec, "lie_bulk", tau, t1, rhs1,
                            state.u1, state.p, newton, stats)
    _ensure_finite(t1, u1n)

    _, f2 = system.bulk_forcing(spec, t1, u1n, state.p)
    rhs2 = (system.Mg @ state.p / tau + f2 - system.A22 @ state.p
            - system.A21 @ u1n)
    pn = _solve_gamma_stage(system, spec, "gamma", tau, t1, rhs2, state.p,
                            newton, stats)
    _ensure_finite(t1, pn)
    return StepState(u1=u1n, p=pn, dp=(pn - state.p) / tau, t=t1)


def monolithic_euler_step(state: StepState, tau: float, system: DiscreteSystem,
                          spec: ProblemSpec,
                          newton: NewtonConfig = DEFAULT_NEWTON,
                          stats: list | None = None) -> StepState:
    """Implicit Euler on the coupled system (the splitting-free baseline):

    ([[M11,M12],[M21,M22+Mg]]/tau + [[A11,A12],[A21,A22+Ag]]) x' = ...
    """
    t1 = state.t + tau
    n1 = system.n1
    x_old = state.u
    rhs_base = system.matrix("euler_mass", tau) @ x_old / tau
    mat = system.matrix("euler", tau)

    if not (spec.gamma_state_dependent or spec.omega_state_dependent):
        f1, f2 = system.bulk_forcing(spec, t1, state.u1, state.p)
        fg = system.gamma_forcing(spec, t1, state.p)
        rhs = rhs_base + np.concatenate([f1, f2 + fg])
        x = system.solver("euler", tau).solve(rhs)
    else:
        xg = system.mesh.boundary_nodes

        def forcing(x):
            f1, f2 = system.bulk_forcing(spec, t1, x[:n1], state.p)
            fg = system.gamma_forcing(spec, t1, x[n1:])
            return np.concatenate([f1, f2 + fg])

        def residual(x):
            return mat @ x - rhs_base - forcing(x)

        def jacobian(x):
            jac = sp.csr_matrix(mat, copy=True)
            if spec.gamma_state_dependent:
                dg = np.asarray(spec.df_gamma(t1, xg, x[n1:]), dtype=float)
                corner = system.Mg @ sp.diags(dg)
                jac = jac - sp.bmat(
                    [[sp.csr_matrix((n1, n1)), None], [None, corner]],
                    format="csr")
            if spec.omega_state_dependent:
                dgo = np.asarray(
                    spec.df_omega(t1, system.mesh.nodes[:n1], x[:n1]),
                    dtype=float)
                full = sp.diags(np.concatenate([dgo, np.zeros(system.n2)]))
                jac = jac - system.Momega @ full
            return jac

        x, st = newton_solve(residual, jacobian, x_old, newton,
                             system.unsym_solve)
        _record(stats, st)

    u1n, pn = x[:n1], x[n1:]
    _ensure_finite(t1, u1n, pn)
    return StepState(u1=u1n, p=pn, dp=(pn - state.p) / tau, t=t1)


def strang_step(state: StepState, tau: float, system: DiscreteSystem,
                spec: ProblemSpec, newton: NewtonConfig = DEFAULT_NEWTON,
                stats: list | None = None) -> StepState:
    """Symmetrized splitting: explicit bulk half-step, midpoint boundary
    step, implicit bulk half-step.  Blows up when tau is too large for the
    mesh; the caller sees that as a BlowUpError."""
    t_half = state.t + 0.5 * tau
    t1 = state.t + tau

    # stage 1, explicit: M11 (2/tau)(u_half - u1) = f1^n - A11 u1 - M12 dp - A12 p
    f1_old, _ = system.bulk_forcing(spec, state.t, state.u1, state.p)
    w = (f1_old - system.A11 @ state.u1 - system.M12 @ state.dp
         - system.A12 @ state.p)
    du_half = system.solver("mass11", tau).solve(w)
    u1_half = state.u1 + 0.5 * tau * du_half
    _ensure_finite(t_half, u1_half)

    # stage 2, midpoint boundary step over the full interval
    _, f2_half = system.bulk_forcing(spec, t_half, u1_half, state.p)
    rhs2 = (system.Mg @ state.p / tau - 0.5 * (system.Ag @ state.p) + f2_half
            - system.M22 @ state.dp - system.A22 @ state.p
            - system.M21 @ du_half - system.A21 @ u1_half)
    pn = _solve_gamma_stage(system, spec, "strang_gamma", tau, t_half, rhs2,
                            state.p, newton, stats, midpoint_with=state.p)
    _ensure_finite(t1, pn)
    dpn = (pn - state.p) / tau

    # stage 3, implicit: M11 (2/tau)(u1' - u_half) + A11 u1' = f1' - M12 dp' - A12 p'
    rhs3 = (2.0 / tau) * (system.M11 @ u1_half) - system.M12 @ dpn \
        - system.A12 @ pn
    u1n = _solve_bulk_stage(system, spec, "strang_bulk", tau, t1, rhs3,
                            u1_half, state.p, newton, stats)
    _ensure_finite(t1, u1n)
    return StepState(u1=u1n, p=pn, dp=dpn, t=t1)


STEPPERS = {
    "lie": lie_step,
    "naive": naive_pdae_step,
    "euler": monolithic_euler_step,
    "strang": strang_step,
}


@dataclass
class Trajectory:
    """States of one integration plus run diagnostics."""

    states: list[StepState]
    scheme: str
    tau: float
    blow_up: bool = False
    blow_up_step: int | None = None
    newton: list[NewtonStats] = field(default_factory=list)
    per_step_newton: list[int] = field(default_factory=list)
    max_norm_u_M: float = 0.0
    max_norm_p_Mgamma: float = 0.0

    @property
    def newton_max_iterations(self) -> int:
        return max((s.iterations for s in self.newton), default=0)


class IntegrationError(SchemeError):
    pass


def stability_margins(traj: Trajectory, system: DiscreteSystem,
                      spec: ProblemSpec, c_M: float, c_inv: float
                      ) -> np.ndarray:
    """Per-step ratio LHS/RHS of the splitting energy bound.

    After n+1 steps the bound reads

        ||u^{n+1}||_A^2 + ||p^{n+1}||_Ag^2
            + tau * sum_k gamma ||dp^{k+1}||_Mg^2
        <= ||u^0||_A^2 + ||p^0||_Ag^2 + 2 tau ||dp^0||_M22^2
            + tau * sum_k (||f_W^{k+1}||_{M^-1}^2 + ||f_G^{k+1}||_{Mg^-1}^2)

    with gamma = 1 - 4 c_M h - c_M alpha_W tau h - c_M c_inv tau / h.  For a
    stable run every ratio stays at or below one (up to roundoff).  Since the
    discrete right-hand vectors are mass matrix times nodal values f = M g,
    the inverse-mass norms reduce to g' M g exactly.
    """
    tau = traj.tau
    h = system.mesh.h
    gamma = (1.0 - 4.0 * c_M * h - c_M * spec.alpha_omega * tau * h
             - c_M * c_inv * tau / h)
    a_full = system.a_omega.csr
    s0 = traj.states[0]
    u0 = s0.u
    rhs = (float(u0 @ (a_full @ u0)) + float(s0.p @ (system.Ag @ s0.p))
           + 2.0 * tau * float(s0.dp @ (system.M22 @ s0.dp)))
    running = 0.0
    ratios = []
    prev = s0
    for state in traj.states[1:]:
        running += tau * gamma * float(state.dp @ (system.Mg @ state.dp))
        g_bulk = system.bulk_nodal(spec, state.t, state.u1, prev.p)
        if g_bulk is not None:
            rhs += tau * float(g_bulk @ (system.Momega @ g_bulk))
        if spec.f_gamma is not None:
            g_surf = system.gamma_nodal(spec, state.t, state.p)
            rhs += tau * float(g_surf @ (system.Mg @ g_surf))
        u = state.u
        lhs = (float(u @ (a_full @ u)) + float(state.p @ (system.Ag @ state.p))
               + running)
        ratios.append(lhs / rhs)
        prev = state
    return np.asarray(ratios)


def integrate(spec: ProblemSpec, mesh: Mesh, scheme: str, tau: float,
              observers: Sequence[Callable] = (),
              newton: NewtonConfig = DEFAULT_NEWTON,
              solve_cfg: SolveConfig = DEFAULT_SOLVE,
              initial: DiscreteInitialData | None = None,
              system: DiscreteSystem | None = None) -> Trajectory:
    """Integrate from t=0 to spec.T in steps of tau.

    T/tau must be an integer (the convergence harness refines tau so that
    this always holds).  Observers are called as observer(step_index, state)
    after every accepted step; their failures abort the run with context.
    A blow-up sets the flag and truncates the trajectory instead of raising.
    """
    if scheme not in STEPPERS:
        raise ValueError(f"unknown scheme {scheme!r}; one of {sorted(STEPPERS)}")
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    n_steps_f = spec.T / tau
    n_steps = round(n_steps_f)
    if n_steps < 1 or abs(n_steps_f - n_steps) > 1e-9 * max(1, n_steps):
        raise ValueError(f"T/tau = {n_steps_f} is not an integer")

    if system is None:
        system = discretize(mesh, spec, solve_cfg)
    if initial is None:
        initial = initial_data(spec, mesh)
    step_fn = STEPPERS[scheme]

    state = StepState(u1=np.array(initial.u1_0, dtype=float),
                      p=np.array(initial.p_0, dtype=float),
                      dp=np.array(initial.dp_0, dtype=float), t=0.0)
    traj = Trajectory(states=[state], scheme=scheme, tau=tau)

    def norms(s: StepState):
        u = s.u
        nu = math.sqrt(max(float(u @ (system.Momega @ u)), 0.0))
        npg = math.sqrt(max(float(s.p @ (system.Mg @ s.p)), 0.0))
        return nu, npg

    nu, npg = norms(state)
    traj.max_norm_u_M = nu
    traj.max_norm_p_Mgamma = npg

    for n in range(1, n_steps + 1):
        solves: list[NewtonStats] = []
        try:
            state = step_fn(state, tau, system, spec, newton, stats=solves)
        except BlowUpError:
            traj.blow_up = True
            traj.blow_up_step = n
            break
        traj.newton.extend(solves)
        traj.per_step_newton.append(sum(s.iterations for s in solves))
        traj.states.append(state)
        nu, npg = norms(state)
        traj.max_norm_u_M = max(traj.max_norm_u_M, nu)
        traj.max_norm_p_Mgamma = max(traj.max_norm_p_Mgamma, npg)
        for obs in observers:
            try:
                obs(n, state)
            except Exception as e:
                raise IntegrationError(
                    f"observer {obs!r} failed at step {n} (t={state.t:.6g})"
                ) from e
    return traj
