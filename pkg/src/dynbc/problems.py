"""Built-in test problems: coefficients, manufactured forcing, exact solutions.

The continuous model on the unit disk is

    u' - div(kappa grad u) + alpha_omega u = f_omega(u)      in the bulk,
    p' - beta Lap_Gamma p + kappa du/dnu + alpha_gamma p = f_gamma(p)
                                                           on the boundary,

with p the boundary trace of u.  Forcing callables receive (t, xy, state)
with xy an (n, 2) coordinate array and are evaluated nodally; the discrete
right-hand-side vectors are mass matrix times these nodal values.

All manufactured forcing below is hand-derived and checked against the
finite-difference residual oracle in :func:`validate_forcing`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .mesh import Mesh

BUILTIN_NAMES = ("linear_oscillatory", "linear_smooth", "allen_cahn")


class ProblemError(Exception):
    """Unknown problem, missing exact solution, or bad configuration."""


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, right-hand sides, and optional exact solution.

    A None forcing callable means identically zero.  ``df_gamma`` /
    ``df_omega`` are the state derivatives of the corresponding forcing;
    they are present exactly when the forcing is state-dependent (the
    implicit solvers use them as Newton Jacobians).
    """

    name: str
    kappa: float
    alpha_omega: float
    alpha_gamma: float
    beta: float
    f_omega: Callable | None = None
    f_gamma: Callable | None = None
    df_gamma: Callable | None = None
    df_omega: Callable | None = None
    exact: Callable | None = None
    exact_dt: Callable | None = None
    T: float = 1.0

    def __post_init__(self):
        if not callable(self.kappa) and not self.kappa > 0.0:
            raise ProblemError("kappa must be positive")
        if self.alpha_omega < 0.0 or self.alpha_gamma < 0.0 or self.beta < 0.0:
            raise ProblemError("alpha_omega, alpha_gamma, beta must be >= 0")
        if (self.exact is None) != (self.exact_dt is None):
            raise ProblemError("exact and exact_dt must be given together")
        if self.T <= 0.0:
            raise ProblemError("final time T must be positive")

    @property
    def gamma_state_dependent(self) -> bool:
        return self.df_gamma is not None

    @property
    def omega_state_dependent(self) -> bool:
        return self.df_omega is not None


@dataclass(frozen=True)
class DiscreteInitialData:
    u1_0: np.ndarray   # interior nodal values
    p_0: np.ndarray    # boundary nodal values (trace of u at t=0)
    dp_0: np.ndarray   # initial discrete derivative of p


def _linear_problem(name: str, dg: Callable, g: Callable) -> ProblemSpec:
    """Problems with exact solution g(t) * x * y on the unit disk.

    x*y is harmonic, so the bulk forcing is g'(t) x y.  On the unit circle
    the trace satisfies -Lap_Gamma(xy) = 4 xy and du/dnu = 2 xy, giving the
    surface forcing (g'(t) + 6 g(t)) x y.
    """

    def exact(t, xy):
        return g(t) * xy[:, 0] * xy[:, 1]

    def exact_dt(t, xy):
        return dg(t) * xy[:, 0] * xy[:, 1]

    def f_omega(t, xy, u):
        return dg(t) * xy[:, 0] * xy[:, 1]

    def f_gamma(t, xy, p):
        return (dg(t) + 6.0 * g(t)) * xy[:, 0] * xy[:, 1]

    return ProblemSpec(name=name, kappa=1.0, alpha_omega=0.0, alpha_gamma=0.0,
                       beta=1.0, f_omega=f_omega, f_gamma=f_gamma,
                       exact=exact, exact_dt=exact_dt)


def _allen_cahn() -> ProblemSpec:
    """Heat equation coupled to an Allen-Cahn boundary condition.

    Exact solution (x^2+y^2)^2 cos(pi t / 2); the boundary equation carries
    the double-well term -p^3 + p, all remaining forcing is state-independent.
    """

    def c(t):
        return np.cos(np.pi * t / 2)

    def dc(t):
        return -np.pi / 2 * np.sin(np.pi * t / 2)

    def exact(t, xy):
        r2 = xy[:, 0] ** 2 + xy[:, 1] ** 2
        return r2 ** 2 * c(t)

    def exact_dt(t, xy):
        r2 = xy[:, 0] ** 2 + xy[:, 1] ** 2
        return r2 ** 2 * dc(t)

    def f_omega(t, xy, u):
        # Lap (r^4) = 16 r^2
        r2 = xy[:, 0] ** 2 + xy[:, 1] ** 2
        return dc(t) * r2 ** 2 - 16.0 * c(t) * r2

    def f_gamma(t, xy, p):
        # on |x| = 1: p_exact = c(t), Lap_Gamma p_exact = 0, du/dnu = 4 c(t)
        ct = c(t)
        g = dc(t) + 4.0 * ct + ct ** 3 - ct
        return g + p - p ** 3

    def df_gamma(t, xy, p):
        return 1.0 - 3.0 * p ** 2

    return ProblemSpec(name="allen_cahn", kappa=1.0, alpha_omega=0.0,
                       alpha_gamma=0.0, beta=1.0, f_omega=f_omega,
                       f_gamma=f_gamma, df_gamma=df_gamma,
                       exact=exact, exact_dt=exact_dt)


def builtin_problem(name: str) -> ProblemSpec:
    """Return one of the built-in problem definitions."""
    if name == "linear_smooth":
        return _linear_problem(name, dg=lambda t: -np.exp(-t),
                               g=lambda t: np.exp(-t))
    if name == "linear_oscillatory":
        def g(t):
            return np.exp(-t) * np.cos(10.0 * t)

        def dg(t):
            return -np.exp(-t) * (np.cos(10.0 * t) + 10.0 * np.sin(10.0 * t))

        return _linear_problem(name, dg=dg, g=g)
    if name == "allen_cahn":
        return _allen_cahn()
    raise ProblemError(f"unknown problem {name!r}; available: {BUILTIN_NAMES}")


def load_problem_config(path) -> ProblemSpec:
    """Load a problem from a JSON file referencing built-in forcing.

    Recognized keys: ``base`` (required built-in name), ``name``, ``T``, and
    the coefficients ``kappa``, ``alpha_omega``, ``alpha_gamma``, ``beta``.
    Overriding a PDE coefficient invalidates the manufactured exact solution,
    so it is dropped in that case.
    """
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ProblemError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(cfg, dict) or "base" not in cfg:
        raise ProblemError(f"{path}: config must be an object with a 'base' key")
    known = {"base", "name", "T", "kappa", "alpha_omega", "alpha_gamma", "beta"}
    unknown = set(cfg) - known
    if unknown:
        raise ProblemError(f"{path}: unknown keys {sorted(unknown)}")
    spec = builtin_problem(cfg["base"])
    changes = {}
    coeff_changed = False
    for key in ("kappa", "alpha_omega", "alpha_gamma", "beta"):
        if key in cfg:
            val = float(cfg[key])
            if val != getattr(spec, key):
                coeff_changed = True
            changes[key] = val
    if "T" in cfg:
        changes["T"] = float(cfg["T"])
    changes["name"] = str(cfg.get("name", cfg["base"]))
    if coeff_changed:
        changes["exact"] = None
        changes["exact_dt"] = None
    return replace(spec, **changes)


def interpolate_exact(spec: ProblemSpec, mesh: Mesh, t: float) -> np.ndarray:
    """Nodal values of the exact solution at time t over all nodes."""
    if spec.exact is None:
        raise ProblemError(f"problem {spec.name!r} has no exact solution")
    return np.asarray(spec.exact(t, mesh.nodes), dtype=float)


def initial_data(spec: ProblemSpec, mesh: Mesh, u0=None, dp0=None
                 ) -> DiscreteInitialData:
    """Discrete initial data, from the exact solution or explicit fields.

    ``u0``/``dp0`` may be nodal vectors or callables of the coordinates;
    both must be given together.  When taken from the exact solution,
    dp_0 equals the exact time derivative at t=0 on the boundary.
    """
    n1 = mesh.n_interior
    if u0 is not None or dp0 is not None:
        if u0 is None or dp0 is None:
            raise ProblemError("explicit initial data needs both u0 and dp0")
        u0v = np.asarray(u0(mesh.nodes) if callable(u0) else u0, dtype=float)
        dp0v = np.asarray(dp0(mesh.boundary_nodes) if callable(dp0) else dp0,
                          dtype=float)
        if u0v.shape != (mesh.n_omega,) or dp0v.shape != (mesh.n_gamma,):
            raise ProblemError("initial data has wrong length")
        return DiscreteInitialData(u1_0=u0v[:n1].copy(), p_0=u0v[n1:].copy(),
                                   dp_0=dp0v)
    if spec.exact is None:
        raise ProblemError("no exact solution and no explicit initial fields")
    u0v = interpolate_exact(spec, mesh, 0.0)
    dp0v = np.asarray(spec.exact_dt(0.0, mesh.boundary_nodes), dtype=float)
    return DiscreteInitialData(u1_0=u0v[:n1], p_0=u0v[n1:], dp_0=dp0v)


# -- finite-difference residual oracle ------------------------------------
#
# Evaluated in extended precision so the second-difference roundoff stays
# far below the 1e-6 acceptance bound.

_LD = np.longdouble
_FD_STEP = _LD("1e-5")


def _eval(fn, t, pts, state=None):
    if state is None:
        return fn(t, pts)
    return fn(t, pts, state)


def bulk_residual(spec: ProblemSpec, t: float, points: np.ndarray) -> np.ndarray:
    """Residual of the bulk equation at interior points, via central
    finite differences of the exact solution (step 1e-5)."""
    if spec.exact is None:
        raise ProblemError("oracle needs an exact solution")
    if callable(spec.kappa):
        raise ProblemError("oracle supports constant kappa only")
    pts = np.asarray(points, dtype=_LD)
    t = _LD(t)
    d = _FD_STEP
    ex = spec.exact
    u = ex(t, pts)
    du_dt = (ex(t + d, pts) - ex(t - d, pts)) / (2 * d)
    ee = np.zeros_like(pts)
    ee[:, 0] = d
    lap = (ex(t, pts + ee) + ex(t, pts - ee) - 2 * u) / d ** 2
    ee[:, 0] = 0
    ee[:, 1] = d
    lap = lap + (ex(t, pts + ee) + ex(t, pts - ee) - 2 * u) / d ** 2
    rhs = _eval(spec.f_omega, t, pts, u) if spec.f_omega is not None else 0.0
    res = du_dt - _LD(spec.kappa) * lap + _LD(spec.alpha_omega) * u - rhs
    return np.asarray(res, dtype=float)


def surface_residual(spec: ProblemSpec, t: float, angles: np.ndarray) -> np.ndarray:
    """Residual of the dynamic boundary condition at unit-circle angles,
    via finite differences in time, arc angle, and radius."""
    if spec.exact is None:
        raise ProblemError("oracle needs an exact solution")
    if callable(spec.kappa):
        raise ProblemError("oracle supports constant kappa only")
    th = np.asarray(angles, dtype=_LD)
    t = _LD(t)
    d = _FD_STEP
    ex = spec.exact

    def on_circle(theta, radius=_LD(1.0)):
        return np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])

    pts = on_circle(th)
    p = ex(t, pts)
    dp_dt = (ex(t + d, pts) - ex(t - d, pts)) / (2 * d)
    lap_g = (ex(t, on_circle(th + d)) + ex(t, on_circle(th - d)) - 2 * p) / d ** 2
    du_dnu = (ex(t, on_circle(th, 1 + d)) - ex(t, on_circle(th, 1 - d))) / (2 * d)
    rhs = _eval(spec.f_gamma, t, pts, p) if spec.f_gamma is not None else 0.0
    res = (dp_dt - _LD(spec.beta) * lap_g + _LD(spec.kappa) * du_dnu
           + _LD(spec.alpha_gamma) * p - rhs)
    return np.asarray(res, dtype=float)


def validate_forcing(spec: ProblemSpec, n_samples: int = 100,
                     seed: int = 20260809) -> float:
    """Max |PDE residual| of the manufactured forcing over random interior
    points and boundary angles at random times."""
    rng = np.random.default_rng(seed)
    t_lo, t_hi = 0.02 * spec.T, 0.98 * spec.T
    worst = 0.0
    for _ in range(n_samples):
        t = rng.uniform(t_lo, t_hi)
        r = 0.95 * math.sqrt(rng.uniform(0.0, 1.0))
        ang = rng.uniform(0.0, 2.0 * math.pi)
        pt = np.array([[r * math.cos(ang), r * math.sin(ang)]])
        worst = max(worst, abs(float(bulk_residual(spec, t, pt)[0])))
        th = rng.uniform(0.0, 2.0 * math.pi)
        worst = max(worst, abs(float(surface_residual(spec, t, np.array([th]))[0])))
    return worst
