"""Shared fixtures and independent dense reference solvers.

The dense references assemble each scheme's one-step system verbatim as a
full matrix and solve it with numpy, independently of the production step
implementations they are used to check.
"""

import numpy as np
import pytest

from dynbc.mesh import generate_crisscross_square, generate_disk_mesh
from dynbc.problems import ProblemSpec, builtin_problem
from dynbc.schemes import StepState, discretize


@pytest.fixture(scope="session")
def criss1():
    return generate_crisscross_square(1)


@pytest.fixture(scope="session")
def disk_coarse():
    """Disk mesh with a handful of nodes, small enough for dense checks."""
    return generate_disk_mesh(0.8)


@pytest.fixture(scope="session")
def disk_medium():
    return generate_disk_mesh(0.19)


def free_problem(**overrides) -> ProblemSpec:
    """Zero-forcing problem with the default unit coefficients."""
    kw = dict(name="free", kappa=1.0, alpha_omega=0.0, alpha_gamma=0.0,
              beta=1.0, T=1.0)
    kw.update(overrides)
    return ProblemSpec(**kw)


def random_state(rng, system, t=0.0) -> StepState:
    return StepState(u1=rng.standard_normal(system.n1),
                     p=rng.standard_normal(system.n2),
                     dp=rng.standard_normal(system.n2), t=t)


def dense_blocks(system):
    return {name: getattr(system, name).toarray()
            for name in ("M11", "M12", "M21", "M22", "A11", "A12", "A21",
                         "A22", "Mg", "Ag")}


def dense_lie_reference(system, spec, state, tau):
    """One step of the derivative-aware splitting, assembled as the single
    block-triangular system and solved densely.  State-independent forcing
    only."""
    d = dense_blocks(system)
    n1, n2 = system.n1, system.n2
    t1 = state.t + tau
    mhat = np.block([[d["M11"], np.zeros((n1, n2))], [d["M21"], d["Mg"]]])
    ahat = np.block([[d["A11"], np.zeros((n1, n2))], [d["A21"], d["Ag"]]])
    f1, f2 = system.bulk_forcing(spec, t1, state.u1, state.p)
    fg = system.gamma_forcing(spec, t1, state.p)
    rhs = (np.concatenate([f1, f2 + fg])
           + mhat @ np.concatenate([state.u1, state.p]) / tau
           - np.concatenate([d["A12"] @ state.p, d["A22"] @ state.p])
           - np.concatenate([d["M12"] @ state.dp, d["M22"] @ state.dp]))
    x = np.linalg.solve(mhat / tau + ahat, rhs)
    return x[:n1], x[n1:], (x[n1:] - state.p) / tau


def dense_euler_reference(system, spec, state, tau):
    """Coupled implicit Euler step solved densely (state-independent
    forcing)."""
    d = dense_blocks(system)
    n1, n2 = system.n1, system.n2
    t1 = state.t + tau
    mhat = np.block([[d["M11"], d["M12"]], [d["M21"], d["M22"] + d["Mg"]]])
    ahat = np.block([[d["A11"], d["A12"]], [d["A21"], d["A22"] + d["Ag"]]])
    f1, f2 = system.bulk_forcing(spec, t1, state.u1, state.p)
    fg = system.gamma_forcing(spec, t1, state.p)
    rhs = (np.concatenate([f1, f2 + fg])
           + mhat @ np.concatenate([state.u1, state.p]) / tau)
    x = np.linalg.solve(mhat / tau + ahat, rhs)
    return x[:n1], x[n1:]


__all__ = ["free_problem", "random_state", "dense_blocks",
           "dense_lie_reference", "dense_euler_reference", "builtin_problem",
           "discretize"]
