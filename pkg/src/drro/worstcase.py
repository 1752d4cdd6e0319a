"""Exact SDP duals of worst-case quadratic expectations over Wasserstein balls.

Two regimes:

* moment nominal on R^n (absolutely continuous, described by mean/covariance):
  requires the quadratic's largest eigenvalue to be nonzero; the dual is a
  three-LMI program in (gamma, beta, X) whose strict constraint
  gamma I > P is encoded with a scaled margin.

* discrete nominal on an ellipsoidal support: one (n+1)-sided LMI per atom,
  coupling the transport multiplier lambda with per-atom multipliers
  (alpha_i, gamma_i); no eigenvalue hypothesis is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ambiguity import AmbiguityBall, DiscreteNominal, Ellipsoid, MomentNominal
from .conic import (ConicProgram, Block, LmiBuilder, NonNeg, PSD, SolveReport,
                    SolverSettings, VariableLayout, solve)


class SolverFailure(RuntimeError):
    """A conic solve did not reach an acceptable optimum."""

    def __init__(self, message: str, report: SolveReport | None = None):
        super().__init__(message)
        self.report = report


def solve_or_raise(program: ConicProgram, settings: SolverSettings | None,
                   context: str) -> SolveReport:
    report = solve(program, settings)
    if not report.ok:
        raise SolverFailure(f"{context}: solver returned {report.status} "
                            f"({report.raw_status})", report)
    return report


@dataclass
class Quadratic:
    """xi' P xi + 2 q' xi + c, with P symmetrised on construction."""

    P: np.ndarray
    q: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.P = 0.5 * (P + P.T)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.c = float(self.c)
        if self.P.shape != (self.q.size, self.q.size):
            raise ValueError("P must be n x n with n = len(q)")

    @property
    def dim(self) -> int:
        return self.q.size

    def __call__(self, xi: np.ndarray) -> float:
        xi = np.asarray(xi, dtype=float).ravel()
        return float(xi @ self.P @ xi + 2 * self.q @ xi + self.c)


@dataclass
class WceSolution:
    value: float
    duals: dict
    report: SolveReport


def nominal_expectation(quad: Quadratic, nominal) -> float:
    """Closed-form expectation of the quadratic under the nominal."""
    if isinstance(nominal, MomentNominal):
        return float(np.trace(quad.P @ nominal.Sigma0) + quad(nominal.mu0))
    if isinstance(nominal, DiscreteNominal):
        return float(sum(w * quad(z) for w, z in zip(nominal.weights, nominal.points)))
    raise TypeError(f"unsupported nominal type {type(nominal).__name__}")


def build_moment_dual(quad: Quadratic, nom: MomentNominal, radius: float,
                      settings: SolverSettings | None = None) -> ConicProgram:
    """Dual SDP of the worst-case expectation for a moment nominal on R^n."""
    settings = settings or SolverSettings()
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = quad.dim
    if nom.dim != n:
        raise ValueError("nominal dimension does not match the quadratic")
    eigs = np.linalg.eigvalsh(quad.P)
    if abs(eigs[-1]) <= 1e-12 * max(np.linalg.norm(quad.P), 1.0):
        raise ValueError("the largest eigenvalue of P must be nonzero for this dual")

    layout = VariableLayout()
    g_id = layout.add_scalar("gamma")
    b_id = layout.add_scalar("beta")
    X_grid = layout.add_symmetric("X", n)
    nv = layout.num_vars

    mu0, Sigma0, Lam = nom.mu0, nom.Sigma0, nom.Lambda
    obj = np.zeros(nv)
    obj[g_id] = radius ** 2 - np.trace(Sigma0) - mu0 @ mu0
    obj[b_id] = 1.0
    obj[np.diag(X_grid)] = 1.0

    I_n = np.eye(n)

    second = LmiBuilder(2 * n, nv)
    second.add_symmetric_var(X_grid, 0)
    second.add_term(g_id, n, 0, Lam)
    second.add_term(g_id, n, n, I_n)
    second.add_const(n, n, -quad.P)

    mean = LmiBuilder(n + 1, nv)
    mean.add_term(b_id, 0, 0, [[1.0]])
    mean.add_const(0, 0, [[-quad.c]])
    mean.add_term(g_id, 1, 0, mu0[:, None])
    mean.add_const(1, 0, quad.q[:, None])
    mean.add_term(g_id, 1, 1, I_n)
    mean.add_const(1, 1, -quad.P)

    eps = settings.effective_margin(nominal_expectation(quad, nom))
    strict = LmiBuilder(n, nv)
    strict.add_term(g_id, 0, 0, I_n)
    strict.add_const(0, 0, -quad.P - eps * I_n)

    sign = Block("gamma_nonneg", NonNeg(1),
                 np.eye(1, nv, g_id), np.zeros(1))

    return ConicProgram(
        objective=obj,
        blocks=[
            Block("second_moment", PSD(2 * n), *second.constraint()),
            Block("mean_shift", PSD(n + 1), *mean.constraint()),
            Block("curvature_strict", PSD(n), *strict.constraint()),
            sign,
        ],
        layout=layout,
    )


def wce_moment(quad: Quadratic, nom: MomentNominal, radius: float,
               settings: SolverSettings | None = None) -> WceSolution:
    """Worst-case expectation value and duals for the moment-nominal ball."""
    program = build_moment_dual(quad, nom, radius, settings)
    report = solve_or_raise(program, settings, "worst-case expectation (moment nominal)")
    duals = {name: program.layout.value(name, report.x)
             for name in ("gamma", "beta", "X")}
    return WceSolution(value=report.value, duals=duals, report=report)


def atom_dual_block(lam: float, zeta: np.ndarray, alpha: float, t: float,
                    quad: Quadratic, support: Ellipsoid) -> np.ndarray:
    """The (n+1)-sided dual feasibility matrix attached to one support atom."""
    zeta = np.asarray(zeta, dtype=float).ravel()
    n = zeta.size
    top = lam * float(zeta @ zeta) - quad.c + alpha * support.c2 - t
    off = alpha * support.q2 - lam * zeta - quad.q
    body = lam * np.eye(n) - quad.P + alpha * support.P2
    out = np.empty((n + 1, n + 1))
    out[0, 0] = top
    out[0, 1:] = off
    out[1:, 0] = off
    out[1:, 1:] = body
    return out


def build_discrete_dual(quad: Quadratic, nom: DiscreteNominal, radius: float,
                        settings: SolverSettings | None = None) -> ConicProgram:
    """Dual SDP for a discrete nominal on an ellipsoidal support (one LMI per atom)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if nom.count == 0:
        raise ValueError("discrete nominal has no atoms")
    n = quad.dim
    if nom.dim != n:
        raise ValueError("nominal dimension does not match the quadratic")

    layout = VariableLayout()
    lam_id = layout.add_scalar("lam")
    alpha_ids = layout.add_vector("alpha", nom.count)
    gamma_ids = layout.add_vector("gamma", nom.count)
    nv = layout.num_vars

    obj = np.zeros(nv)
    obj[lam_id] = radius ** 2
    obj[gamma_ids] = nom.weights

    zero_quad = Quadratic(np.zeros((n, n)), np.zeros(n), 0.0)
    zero_supp = Ellipsoid(np.eye(n), np.zeros(n), 0.0)
    coef_alpha = atom_dual_block(0.0, np.zeros(n), 1.0, 0.0, zero_quad, nom.support)
    coef_gamma = -atom_dual_block(0.0, np.zeros(n), 0.0, 1.0, zero_quad, zero_supp)

    blocks = []
    for i in range(nom.count):
        zeta = nom.points[i]
        const = atom_dual_block(0.0, zeta, 0.0, 0.0, quad, zero_supp)
        coef_lam = atom_dual_block(1.0, zeta, 0.0, 0.0, zero_quad, zero_supp)
        lmi = LmiBuilder(n + 1, nv)
        lmi.add_const(0, 0, const)
        lmi.add_term(lam_id, 0, 0, coef_lam)
        lmi.add_term(alpha_ids[i], 0, 0, coef_alpha)
        lmi.add_term(gamma_ids[i], 0, 0, coef_gamma)
        blocks.append(Block(f"atom_{i}", PSD(n + 1), *lmi.constraint()))

    A_sign = np.zeros((1 + nom.count, nv))
    A_sign[0, lam_id] = 1.0
    A_sign[np.arange(1, 1 + nom.count), alpha_ids] = 1.0
    blocks.append(Block("multiplier_nonneg", NonNeg(1 + nom.count),
                        A_sign, np.zeros(1 + nom.count)))

    return ConicProgram(objective=obj, blocks=blocks, layout=layout)


def wce_discrete(quad: Quadratic, nom: DiscreteNominal, radius: float,
                 settings: SolverSettings | None = None) -> WceSolution:
    """Worst-case expectation value and duals for the discrete-nominal ball."""
    program = build_discrete_dual(quad, nom, radius, settings)
    report = solve_or_raise(program, settings, "worst-case expectation (discrete nominal)")
    duals = {name: program.layout.value(name, report.x)
             for name in ("lam", "alpha", "gamma")}
    return WceSolution(value=report.value, duals=duals, report=report)


def wce(quad: Quadratic, ball: AmbiguityBall,
        settings: SolverSettings | None = None) -> WceSolution:
    """Dispatch on the ball's nominal kind."""
    if isinstance(ball.nominal, MomentNominal):
        return wce_moment(quad, ball.nominal, ball.radius, settings)
    if isinstance(ball.nominal, DiscreteNominal):
        return wce_discrete(quad, ball.nominal, ball.radius, settings)
    raise TypeError(f"unsupported nominal type {type(ball.nominal).__name__}")
