"""Worst-case regret controller synthesis as a semidefinite program.

The minimax design problem is solved exactly through its dual SDP.  Two
equivalent formulations are built here:

* ``full``: decision variables (K stacks, g, gamma, beta, X) with three LMIs;
* ``reduced``: g and beta eliminated; their optimal values admit closed forms
  (``recover_affine``) once (K, gamma) are known, so the reduced program has
  the same optimal value with fewer variables.

The K-free formulation and its consensus variant live in
:mod:`drro.elimination` and :mod:`drro.distributed`; :func:`synthesize`
dispatches over all four methods.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ambiguity
from .ambiguity import AmbiguityBall, MomentNominal
from .conic import (Block, ConicProgram, LmiBuilder, NonNeg, PSD, SolverSettings,
                    VariableLayout, min_eig)
from .lift import AffineController, GainStructure, LiftedOperators, structure_factors
from .regret import Benchmark, CostWeights, expected_regret_moments, regret_map
from .worstcase import solve_or_raise


@dataclass
class SynthesisProblem:
    lift: LiftedOperators
    bench: Benchmark
    weights: CostWeights
    ball: AmbiguityBall
    settings: SolverSettings = field(default_factory=SolverSettings)

    def validate(self) -> None:
        self.weights.validate(self.lift)
        if not isinstance(self.ball.nominal, MomentNominal):
            raise ValueError("synthesis requires a moment nominal for the stacked (w; v)")
        n = self.lift.N_x + self.lift.N_y
        if self.ball.nominal.dim != n:
            raise ValueError(f"nominal dimension {self.ball.nominal.dim} must equal "
                             f"N_x + N_y = {n}")
        problems = ambiguity.validate(self.ball)
        if problems:
            raise ValueError("invalid ambiguity ball: " + "; ".join(problems))

    @property
    def joint_dim(self) -> int:
        return self.lift.N_x + self.lift.N_y

    def objective_scale(self) -> float:
        """Nominal expected regret of the zero controller; sets the margin scale."""
        M0 = regret_map(np.zeros((self.lift.N_u, self.lift.N_y)), self.lift, self.bench)
        return expected_regret_moments(M0, np.zeros(self.lift.N_u),
                                       self.ball.nominal.mu0, self.ball.nominal.Sigma0,
                                       self.bench)


@dataclass
class SynthesisResult:
    K: np.ndarray
    g: np.ndarray
    gamma: float
    beta: float
    X: np.ndarray
    value: float
    method: str
    certificate_min_eig: float
    reports: dict
    timings: dict
    reconstruction_gap: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def controller(self) -> AffineController:
        return AffineController(K=self.K, g=self.g)


def assemble_certificate(gamma: float, X: np.ndarray, K: np.ndarray | None,
                         lift: LiftedOperators, bench: Benchmark,
                         nom: MomentNominal) -> np.ndarray:
    """Numeric certificate matrix with block rows (X | gamma-coupling | regret)."""
    n = lift.N_x + lift.N_y
    N_u = lift.N_u
    if K is None:
        K = np.zeros((N_u, lift.N_y))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape != (n, n):
        raise ValueError("X must be (N_x + N_y) square")
    M = regret_map(K, lift, bench)
    Q = np.zeros((2 * n + N_u, 2 * n + N_u))
    Q[:n, :n] = 0.5 * (X + X.T)
    Q[n:2 * n, :n] = gamma * nom.Lambda
    Q[:n, n:2 * n] = gamma * nom.Lambda.T
    Q[n:2 * n, n:2 * n] = gamma * np.eye(n)
    Q[2 * n:, n:2 * n] = M
    Q[n:2 * n, 2 * n:] = M.T
    Q[2 * n:, 2 * n:] = bench.D_inv
    return Q


def _stage_gain_maps(lift: LiftedOperators, structure: GainStructure):
    """Per stage: right factor acting on the stacked (w; v), i.e. [R_i CG | R_i]."""
    return [np.hstack([R @ lift.CG, R]) for R in structure.right]


def _add_regret_terms(lmi: LmiBuilder, row0: int, col0: int, stack_ids, structure,
                      stage_maps, lift, bench) -> None:
    """Add the affine regret block  sum_i L_i K_i [R_i CG | R_i] - [K* | 0]."""
    n = lift.N_x + lift.N_y
    const = np.zeros((lift.N_u, n))
    const[:, :lift.N_x] = -bench.K_star
    lmi.add_const(row0, col0, const)
    for L, W, ids in zip(structure.left, stage_maps, stack_ids):
        for a in range(ids.shape[0]):
            for b in range(ids.shape[1]):
                lmi.add_term(ids[a, b], row0, col0, np.outer(L[:, a], W[b, :]))


def _common_layout(prob: SynthesisProblem, structure: GainStructure,
                   with_affine: bool):
    layout = VariableLayout()
    g_id = layout.add_scalar("gamma")
    b_id = layout.add_scalar("beta") if with_affine else None
    X_grid = layout.add_symmetric("X", prob.joint_dim)
    gvec_ids = layout.add_vector("g", prob.lift.N_u) if with_affine else None
    stack_ids = [layout.add_matrix(f"K_{i+1}", rows, cols)
                 for i, (rows, cols) in enumerate(structure.stack_shapes)]
    return layout, g_id, b_id, X_grid, gvec_ids, stack_ids


def _margin_block(lmi: LmiBuilder, eps: float) -> None:
    lmi.add_const(0, 0, -eps * np.eye(lmi.side))


def _performance_lmi(nv, g_id, stack_ids, structure, stage_maps, prob, eps):
    """Strict block [[gamma I, *], [regret map, D^-1]] - eps I."""
    n, N_u = prob.joint_dim, prob.lift.N_u
    lmi = LmiBuilder(n + N_u, nv)
    lmi.add_term(g_id, 0, 0, np.eye(n))
    _add_regret_terms(lmi, n, 0, stack_ids, structure, stage_maps, prob.lift, prob.bench)
    lmi.add_const(n, n, prob.bench.D_inv)
    _margin_block(lmi, eps)
    return lmi


def _certificate_lmi(nv, g_id, X_grid, stack_ids, structure, stage_maps, prob):
    """The certificate block: rows (X | gamma coupling | regret)."""
    n, N_u = prob.joint_dim, prob.lift.N_u
    nom = prob.ball.nominal
    lmi = LmiBuilder(2 * n + N_u, nv)
    lmi.add_symmetric_var(X_grid, 0)
    lmi.add_term(g_id, n, 0, nom.Lambda)
    lmi.add_term(g_id, n, n, np.eye(n))
    _add_regret_terms(lmi, 2 * n, n, stack_ids, structure, stage_maps, prob.lift, prob.bench)
    lmi.add_const(2 * n, 2 * n, prob.bench.D_inv)
    return lmi


def _gamma_nonneg(nv: int, g_id: int) -> Block:
    A = np.zeros((1, nv))
    A[0, g_id] = 1.0
    return Block("gamma_nonneg", NonNeg(1), A, np.zeros(1))


def build_full_program(prob: SynthesisProblem,
                       structure: GainStructure | None = None) -> ConicProgram:
    """Synthesis SDP over (K, g, gamma, beta, X) with all three LMIs."""
    prob.validate()
    structure = structure or structure_factors(prob.lift.sys)
    stage_maps = _stage_gain_maps(prob.lift, structure)
    layout, g_id, b_id, X_grid, gvec_ids, stack_ids = _common_layout(prob, structure, True)
    nv = layout.num_vars
    nom, r = prob.ball.nominal, prob.ball.radius
    n, N_u = prob.joint_dim, prob.lift.N_u

    obj = np.zeros(nv)
    obj[g_id] = r ** 2 - np.trace(nom.Sigma0) - nom.mu0 @ nom.mu0
    obj[b_id] = 1.0
    obj[np.diag(X_grid)] = 1.0

    eps = prob.settings.effective_margin(prob.objective_scale())
    perf = _performance_lmi(nv, g_id, stack_ids, structure, stage_maps, prob, eps)
    cert = _certificate_lmi(nv, g_id, X_grid, stack_ids, structure, stage_maps, prob)

    affine = LmiBuilder(1 + n + N_u, nv)
    affine.add_term(b_id, 0, 0, [[1.0]])
    affine.add_term(g_id, 1, 0, nom.mu0[:, None])
    affine.add_term(g_id, 1, 1, np.eye(n))
    for k in range(N_u):
        affine.add_term(gvec_ids[k], 1 + n + k, 0, [[-1.0]])
    _add_regret_terms(affine, 1 + n, 1, stack_ids, structure, stage_maps,
                      prob.lift, prob.bench)
    affine.add_const(1 + n, 1 + n, prob.bench.D_inv)

    return ConicProgram(
        objective=obj,
        blocks=[
            Block("performance_strict", PSD(n + N_u), *perf.constraint()),
            Block("certificate", PSD(2 * n + N_u), *cert.constraint()),
            Block("affine", PSD(1 + n + N_u), *affine.constraint()),
            _gamma_nonneg(nv, g_id),
        ],
        layout=layout,
    )


def build_reduced_program(prob: SynthesisProblem,
                          structure: GainStructure | None = None) -> ConicProgram:
    """Synthesis SDP with g and beta eliminated (same optimal value as full)."""
    prob.validate()
    structure = structure or structure_factors(prob.lift.sys)
    stage_maps = _stage_gain_maps(prob.lift, structure)
    layout, g_id, _, X_grid, _, stack_ids = _common_layout(prob, structure, False)
    nv = layout.num_vars
    nom, r = prob.ball.nominal, prob.ball.radius

    obj = np.zeros(nv)
    obj[g_id] = r ** 2 - np.trace(nom.Sigma0)
    obj[np.diag(X_grid)] = 1.0

    eps = prob.settings.effective_margin(prob.objective_scale())
    perf = _performance_lmi(nv, g_id, stack_ids, structure, stage_maps, prob, eps)
    cert = _certificate_lmi(nv, g_id, X_grid, stack_ids, structure, stage_maps, prob)

    return ConicProgram(
        objective=obj,
        blocks=[
            Block("performance_strict", PSD(prob.joint_dim + prob.lift.N_u),
                  *perf.constraint()),
            Block("certificate", PSD(2 * prob.joint_dim + prob.lift.N_u),
                  *cert.constraint()),
            _gamma_nonneg(nv, g_id),
        ],
        layout=layout,
    )


def recover_affine(K: np.ndarray, gamma: float, mu0: np.ndarray,
                   lift: LiftedOperators, bench: Benchmark):
    """Optimal affine term and its multiplier for a fixed gain.

    g = -[K C G - K* | K] mu0 makes the affine LMI hold whenever the
    performance LMI does, and beta = gamma ||mu0||^2 attains the bound, so
    substituting them never changes the optimal value.
    """
    mu0 = np.asarray(mu0, dtype=float).ravel()
    g = -regret_map(K, lift, bench) @ mu0
    beta = float(gamma) * float(mu0 @ mu0)
    return g, beta


def _extract_gain(program: ConicProgram, x: np.ndarray,
                  structure: GainStructure) -> np.ndarray:
    stacks = [program.layout.value(f"K_{i+1}", x) for i in range(structure.T)]
    return structure.assemble(stacks)


def synthesize(prob: SynthesisProblem, method: str = "reduced",
               distributed_opts: dict | None = None) -> SynthesisResult:
    """Solve the design problem by one of the four equivalent routes."""
    prob.validate()
    structure = structure_factors(prob.lift.sys)
    nom = prob.ball.nominal
    timings: dict[str, float] = {}
    reports: dict[str, object] = {}
    extras: dict[str, object] = {}

    if method in ("full", "reduced"):
        t0 = time.perf_counter()
        build = build_full_program if method == "full" else build_reduced_program
        program = build(prob, structure)
        timings["build"] = time.perf_counter() - t0
        report = solve_or_raise(program, prob.settings, f"synthesis ({method})")
        timings["solve"] = report.wall_time
        reports["main"] = report
        gamma = program.layout.value("gamma", report.x)
        X = program.layout.value("X", report.x)
        K = _extract_gain(program, report.x, structure)
        if method == "full":
            g = program.layout.value("g", report.x)
            beta = program.layout.value("beta", report.x)
        else:
            g, beta = recover_affine(K, gamma, nom.mu0, prob.lift, prob.bench)
        value = report.value
    elif method == "eliminated":
        from .elimination import build_elimination_data, build_eliminated_program, \
            reconstruct_gains
        t0 = time.perf_counter()
        data = build_elimination_data(prob.lift, structure)
        program = build_eliminated_program(prob, data)
        timings["build"] = time.perf_counter() - t0
        report = solve_or_raise(program, prob.settings, "synthesis (eliminated)")
        timings["solve"] = report.wall_time
        reports["main"] = report
        gamma = program.layout.value("gamma", report.x)
        X = program.layout.value("X", report.x)
        t0 = time.perf_counter()
        K, recon_diag = reconstruct_gains(gamma, X, data, prob, structure)
        timings["reconstruct"] = time.perf_counter() - t0
        extras["reconstruction"] = recon_diag
        g, beta = recover_affine(K, gamma, nom.mu0, prob.lift, prob.bench)
        value = report.value
    elif method == "distributed":
        from .distributed import consensus_solve, polish_to_feasibility
        from .elimination import build_elimination_data, reconstruct_gains
        t0 = time.perf_counter()
        data = build_elimination_data(prob.lift, structure)
        timings["build"] = time.perf_counter() - t0
        opts = dict(distributed_opts or {})
        t0 = time.perf_counter()
        gamma, X, state = consensus_solve(prob, data, **opts)
        timings["solve"] = time.perf_counter() - t0
        extras["consensus"] = state
        reports["main"] = state.last_report
        t0 = time.perf_counter()
        if min(state.block_min_eigs) < 0:
            # reconstruction needs the average strictly inside every block
            gamma, X, polish_iters = polish_to_feasibility(
                prob, data, gamma, X, workers=opts.get("workers"))
            extras["polish_iterations"] = polish_iters
        K, recon_diag = reconstruct_gains(gamma, X, data, prob, structure)
        timings["reconstruct"] = time.perf_counter() - t0
        extras["reconstruction"] = recon_diag
        g, beta = recover_affine(K, gamma, nom.mu0, prob.lift, prob.bench)
        nom_ball = prob.ball.nominal
        value = float((prob.ball.radius ** 2 - np.trace(nom_ball.Sigma0)) * gamma
                      + np.trace(X))
    else:
        raise ValueError(f"unknown method {method!r}")

    Q = assemble_certificate(gamma, X, K, prob.lift, prob.bench, nom)
    cert_eig = min_eig(Q)
    return SynthesisResult(
        K=K, g=np.asarray(g, dtype=float), gamma=float(gamma), beta=float(beta),
        X=X, value=float(value), method=method, certificate_min_eig=cert_eig,
        reports=reports, timings=timings, extras=extras,
    )
