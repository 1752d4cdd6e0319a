"""Consensus splitting of the gain-free synthesis SDP.

Each restricted certificate block becomes one agent holding a local copy of
(gamma, X).  Agents repeatedly solve a proximally-penalised local SDP in
parallel-safe isolation, the copies are averaged, and scaled dual variables
drive the copies to agreement (ADMM form, residual-balanced penalty).  The
loop terminates once both residuals are below tolerance; the per-block
feasibility margins of the average are tracked throughout, since a feasible
average certifies its objective value as an upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import (Block, ConicProgram, LmiBuilder, NonNeg, PSD, SQRT2,
                    VariableLayout, min_eig, packed_length, svec_pack, svec_unpack)
from .elimination import EliminationData, add_restricted_certificate, certificate_parts
from .synthesis import SynthesisProblem
from .worstcase import solve_or_raise


@dataclass
class ConsensusState:
    gamma: float
    X: np.ndarray
    value: float
    iterations: int
    converged: bool
    rho: float
    locals_gamma: np.ndarray
    locals_X: list[np.ndarray]
    duals: np.ndarray
    primal_residuals: list[float] = field(default_factory=list)
    dual_residuals: list[float] = field(default_factory=list)
    rho_history: list[float] = field(default_factory=list)
    value_history: list[float] = field(default_factory=list)
    block_min_eigs: list[float] = field(default_factory=list)
    last_report: object = None


class _Agent:
    """One restricted block plus its share of the objective; rebuilds cheaply.

    Everything except the prox anchor and the penalty weight is assembled
    once; per iteration only the prox offsets and the objective coefficients
    change.
    """

    def __init__(self, index: int, prob: SynthesisProblem, data: EliminationData,
                 Q_const: np.ndarray, Q_gamma: np.ndarray, eps: float):
        n = prob.joint_dim
        self.n = n
        self.dim = 1 + packed_length(n)
        self.share = 1.0 / len(data.bases)

        layout = VariableLayout()
        self.g_id = layout.add_scalar("gamma")
        self.X_grid = layout.add_symmetric("X", n)
        self.s_ids = layout.add_vector("s", self.dim)
        self.layout = layout
        nv = layout.num_vars

        basis = data.bases[index]
        cert = LmiBuilder(basis.shape[1], nv)
        add_restricted_certificate(cert, basis, self.g_id, self.X_grid,
                                   Q_const, Q_gamma, n, eps)
        self.cert_block = Block(f"restricted_{index + 1}", PSD(basis.shape[1]),
                                *cert.constraint())

        # z = (gamma, svec(X)); per coordinate a 2x2 block certifies
        # s_k >= (z_k - anchor_k)^2
        rows, cols = np.triu_indices(n)
        tri_ids = self.X_grid[rows, cols]
        self.z_ids = np.concatenate([[self.g_id], tri_ids])
        self.z_scale = np.concatenate([[1.0], np.where(rows == cols, 1.0, SQRT2)])

        A = np.zeros((3 * self.dim, nv))
        b = np.zeros(3 * self.dim)
        k = np.arange(self.dim)
        A[3 * k, self.s_ids] = 1.0
        A[3 * k + 1, self.z_ids] = SQRT2 * self.z_scale
        b[3 * k + 2] = 1.0
        self._prox_A = A
        self._prox_b = b
        self._anchor_rows = 3 * k + 1

        A_sign = np.zeros((1, nv))
        A_sign[0, self.g_id] = 1.0
        self.sign_block = Block("gamma_nonneg", NonNeg(1), A_sign, np.zeros(1))

        obj = np.zeros(nv)
        obj[self.g_id] = self.share * (prob.ball.radius ** 2
                                       - np.trace(prob.ball.nominal.Sigma0))
        obj[np.diag(self.X_grid)] = self.share
        self._obj_base = obj

    def program(self, rho: float, anchor: np.ndarray,
                objective_weight: float = 1.0) -> ConicProgram:
        obj = objective_weight * self._obj_base
        blocks = [self.cert_block, self.sign_block]
        if rho > 0:
            obj[self.s_ids] = 0.5 * rho
            b = self._prox_b.copy()
            b[self._anchor_rows] = -SQRT2 * anchor
            blocks = blocks + [Block(f"prox_{k}", PSD(2),
                                     self._prox_A[3 * k:3 * k + 3],
                                     b[3 * k:3 * k + 3])
                               for k in range(self.dim)]
        return ConicProgram(objective=obj, blocks=blocks, layout=self.layout)

    def solve(self, rho, anchor, settings, objective_weight=1.0):
        report = solve_or_raise(self.program(rho, anchor, objective_weight),
                                settings, "consensus local step")
        gamma = self.layout.value("gamma", report.x)
        X = self.layout.value("X", report.x)
        return np.concatenate([[gamma], svec_pack(X)]), report


def _local_settings(settings) -> "SolverSettings":
    """Inner tolerances for the prox steps; the consensus loop certifies the
    average itself, so sub-problem accuracy only needs to beat the consensus
    tolerance by a margin."""
    from .conic import SolverSettings
    # the gap drives how far each prox step actually moves (loose gaps stall
    # the loop before the consensus tolerance); the feasibility tolerance
    # only needs headroom for the absolute slack checks on tiny epigraph
    # blocks, whose violations are harmless to the outer loop
    return SolverSettings(
        feas_tol=max(1e-5, settings.feas_tol),
        rel_gap_tol=max(1e-7, settings.rel_gap_tol),
        max_iterations=settings.max_iterations,
        strictness_margin=settings.strictness_margin,
    )


_WORKER_STATE: dict = {}


def _worker_init(agents, settings):
    _WORKER_STATE["agents"] = agents
    _WORKER_STATE["settings"] = settings


def _worker_solve(index, rho, anchor, objective_weight):
    agent = _WORKER_STATE["agents"][index]
    return agent.solve(rho, anchor, _WORKER_STATE["settings"], objective_weight)


class _WorkerPool:
    """Runs one iteration's local solves, in-process or in spawned workers.

    Results are gathered in agent order either way, so the outcome does not
    depend on scheduling.
    """

    def __init__(self, agents, settings, workers):
        self.agents = agents
        self.settings = settings
        self._pool = None
        count = 1 if workers is None else max(1, min(int(workers), len(agents)))
        if count > 1:
            import multiprocessing as mp
            # spawn, not fork: the conic backend holds global native state
            # that is not fork-safe once the parent has solved anything
            ctx = mp.get_context("spawn")
            self._pool = ctx.Pool(count, initializer=_worker_init,
                                  initargs=(agents, settings))

    def solve_all(self, rho, anchors, objective_weight=1.0):
        if self._pool is None:
            results = [agent.solve(rho, anchors[i], self.settings, objective_weight)
                       for i, agent in enumerate(self.agents)]
        else:
            results = self._pool.starmap(
                _worker_solve,
                [(i, rho, anchors[i], objective_weight)
                 for i in range(len(self.agents))])
        zs = np.stack([z for z, _ in results])
        return zs, results[-1][1]

    def close(self):
        if self._pool is not None:
            self._pool.terminate()
            self._pool.join()


def build_local_problem(index: int, prob: SynthesisProblem, data: EliminationData,
                        rho: float, anchor: np.ndarray) -> ConicProgram:
    """Standalone builder for one agent's proximal sub-problem."""
    Q_const, Q_gamma = certificate_parts(prob)
    eps = prob.settings.effective_margin(prob.objective_scale())
    agent = _Agent(index, prob, data, Q_const, Q_gamma, eps)
    anchor = np.zeros(agent.dim) if anchor is None else np.asarray(anchor, float)
    return agent.program(rho, anchor)


def _average_feasible(z_bar, data, Q_const, Q_gamma, n):
    gamma = z_bar[0]
    X = svec_unpack(z_bar[1:])
    Q = Q_const + gamma * Q_gamma
    Q[:n, :n] += X
    eigs = [min_eig(B.T @ Q @ B) for B in data.bases]
    return (gamma >= 0 and min(eigs) >= 0), eigs


def consensus_solve(prob: SynthesisProblem, data: EliminationData,
                    rho: float = 1.0, consensus_tol: float = 1e-5,
                    max_iter: int = 500, relaxation: float = 1.0,
                    workers: int | None = None):
    """Consensus ADMM over the gain-free program; returns (gamma, X, state).

    Residuals are scaled by (1 + ||average||); the penalty is rebalanced by
    a factor of 2 whenever one residual dominates the other tenfold, and the
    averaging step can be over-relaxed.  Local solves run in parallel worker
    processes when workers > 1; the reduction is in fixed agent order, so the
    result does not depend on scheduling.  On hitting max_iter the final
    average is returned with converged=False and its per-block feasibility
    margins recorded.
    """
    prob.validate()
    if rho <= 0:
        raise ValueError("rho must be positive")
    n = prob.joint_dim
    Q_const, Q_gamma = certificate_parts(prob)
    eps = prob.settings.effective_margin(prob.objective_scale())
    agents = [_Agent(i, prob, data, Q_const, Q_gamma, eps)
              for i in range(len(data.bases))]
    n_agents = len(agents)
    dim = agents[0].dim
    c_gamma = prob.ball.radius ** 2 - np.trace(prob.ball.nominal.Sigma0)

    inner = _local_settings(prob.settings)
    z_bar = np.zeros(dim)
    duals = np.zeros((n_agents, dim))
    state = ConsensusState(gamma=0.0, X=np.zeros((n, n)), value=np.inf,
                           iterations=0, converged=False, rho=rho,
                           locals_gamma=np.zeros(n_agents),
                           locals_X=[], duals=duals)

    pool = _WorkerPool(agents, inner, workers)
    try:
        for it in range(1, max_iter + 1):
            zs, report = pool.solve_all(rho, z_bar - duals)
            state.last_report = report
            z_prev = z_bar
            relaxed = relaxation * zs + (1.0 - relaxation) * z_bar
            z_bar = (relaxed + duals).mean(axis=0)
            duals = duals + relaxed - z_bar

            scale = 1.0 + np.linalg.norm(z_bar)
            primal = float(np.linalg.norm(zs - z_bar, axis=1).max()) / scale
            dual = rho * np.sqrt(n_agents) * float(np.linalg.norm(z_bar - z_prev)) / scale
            value = float(c_gamma * z_bar[0] + np.trace(svec_unpack(z_bar[1:])))
            eigs = _average_feasible(z_bar, data, Q_const, Q_gamma, n)[1]

            state.primal_residuals.append(primal)
            state.dual_residuals.append(dual)
            state.rho_history.append(rho)
            state.value_history.append(value)
            state.iterations = it

            if primal <= consensus_tol and dual <= consensus_tol:
                state.converged = True
                break

            if primal > 10 * dual and it > 1:
                rho *= 2.0
                duals /= 2.0
            elif dual > 10 * primal and it > 1:
                rho /= 2.0
                duals *= 2.0
    finally:
        pool.close()

    state.gamma = float(z_bar[0])
    state.X = svec_unpack(z_bar[1:])
    state.value = value
    state.rho = rho
    state.locals_gamma = zs[:, 0].copy()
    state.locals_X = [svec_unpack(z[1:]) for z in zs]
    state.duals = duals
    state.block_min_eigs = [float(e) for e in eigs]
    return state.gamma, state.X, state


def polish_to_feasibility(prob: SynthesisProblem, data: EliminationData,
                          gamma: float, X: np.ndarray, rho: float = 1.0,
                          max_iter: int = 100, workers: int | None = None):
    """Drive a consensus average into the intersection of the block sets.

    Runs objective-free projection consensus (each agent projects onto its
    own constraint set) from the given point; the iterates converge to a
    nearby point satisfying every block with the design margin, which is what
    gain reconstruction needs.  Returns (gamma, X, iterations).
    """
    n = prob.joint_dim
    Q_const, Q_gamma = certificate_parts(prob)
    eps = prob.settings.effective_margin(prob.objective_scale())
    agents = [_Agent(i, prob, data, Q_const, Q_gamma, eps)
              for i in range(len(data.bases))]
    inner = _local_settings(prob.settings)
    z_bar = np.concatenate([[float(gamma)], svec_pack(np.asarray(X, dtype=float))])
    duals = np.zeros((len(agents), z_bar.size))

    pool = _WorkerPool(agents, inner, workers)
    it = 0
    try:
        while it < max_iter:
            feasible, _ = _average_feasible(z_bar, data, Q_const, Q_gamma, n)
            if feasible:
                break
            it += 1
            zs, _ = pool.solve_all(rho, z_bar - duals, objective_weight=0.0)
            z_bar = (zs + duals).mean(axis=0)
            duals = duals + zs - z_bar
    finally:
        pool.close()
    return float(z_bar[0]), svec_unpack(z_bar[1:]), it
