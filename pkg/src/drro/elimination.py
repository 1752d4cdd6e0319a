"""Gain-free synthesis SDP and sequential gain reconstruction.

The structured gain enters the certificate LMI through per-stage terms
Lbar_i' K_i Rbar_i + (transpose).  Restricting the LMI to the kernels of
these maps removes K entirely: the program below optimises (gamma, X) only,
subject to one kernel-restricted certificate block per stage boundary.  The
gain is then rebuilt stage by stage, last stage first, each step solving a
small margin-maximising LMI whose solvability is exactly the corresponding
restricted block of the solved program.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import (Block, ConicProgram, LmiBuilder, NonNeg, PSD, SolverSettings,
                    VariableLayout, min_eig)
from .lift import GainStructure, LiftedOperators
from .synthesis import SynthesisProblem, assemble_certificate
from .worstcase import solve_or_raise


def kernel_basis(M: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Orthonormal basis of ker(M) as columns; identity for a 0-row or zero map.

    Rank is decided by singular values >= tol * sigma_max, with
    tol = max(rows, cols) * machine epsilon * 64 unless overridden; the
    matrices this package feeds in are exact 0/1/product compositions, so a
    generous cut avoids spurious rank.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rows, cols = M.shape
    if rows == 0:
        return np.eye(cols)
    if tol is None:
        tol = max(rows, cols) * np.finfo(float).eps * 64
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    smax = s[0] if s.size else 0.0
    if smax == 0.0:
        return np.eye(cols)
    rank = int(np.sum(s >= tol * smax))
    return Vt[rank:].T


@dataclass
class EliminationData:
    """Stage maps, kernel bases, and the bookkeeping used by reconstruction.

    R_maps[i-1] and L_maps[i-1] are the stage-i maps (i = 1..T); the zero
    boundary maps are implicit.  bases[i-1] spans ker of the first i-1 R
    maps intersected with ker(L_maps[i-1]) (the last entry drops the L part),
    and anchors[i-1] spans ker of the first i-1 R maps alone (identity for
    i = 1).
    """

    R_maps: list[np.ndarray]
    L_maps: list[np.ndarray]
    bases: list[np.ndarray]      # length T+1
    anchors: list[np.ndarray]    # length T+1
    side: int
    rank_report: list[dict] = field(default_factory=list)


def _structured_kernel(stack: np.ndarray, lead: int) -> np.ndarray:
    """Kernel basis of a map whose first `lead` columns are exactly zero.

    The leading coordinates are kept as explicit identity columns, so the
    restricted certificate blocks stay sparse in the matrix variable.
    """
    m = stack.shape[1]
    if stack.shape[0] == 0:
        return np.eye(m)
    if np.any(stack[:, :lead]):
        return kernel_basis(stack)
    sub = kernel_basis(stack[:, lead:])
    B = np.zeros((m, lead + sub.shape[1]))
    B[:lead, :lead] = np.eye(lead)
    B[lead:, lead:] = sub
    return B


def build_elimination_data(lift: LiftedOperators, structure: GainStructure,
                           check_tol: float = 1e-10) -> EliminationData:
    """Assemble the stage maps and all kernel bases, verifying their algebra."""
    n = lift.N_x + lift.N_y
    m = 2 * n + lift.N_u
    T = structure.T

    mid = np.zeros((lift.N_y, m))
    mid[:, n:n + lift.N_x] = lift.CG
    mid[:, n + lift.N_x:2 * n] = np.eye(lift.N_y)
    tail = np.zeros((lift.N_u, m))
    tail[:, 2 * n:] = np.eye(lift.N_u)

    R_maps = [R @ mid for R in structure.right]
    L_maps = [L.T @ tail for L in structure.left]

    anchors, bases, report = [], [], []
    for i in range(1, T + 2):
        stack_R = np.vstack(R_maps[:i - 1]) if i > 1 else np.zeros((0, m))
        anchor = np.eye(m) if i == 1 else _structured_kernel(stack_R, n)
        anchors.append(anchor)
        stack = np.vstack([stack_R, L_maps[i - 1]]) if i <= T else stack_R
        basis = _structured_kernel(stack, n)
        bases.append(basis)
        entry = {"stage": i, "basis_cols": basis.shape[1],
                 "anchor_cols": anchor.shape[1]}
        if stack.shape[0]:
            # record the singular-value gap behind the rank decision
            s = np.linalg.svd(stack, compute_uv=False)
            rank = stack.shape[1] - basis.shape[1]
            entry["smallest_kept_sv"] = float(s[rank - 1]) if rank else None
            entry["largest_cut_sv"] = float(s[rank]) if rank < s.size else 0.0
        report.append(entry)

    data = EliminationData(R_maps=R_maps, L_maps=L_maps, bases=bases,
                           anchors=anchors, side=m, rank_report=report)
    _check_data(data, check_tol)
    return data


def _check_data(data: EliminationData, tol: float) -> None:
    T = len(data.R_maps)
    for i, B in enumerate(data.bases, start=1):
        if np.linalg.norm(B.T @ B - np.eye(B.shape[1])) > tol * (1 + B.shape[1]):
            raise ValueError(f"basis {i} is not orthonormal")
        if i <= T:
            L = data.L_maps[i - 1]
            if np.linalg.norm(L @ B) > tol * max(np.linalg.norm(L), 1.0):
                raise ValueError(f"basis {i} does not annihilate its stage map")
        for j in range(i - 1):
            R = data.R_maps[j]
            if np.linalg.norm(R @ B) > tol * max(np.linalg.norm(R), 1.0):
                raise ValueError(f"basis {i} does not annihilate stage map {j + 1}")
    # the stage maps' kernels must be nested for backward reconstruction
    for j in range(T - 1):
        ker_j = kernel_basis(data.L_maps[j])
        resid = np.linalg.norm(data.L_maps[j + 1] @ ker_j)
        if resid > tol * max(np.linalg.norm(data.L_maps[j + 1]), 1.0):
            raise ValueError(f"stage map kernels are not nested at stage {j + 1}")


def add_restricted_certificate(lmi: LmiBuilder, basis: np.ndarray, gamma_id: int,
                               X_grid: np.ndarray, Q_const: np.ndarray,
                               Q_gamma: np.ndarray, joint_dim: int,
                               eps: float) -> None:
    """Fill an LmiBuilder with  basis' Q(gamma, X, 0) basis - eps I."""
    c = basis.shape[1]
    lmi.add_const(0, 0, basis.T @ Q_const @ basis - eps * np.eye(c))
    lmi.add_term(gamma_id, 0, 0, basis.T @ Q_gamma @ basis)
    P1 = basis[:joint_dim, :]
    rows, cols = np.triu_indices(joint_dim)
    for a, b in zip(rows, cols):
        coef = np.outer(P1[a], P1[b])
        if a != b:
            coef = coef + coef.T
        lmi.add_term(X_grid[a, b], 0, 0, coef)


def certificate_parts(prob: SynthesisProblem):
    """Constant and gamma-direction parts of the gain-free certificate matrix."""
    n = prob.joint_dim
    Z = np.zeros((n, n))
    Q_const = assemble_certificate(0.0, Z, None, prob.lift, prob.bench, prob.ball.nominal)
    Q_gamma = assemble_certificate(1.0, Z, None, prob.lift, prob.bench,
                                   prob.ball.nominal) - Q_const
    return Q_const, Q_gamma


def build_eliminated_program(prob: SynthesisProblem,
                             data: EliminationData) -> ConicProgram:
    """The gain-free SDP: minimise over (gamma, X) with one restricted block per stage."""
    prob.validate()
    n = prob.joint_dim
    nom, r = prob.ball.nominal, prob.ball.radius

    layout = VariableLayout()
    g_id = layout.add_scalar("gamma")
    X_grid = layout.add_symmetric("X", n)
    nv = layout.num_vars

    obj = np.zeros(nv)
    obj[g_id] = r ** 2 - np.trace(nom.Sigma0)
    obj[np.diag(X_grid)] = 1.0

    Q_const, Q_gamma = certificate_parts(prob)
    eps = prob.settings.effective_margin(prob.objective_scale())

    blocks = []
    for i, basis in enumerate(data.bases, start=1):
        lmi = LmiBuilder(basis.shape[1], nv)
        add_restricted_certificate(lmi, basis, g_id, X_grid, Q_const, Q_gamma, n, eps)
        blocks.append(Block(f"restricted_{i}", PSD(basis.shape[1]), *lmi.constraint()))

    A = np.zeros((1, nv))
    A[0, g_id] = 1.0
    blocks.append(Block("gamma_nonneg", NonNeg(1), A, np.zeros(1)))

    return ConicProgram(objective=obj, blocks=blocks, layout=layout)


class ProjectionInfeasible(RuntimeError):
    """A kernel condition of the projection solve fails."""

    def __init__(self, side: str, eig: float, stage: int | None = None):
        self.side = side
        self.eig = eig
        self.stage = stage
        where = f" at stage {stage}" if stage is not None else ""
        if side == "margin":
            detail = f"attainable margin {eig:.3e} is below the required floor"
        else:
            detail = f"{side} kernel condition has min eigenvalue {eig:.3e}"
        super().__init__(f"projection LMI infeasible{where}: {detail}")


def solve_projection_lmi(U: np.ndarray, V: np.ndarray, P: np.ndarray,
                         settings: SolverSettings | None = None,
                         floor: float | None = None):
    """Find Y with U' Y V + V' Y' U + P >= t I, maximising the margin t.

    Solvability is checked first through the two kernel conditions; the SDP
    then maximises t subject to t >= floor, a cap keeping t bounded when both
    kernels are trivial, and a weakly penalised spectral bound on Y that keeps
    the solution set compact.  Returns (Y, t, diagnostics).
    """
    settings = settings or SolverSettings()
    if floor is None:
        floor = settings.strictness_margin
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    nn = P.shape[0]
    if U.shape[1] != nn or V.shape[1] != nn:
        raise ValueError("U and V must have as many columns as P")

    U_perp = kernel_basis(U)
    V_perp = kernel_basis(V)
    eig_u = min_eig(U_perp.T @ P @ U_perp)
    eig_v = min_eig(V_perp.T @ P @ V_perp)
    if eig_u <= 0:
        raise ProjectionInfeasible("left", eig_u)
    if eig_v <= 0:
        raise ProjectionInfeasible("right", eig_v)

    mU, kV = U.shape[0], V.shape[0]
    p_norm = float(np.linalg.norm(P, 2))

    layout = VariableLayout()
    Y_ids = layout.add_matrix("Y", mU, kV)
    t_id = layout.add_scalar("t")
    nu_id = layout.add_scalar("nu")
    nv = layout.num_vars

    obj = np.zeros(nv)
    obj[t_id] = -1.0
    obj[nu_id] = 1e-6           # keeps Y bounded without disturbing the margin

    main = LmiBuilder(nn, nv)
    main.add_const(0, 0, P)
    main.add_term(t_id, 0, 0, -np.eye(nn))
    for a in range(mU):
        for b in range(kV):
            coef = np.outer(U[a], V[b])
            main.add_term(Y_ids[a, b], 0, 0, coef + coef.T)

    bound = LmiBuilder(mU + kV, nv)
    bound.add_term(nu_id, 0, 0, np.eye(mU + kV))
    for a in range(mU):
        for b in range(kV):
            bound.add_term(Y_ids[a, b], a, mU + b, [[1.0]])

    blocks = [Block("margin", PSD(nn), *main.constraint()),
              Block("gain_bound", PSD(mU + kV), *bound.constraint())]
    if U_perp.shape[1] == 0 and V_perp.shape[1] == 0:
        # only then is t unbounded above (otherwise the restriction of the
        # LMI to either kernel caps it at the kernel eigenvalues)
        A_cap = np.zeros((1, nv))
        A_cap[0, t_id] = -1.0
        blocks.append(Block("margin_cap", NonNeg(1), A_cap,
                            np.array([1.0 + 2.0 * p_norm])))

    program = ConicProgram(objective=obj, blocks=blocks, layout=layout)
    report = solve_or_raise(program, settings, "projection LMI")
    Y = np.atleast_2d(layout.value("Y", report.x))
    t = layout.value("t", report.x)
    if t < floor:
        raise ProjectionInfeasible("margin", float(t))
    achieved = min_eig(U.T @ Y @ V + V.T @ Y.T @ U + P)
    diag = {"margin": float(t), "achieved_min_eig": float(achieved),
            "kernel_eigs": (float(eig_u), float(eig_v)), "report": report}
    return Y, float(t), diag


def reconstruct_gains(gamma: float, X: np.ndarray, data: EliminationData,
                      prob: SynthesisProblem, structure: GainStructure):
    """Rebuild the structured gain from a solved gain-free program.

    Works backwards over the stages: at stage i the running certificate
    matrix, restricted to the kernel of all earlier-stage R maps, must be
    rendered positive definite by the stage-i block; solvability of each step
    is inherited from the restricted blocks of the solved program.  Returns
    (K, diagnostics); a precondition failure surfaces the stage index.
    """
    T = structure.T
    S = assemble_certificate(gamma, X, None, prob.lift, prob.bench, prob.ball.nominal)
    stacks: list[np.ndarray | None] = [None] * T
    steps = []
    for i in range(T, 0, -1):
        anchor = data.anchors[i - 1]
        U = data.L_maps[i - 1] @ anchor
        V = data.R_maps[i - 1] @ anchor
        P = anchor.T @ S @ anchor
        P = 0.5 * (P + P.T)
        try:
            # the margin is maximised anyway; any strictly positive margin
            # keeps the final certificate inside its tolerance
            Y, t, diag = solve_projection_lmi(U, V, P, prob.settings, floor=0.0)
        except ProjectionInfeasible as exc:
            raise ProjectionInfeasible(exc.side, exc.eig, stage=i) from exc
        stacks[i - 1] = Y
        W = data.L_maps[i - 1].T @ Y @ data.R_maps[i - 1]
        S = S + W + W.T
        steps.append({"stage": i, "margin": diag["margin"],
                      "achieved_min_eig": diag["achieved_min_eig"]})
    K = structure.assemble(stacks)
    final_eig = min_eig(S)
    diagnostics = {"steps": steps, "certificate_min_eig": float(final_eig)}
    return K, diagnostics
