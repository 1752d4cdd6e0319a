"""Standard-form conic programs (nonnegative and PSD blocks) and the solver bridge.

Every optimisation problem in this package is emitted as a :class:`ConicProgram`:
a linear objective over a flat variable vector, plus an ordered list of cone
blocks, each with an affine map from the variables to the block's slack.  A PSD
block's slack is a packed symmetric matrix (see :func:`svec_pack`); the slack
must lie in the cone.  Solving is delegated to Clarabel, an interior-point
conic solver; the bridge below is the only place that talks to it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

SQRT2 = float(np.sqrt(2.0))


def packed_length(n: int) -> int:
    """Length of the packed representation of a symmetric n x n matrix."""
    return n * (n + 1) // 2


def side_of_packed(m: int) -> int:
    """Inverse of packed_length; raises if m is not a triangular number."""
    n = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if packed_length(n) != m:
        raise ValueError(f"packed length {m} is not a triangular number")
    return n


@lru_cache(maxsize=None)
def _pack_indices(n):
    # triu visited row-major reads a symmetric matrix in the same value order
    # as the lower triangle visited column-major
    rows, cols = np.triu_indices(n)
    scale = np.where(rows == cols, 1.0, SQRT2)
    return rows, cols, scale


@lru_cache(maxsize=None)
def _entry_positions(n):
    """(n, n) grid: position of entry (i, j) in the packed vector."""
    rows, cols, _ = _pack_indices(n)
    pos = np.empty((n, n), dtype=np.intp)
    k = np.arange(len(rows))
    pos[rows, cols] = k
    pos[cols, rows] = k
    return pos


def svec_pack(S: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Pack a symmetric matrix: lower triangle, column-major, off-diagonals * sqrt(2).

    The scaling preserves inner products: <svec(A), svec(B)> = trace(A B).
    Asymmetry up to rtol * ||S|| is symmetrised away; worse is an error.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    nrm = np.linalg.norm(S)
    if np.linalg.norm(S - S.T) > rtol * max(nrm, 1.0) and nrm > 0:
        raise ValueError("matrix is not symmetric within tolerance")
    S = 0.5 * (S + S.T)
    rows, cols, scale = _pack_indices(S.shape[0])
    return S[rows, cols] * scale


def svec_unpack(v: np.ndarray) -> np.ndarray:
    """Inverse of svec_pack."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("expected a vector")
    n = side_of_packed(v.size)
    rows, cols, scale = _pack_indices(n)
    S = np.zeros((n, n))
    vals = v / scale
    S[rows, cols] = vals
    S[cols, rows] = vals
    return S


def min_eig(S: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return np.inf
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


@dataclass(frozen=True)
class NonNeg:
    size: int

    @property
    def slack_length(self) -> int:
        return self.size


@dataclass(frozen=True)
class PSD:
    side: int

    @property
    def slack_length(self) -> int:
        return packed_length(self.side)


class VariableLayout:
    """Registry mapping named variables to slots of the flat variable vector.

    Symmetric matrix variables store their lower-triangle entries once
    (unscaled); the index grid repeats the slot at (i, j) and (j, i), so
    extracting a symmetric variable returns an exactly symmetric matrix.
    """

    def __init__(self):
        self._entries: dict[str, np.ndarray] = {}
        self._count = 0

    def _take(self, k: int) -> np.ndarray:
        ids = np.arange(self._count, self._count + k, dtype=np.intp)
        self._count += k
        return ids

    def add_scalar(self, name: str) -> int:
        self._register(name, self._take(1).reshape(()))
        return int(self._entries[name])

    def add_vector(self, name: str, n: int) -> np.ndarray:
        self._register(name, self._take(n))
        return self._entries[name]

    def add_matrix(self, name: str, rows: int, cols: int) -> np.ndarray:
        self._register(name, self._take(rows * cols).reshape(rows, cols))
        return self._entries[name]

    def add_symmetric(self, name: str, n: int) -> np.ndarray:
        tri = self._take(packed_length(n))
        rows, cols, _ = _pack_indices(n)
        grid = np.empty((n, n), dtype=np.intp)
        grid[rows, cols] = tri
        grid[cols, rows] = tri
        self._register(name, grid)
        return grid

    def _register(self, name: str, ids: np.ndarray) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate variable name {name!r}")
        self._entries[name] = ids

    def indices(self, name: str) -> np.ndarray:
        return self._entries[name]

    def names(self):
        return list(self._entries)

    @property
    def num_vars(self) -> int:
        return self._count

    def value(self, name: str, x: np.ndarray):
        """Extract a variable from a solution vector, shaped as registered."""
        ids = self._entries[name]
        out = np.asarray(x)[ids]
        return float(out) if out.ndim == 0 else out


class LmiBuilder:
    """Affine symmetric-matrix expression M(x) = M0 + sum_k x_k M_k, packed.

    Terms are added block-wise: a placement at (i0, j0) mirrors the block to
    (j0, i0); diagonal placements must be symmetric.  ``constraint`` returns
    the packed affine map (A, b) with slack = A x + b.
    """

    def __init__(self, side: int, num_vars: int):
        self.side = side
        self._pos = _entry_positions(side)
        self.A = np.zeros((packed_length(side), num_vars))
        self.b = np.zeros(packed_length(side))

    def _accumulate(self, target: np.ndarray, i0: int, j0: int, M: np.ndarray) -> None:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        p, q = M.shape
        if i0 + p > self.side or j0 + q > self.side:
            raise ValueError("block placement exceeds matrix side")
        if i0 == j0:
            if p != q:
                raise ValueError("diagonal placement requires a square block")
            M = 0.5 * (M + M.T)
            a, b = np.triu_indices(p)
            np.add.at(target, self._pos[i0 + a, j0 + b],
                      M[a, b] * np.where(a == b, 1.0, SQRT2))
        else:
            if not (j0 + q <= i0 or i0 + p <= j0):
                raise ValueError("off-diagonal placement overlaps the diagonal")
            a, b = np.indices((p, q)).reshape(2, -1)
            np.add.at(target, self._pos[i0 + a, j0 + b], M[a, b] * SQRT2)

    def add_const(self, i0: int, j0: int, M: np.ndarray) -> None:
        self._accumulate(self.b, i0, j0, M)

    def add_term(self, var: int, i0: int, j0: int, M: np.ndarray) -> None:
        self._accumulate(self.A[:, var], i0, j0, M)

    def add_symmetric_var(self, grid: np.ndarray, i0: int) -> None:
        """Place a symmetric matrix variable (layout grid) at diagonal block (i0, i0)."""
        n = grid.shape[0]
        a, b = np.triu_indices(n)
        pos = self._pos[i0 + a, i0 + b]
        scale = np.where(a == b, 1.0, SQRT2)
        np.add.at(self.A, (pos, grid[a, b]), scale)

    def constraint(self):
        return self.A, self.b


@dataclass
class Block:
    name: str
    cone: NonNeg | PSD
    A: np.ndarray
    b: np.ndarray


@dataclass
class ConicProgram:
    """min objective @ x  s.t. for every block:  A x + b in cone."""

    objective: np.ndarray
    blocks: list[Block]
    layout: VariableLayout | None = None

    @property
    def num_vars(self) -> int:
        return int(np.asarray(self.objective).size)

    def validate(self) -> None:
        seen = set()
        for blk in self.blocks:
            if blk.name in seen:
                raise ValueError(f"duplicate block name {blk.name!r}")
            seen.add(blk.name)
            want = blk.cone.slack_length
            if blk.b.shape != (want,) or blk.A.shape != (want, self.num_vars):
                raise ValueError(
                    f"block {blk.name!r}: affine map shape {blk.A.shape}/{blk.b.shape} "
                    f"does not match cone length {want} and {self.num_vars} variables")
        if self.layout is not None and self.layout.num_vars != self.num_vars:
            raise ValueError("layout variable count does not match objective length")

    def slack(self, block_name: str, x: np.ndarray):
        """Reconstructed slack of one block at x (matrix for PSD, vector for NonNeg)."""
        for blk in self.blocks:
            if blk.name == block_name:
                s = blk.A @ x + blk.b
                return svec_unpack(s) if isinstance(blk.cone, PSD) else s
        raise KeyError(block_name)


@dataclass
class SolverSettings:
    feas_tol: float = 1e-8
    rel_gap_tol: float = 1e-8
    max_iterations: int = 10000
    strictness_margin: float = 1e-7

    def __post_init__(self):
        if min(self.feas_tol, self.rel_gap_tol, self.strictness_margin) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")

    def effective_margin(self, objective_estimate: float) -> float:
        """Margin used to encode strict LMIs, scaled by the problem's value scale."""
        return self.strictness_margin * (1.0 + abs(float(objective_estimate)))


@dataclass
class SolveReport:
    status: str                      # optimal | infeasible | unbounded | numerical-failure
    value: float
    x: np.ndarray | None
    slack_eigs: dict[str, float]     # per block: min eigenvalue (PSD) or min entry (NonNeg)
    iterations: int
    wall_time: float
    raw_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@lru_cache(maxsize=None)
def _clarabel_order(n):
    # Clarabel packs the upper triangle column-major; we pack the lower
    # triangle column-major.  Same sqrt(2) scaling, so a permutation suffices.
    pos = _entry_positions(n)
    perm = [pos[r, c] for c in range(n) for r in range(c + 1)]
    return np.asarray(perm, dtype=np.intp)


_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def solve(program: ConicProgram, settings: SolverSettings | None = None) -> SolveReport:
    """Solve a ConicProgram with Clarabel.

    On status "optimal" the reconstructed slack of every block is checked
    against the feasibility tolerance; a violation downgrades the status to
    "numerical-failure" rather than returning an unsound report.
    """
    import clarabel

    settings = settings or SolverSettings()
    program.validate()
    nv = program.num_vars

    A_parts, b_parts, cones = [], [], []
    for blk in program.blocks:
        if isinstance(blk.cone, PSD):
            perm = _clarabel_order(blk.cone.side)
            A_parts.append(-blk.A[perm])
            b_parts.append(blk.b[perm])
            cones.append(clarabel.PSDTriangleConeT(blk.cone.side))
        else:
            A_parts.append(-blk.A)
            b_parts.append(blk.b)
            cones.append(clarabel.NonnegativeConeT(blk.cone.size))

    A = sparse.csc_matrix(np.vstack(A_parts)) if A_parts else sparse.csc_matrix((0, nv))
    b = np.concatenate(b_parts) if b_parts else np.zeros(0)
    P = sparse.csc_matrix((nv, nv))
    q = np.asarray(program.objective, dtype=float)

    st = clarabel.DefaultSettings()
    st.verbose = False
    st.max_iter = settings.max_iterations
    # ask for one digit more than the contract checks below, since the
    # solver's criterion is on scaled residuals
    st.tol_feas = 0.1 * settings.feas_tol
    st.tol_gap_rel = settings.rel_gap_tol
    st.tol_gap_abs = settings.rel_gap_tol

    t0 = time.perf_counter()
    solution = clarabel.DefaultSolver(P, q, A, b, cones, st).solve()
    wall = time.perf_counter() - t0

    raw = str(solution.status)
    status = _STATUS_MAP.get(raw, "numerical-failure")
    x = np.asarray(solution.x, dtype=float)
    value = float(solution.obj_val)

    slack_eigs: dict[str, float] = {}
    if status == "optimal":
        for blk in program.blocks:
            s = blk.A @ x + blk.b
            if isinstance(blk.cone, PSD):
                eigs = np.linalg.eigvalsh(svec_unpack(s))
                lo, scale = float(eigs[0]), float(np.abs(eigs).sum())
            else:
                lo, scale = float(s.min(initial=np.inf)), float(np.abs(s).sum())
            slack_eigs[blk.name] = lo
            if lo < -settings.feas_tol * (1.0 + scale):
                status = "numerical-failure"
                raw += f"; slack check failed on block {blk.name!r} ({lo:.3e})"

    return SolveReport(
        status=status,
        value=value if status == "optimal" else float("nan"),
        x=x if status == "optimal" else None,
        slack_eigs=slack_eigs,
        iterations=int(solution.iterations),
        wall_time=wall,
        raw_status=raw,
    )
