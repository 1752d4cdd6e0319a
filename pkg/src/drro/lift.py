"""Finite-horizon lifted operators and the purified-output controller structure.

A horizon-T linear system x_{t+1} = A x_t + B u_t + w_t, y_t = H x_t + v_t is
lifted to trajectory space: x = F u + G w and y = C x + v, where the stacked
disturbance w = (x_0, w_0, ..., w_{T-1}) carries the initial state in its
first block.  Controllers are affine in the purified output eta = C G w + v,
which does not depend on the applied inputs, so closed-loop trajectories are
affine in the controller parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SystemDef:
    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    T: int

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ValueError("A must be square")
        if self.B.shape[0] != n_x:
            raise ValueError("B row count must match A")
        if self.H.shape[1] != n_x:
            raise ValueError("H column count must match A")
        if int(self.T) < 1:
            raise ValueError("horizon T must be >= 1")
        self.T = int(self.T)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.H.shape[0]


@dataclass
class LiftedOperators:
    """Block operators x = F u + G w, y = C x + v over the horizon."""

    F: np.ndarray
    G: np.ndarray
    C: np.ndarray
    CG: np.ndarray
    sys: SystemDef

    @property
    def N_x(self) -> int:
        return self.G.shape[0]

    @property
    def N_u(self) -> int:
        return self.F.shape[1]

    @property
    def N_y(self) -> int:
        return self.C.shape[0]


def build_lifted(sys: SystemDef) -> LiftedOperators:
    """Unroll the recursion into block lower triangular Toeplitz operators.

    G block (t, 0) is A^t (it multiplies x_0); block (t, j) for j >= 1 is
    A^(t-j) when t >= j, so the diagonal blocks are identity.  F block (t, s)
    is A^(t-1-s) B for s < t; its first block row is zero.  C is block
    rectangular diagonal with blocks H (it drops the terminal state).
    """
    n_x, n_u, n_y, T = sys.n_x, sys.n_u, sys.n_y, sys.T
    N_x, N_u, N_y = (T + 1) * n_x, T * n_u, T * n_y

    powers = [np.eye(n_x)]
    for _ in range(T):
        powers.append(sys.A @ powers[-1])

    G = np.zeros((N_x, N_x))
    F = np.zeros((N_x, N_u))
    for t in range(T + 1):
        for j in range(t + 1):
            G[t * n_x:(t + 1) * n_x, j * n_x:(j + 1) * n_x] = powers[t - j]
        for s in range(t):
            F[t * n_x:(t + 1) * n_x, s * n_u:(s + 1) * n_u] = powers[t - 1 - s] @ sys.B

    C = np.zeros((N_y, N_x))
    for t in range(T):
        C[t * n_y:(t + 1) * n_y, t * n_x:(t + 1) * n_x] = sys.H

    return LiftedOperators(F=F, G=G, C=C, CG=C @ G, sys=sys)


@dataclass
class GainStructure:
    """Selector factors reproducing block lower triangular gains stage by stage.

    K = sum_i left[i] @ stack_i @ right[i], where stack_i holds the nonzero
    rows of K's column block i-1.  left[i] columns and right[i] rows are
    orthonormal 0/1 selectors.
    """

    left: list[np.ndarray]
    right: list[np.ndarray]
    n_u: int
    n_y: int
    T: int

    @property
    def stack_shapes(self) -> list[tuple[int, int]]:
        return [(L.shape[1], self.n_y) for L in self.left]

    def assemble(self, stacks: list[np.ndarray]) -> np.ndarray:
        K = np.zeros((self.T * self.n_u, self.T * self.n_y))
        for L, R, Ki in zip(self.left, self.right, stacks):
            K += L @ np.atleast_2d(Ki) @ R
        return K

    def extract(self, K: np.ndarray) -> list[np.ndarray]:
        return [L.T @ K @ R.T for L, R in zip(self.left, self.right)]


def structure_factors(sys: SystemDef) -> GainStructure:
    """Build the per-stage selectors for the lower triangular gain set."""
    n_u, n_y, T = sys.n_u, sys.n_y, sys.T
    N_u, N_y = T * n_u, T * n_y
    left, right = [], []
    for i in range(1, T + 1):
        rows = (T - i + 1) * n_u
        L = np.zeros((N_u, rows))
        L[(i - 1) * n_u:, :] = np.eye(rows)
        R = np.zeros((n_y, N_y))
        R[:, (i - 1) * n_y:i * n_y] = np.eye(n_y)
        left.append(L)
        right.append(R)
    return GainStructure(left=left, right=right, n_u=n_u, n_y=n_y, T=T)


@dataclass
class AffineController:
    """u = K eta + g with K block lower triangular in the stage sense."""

    K: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        if self.K.shape[0] != self.g.size:
            raise ValueError("K row count must match g length")

    def check_structure(self, sys: SystemDef, atol: float = 0.0) -> bool:
        """True when every block above the stage diagonal is (exactly) zero."""
        n_u, n_y = sys.n_u, sys.n_y
        for t in range(sys.T):
            for s in range(t + 1, sys.T):
                blk = self.K[t * n_u:(t + 1) * n_u, s * n_y:(s + 1) * n_y]
                if np.abs(blk).max(initial=0.0) > atol:
                    return False
        return True


def simulate(sys: SystemDef, ctrl: AffineController, w: np.ndarray, v: np.ndarray,
             lift: LiftedOperators | None = None):
    """Closed-loop trajectories (x, u, y, eta) for one disturbance realisation.

    w stacks (x_0, w_0, ..., w_{T-1}); v stacks the measurement noise.  Uses
    the operator form eta = C G w + v, u = K eta + g, x = F u + G w.
    """
    lift = lift or build_lifted(sys)
    w = np.asarray(w, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if w.size != lift.N_x or v.size != lift.N_y:
        raise ValueError("disturbance/noise trajectory lengths do not match the lifted dims")
    if ctrl.K.shape != (lift.N_u, lift.N_y):
        raise ValueError("controller dimensions do not match the lifted dims")
    eta = lift.CG @ w + v
    u = ctrl.K @ eta + ctrl.g
    x = lift.F @ u + lift.G @ w
    y = lift.C @ x + v
    return x, u, y, eta
