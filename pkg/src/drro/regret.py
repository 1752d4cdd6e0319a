"""Noncausal benchmark, regret metric, and closed-form expected regret.

The benchmark input u*(w) = K* w minimises the quadratic trajectory cost with
the whole disturbance trajectory known in advance.  For any input u the excess
cost over the benchmark is the quadratic form ||u - K* w||^2_D with
D = J_u + F' J_x F, which is what makes the worst-case regret problem
reducible to semidefinite programming.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .conic import min_eig
from .lift import AffineController, LiftedOperators


@dataclass
class CostWeights:
    """Trajectory-level weights: J_x PSD on states, J_u PD on inputs."""

    J_x: np.ndarray
    J_u: np.ndarray

    def __post_init__(self):
        self.J_x = np.atleast_2d(np.asarray(self.J_x, dtype=float))
        self.J_u = np.atleast_2d(np.asarray(self.J_u, dtype=float))

    def validate(self, lift: LiftedOperators) -> None:
        if self.J_x.shape != (lift.N_x, lift.N_x):
            raise ValueError("J_x must be N_x x N_x")
        if self.J_u.shape != (lift.N_u, lift.N_u):
            raise ValueError("J_u must be N_u x N_u")
        if min_eig(self.J_x) < -1e-10 * max(np.linalg.norm(self.J_x), 1.0):
            raise ValueError("J_x must be positive semidefinite")
        if min_eig(self.J_u) <= 0:
            raise ValueError("J_u must be positive definite")


@dataclass
class Benchmark:
    """Clairvoyant gain K*, curvature D = J_u + F' J_x F and its inverse."""

    K_star: np.ndarray
    D: np.ndarray
    D_inv: np.ndarray
    chol_D: np.ndarray   # lower factor, D = L L'


def build_benchmark(lift: LiftedOperators, weights: CostWeights) -> Benchmark:
    """Closed-form benchmark; rejects J_u not PD and a vanishing K*.

    K* = 0 (relative Frobenius norm below 1e-12 of ||G||) defeats the regret
    formulation, so it is rejected rather than silently accepted.
    """
    weights.validate(lift)
    D = weights.J_u + lift.F.T @ weights.J_x @ lift.F
    D = 0.5 * (D + D.T)
    try:
        L = np.linalg.cholesky(D)
    except np.linalg.LinAlgError as exc:
        raise ValueError("D = J_u + F' J_x F is not positive definite") from exc
    rhs = lift.F.T @ weights.J_x @ lift.G
    K_star = -linalg.cho_solve((L, True), rhs)
    if np.linalg.norm(K_star) < 1e-12 * max(np.linalg.norm(lift.G), 1.0):
        raise ValueError("benchmark gain K* vanishes; the regret objective is degenerate")
    D_inv = linalg.cho_solve((L, True), np.eye(D.shape[0]))
    D_inv = 0.5 * (D_inv + D_inv.T)
    return Benchmark(K_star=K_star, D=D, D_inv=D_inv, chol_D=L)


def regret_map(K: np.ndarray, lift: LiftedOperators, bench: Benchmark) -> np.ndarray:
    """M = [K C G - K* | K], acting on the stacked (w; v)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return np.hstack([K @ lift.CG - bench.K_star, K])


def eval_cost(u: np.ndarray, w: np.ndarray, lift: LiftedOperators,
              weights: CostWeights) -> float:
    """Trajectory cost x' J_x x + u' J_u u with x = F u + G w."""
    u = np.asarray(u, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    x = lift.F @ u + lift.G @ w
    return float(x @ weights.J_x @ x + u @ weights.J_u @ u)


def eval_regret(ctrl: AffineController, w: np.ndarray, v: np.ndarray,
                lift: LiftedOperators, bench: Benchmark) -> float:
    """Realised regret ||M (w; v) + g||^2_D of an affine controller."""
    M = regret_map(ctrl.K, lift, bench)
    z = M @ np.concatenate([np.asarray(w, float).ravel(), np.asarray(v, float).ravel()])
    z = z + ctrl.g
    return float(z @ bench.D @ z)


def benchmark_input(w: np.ndarray, bench: Benchmark) -> np.ndarray:
    return bench.K_star @ np.asarray(w, dtype=float).ravel()


def expected_regret_moments(M: np.ndarray, g: np.ndarray, mu: np.ndarray,
                            Sigma: np.ndarray, bench: Benchmark) -> float:
    """E ||M xi + g||^2_D for xi with mean mu and covariance Sigma."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    g = np.asarray(g, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    m = M @ mu + g
    return float(np.trace(M.T @ bench.D @ M @ Sigma) + m @ bench.D @ m)
