"""Wasserstein ambiguity balls: nominal descriptions, validation, test oracles.

Two nominal regimes are supported: a moment description (mean, covariance,
and the lower Cholesky factor of the covariance) for absolutely continuous
nominals on R^n, and a discrete distribution supported on an ellipsoid.  The
ball is all distributions within 2-Wasserstein radius r of the nominal.

Exact optimal transport between discrete distributions is deliberately not
computed here; explicit couplings give upper bounds on the distance, which is
all the "inside the ball" test certificates need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def cholesky_lower(Sigma: np.ndarray) -> np.ndarray:
    """Unique lower triangular factor with positive diagonal, Sigma = L L'."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError("covariance must be square")
    if np.linalg.norm(Sigma - Sigma.T) > 1e-10 * max(np.linalg.norm(Sigma), 1.0):
        raise ValueError("covariance must be symmetric")
    try:
        return np.linalg.cholesky(0.5 * (Sigma + Sigma.T))
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance must be positive definite") from exc


@dataclass
class MomentNominal:
    """Nominal committed to through (mu0, Sigma0) only; sampling is Gaussian."""

    mu0: np.ndarray
    Sigma0: np.ndarray
    Lambda: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float).ravel()
        self.Sigma0 = np.atleast_2d(np.asarray(self.Sigma0, dtype=float))
        if self.Sigma0.shape != (self.mu0.size, self.mu0.size):
            raise ValueError("Sigma0 must be n x n with n = len(mu0)")
        if self.Lambda is None:
            self.Lambda = cholesky_lower(self.Sigma0)

    @property
    def dim(self) -> int:
        return self.mu0.size


@dataclass
class Ellipsoid:
    """Support set {xi : xi' P2 xi + 2 q2' xi + c2 <= 0} with nonempty interior."""

    P2: np.ndarray
    q2: np.ndarray
    c2: float

    def __post_init__(self):
        self.P2 = np.atleast_2d(np.asarray(self.P2, dtype=float))
        self.q2 = np.asarray(self.q2, dtype=float).ravel()
        self.c2 = float(self.c2)

    @property
    def dim(self) -> int:
        return self.q2.size

    def gauge(self, xi: np.ndarray) -> float:
        xi = np.asarray(xi, dtype=float).ravel()
        return float(xi @ self.P2 @ xi + 2 * self.q2 @ xi + self.c2)

    def has_interior(self) -> bool:
        try:
            sol = np.linalg.solve(self.P2, self.q2)
        except np.linalg.LinAlgError:
            return False
        return float(self.q2 @ sol - self.c2) > 0


@dataclass
class DiscreteNominal:
    """Weighted atoms on an ellipsoidal support (uniform weights by default)."""

    points: np.ndarray
    support: Ellipsoid
    weights: np.ndarray = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.weights is None:
            self.weights = np.full(self.points.shape[0], 1.0 / self.points.shape[0])
        else:
            self.weights = np.asarray(self.weights, dtype=float).ravel()

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass
class AmbiguityBall:
    nominal: MomentNominal | DiscreteNominal
    radius: float

    def __post_init__(self):
        self.radius = float(self.radius)

    @property
    def dim(self) -> int:
        return self.nominal.dim


def validate(ball: AmbiguityBall) -> list[str]:
    """Check every ball invariant; returns violation descriptions (empty = ok)."""
    problems: list[str] = []
    if not ball.radius > 0:
        problems.append("radius must be positive")
    nom = ball.nominal
    if isinstance(nom, MomentNominal):
        n = nom.dim
        if nom.Sigma0.shape != (n, n):
            problems.append("Sigma0 must be n x n")
            return problems
        if np.linalg.norm(nom.Sigma0 - nom.Sigma0.T) > 1e-10 * max(np.linalg.norm(nom.Sigma0), 1.0):
            problems.append("Sigma0 must be symmetric")
        eigs = np.linalg.eigvalsh(0.5 * (nom.Sigma0 + nom.Sigma0.T))
        if eigs[0] <= 0:
            problems.append("Sigma0 must be positive definite")
        if np.any(np.diag(nom.Lambda) <= 0) or np.linalg.norm(np.triu(nom.Lambda, 1)) > 0:
            problems.append("Lambda must be lower triangular with positive diagonal")
        resid = np.linalg.norm(nom.Lambda @ nom.Lambda.T - nom.Sigma0)
        if resid > 1e-10 * max(np.linalg.norm(nom.Sigma0), 1.0):
            problems.append("Lambda Lambda' must reproduce Sigma0")
    elif isinstance(nom, DiscreteNominal):
        supp = nom.support
        if supp.dim != nom.dim:
            problems.append("support dimension must match the atoms")
            return problems
        eigs = np.linalg.eigvalsh(0.5 * (supp.P2 + supp.P2.T))
        if eigs[0] <= 0:
            problems.append("support shape matrix P2 must be positive definite")
        elif not supp.has_interior():
            problems.append("support ellipsoid must have an interior point")
        if np.any(nom.weights < 0):
            problems.append("weights must be nonnegative")
        if abs(nom.weights.sum() - 1.0) > 1e-12:
            problems.append("weights must sum to one")
        if nom.count == 0:
            problems.append("at least one atom is required")
        for i in range(nom.count):
            if supp.gauge(nom.points[i]) > 1e-9:
                problems.append(f"atom {i} lies outside the support ellipsoid")
                break
    else:
        problems.append(f"unknown nominal type {type(nom).__name__}")
    return problems


def sample_gaussian(nom: MomentNominal, count: int, seed: int) -> np.ndarray:
    """(count, n) Gaussian draws with the nominal's moments, deterministic in seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, nom.dim))
    return nom.mu0 + z @ nom.Lambda.T


def estimate_moments(samples: np.ndarray, ridge: float = 1e-8):
    """Unbiased empirical (mean, covariance); ridged to PD if rank-deficient."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    mu = samples.mean(axis=0)
    centered = samples - mu
    denom = max(samples.shape[0] - 1, 1)
    Sigma = centered.T @ centered / denom
    Sigma = 0.5 * (Sigma + Sigma.T)
    if np.linalg.eigvalsh(Sigma)[0] <= 0:
        Sigma = Sigma + ridge * np.eye(Sigma.shape[0])
    return mu, Sigma


def coupling_cost(src_points, src_weights, dst_points, dst_weights, coupling,
                  marginal_tol: float = 1e-10) -> float:
    """Quadratic transport cost of an explicit coupling; upper-bounds W_2.

    The coupling must be entrywise nonnegative with marginals matching the
    given weights; a mismatch is an error, not a warning.
    """
    src = np.atleast_2d(np.asarray(src_points, dtype=float))
    dst = np.atleast_2d(np.asarray(dst_points, dtype=float))
    pw = np.asarray(src_weights, dtype=float).ravel()
    qw = np.asarray(dst_weights, dtype=float).ravel()
    pi = np.atleast_2d(np.asarray(coupling, dtype=float))
    if pi.shape != (src.shape[0], dst.shape[0]):
        raise ValueError("coupling shape must be (len(src), len(dst))")
    if pi.min(initial=0.0) < -marginal_tol:
        raise ValueError("coupling must be nonnegative")
    if np.abs(pi.sum(axis=1) - pw).max() > marginal_tol:
        raise ValueError("row marginals do not match the source weights")
    if np.abs(pi.sum(axis=0) - qw).max() > marginal_tol:
        raise ValueError("column marginals do not match the destination weights")
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(max((pi * d2).sum(), 0.0)))
