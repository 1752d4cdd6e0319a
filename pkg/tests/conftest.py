import numpy as np
import pytest

from drro import (AmbiguityBall, CostWeights, MomentNominal, SynthesisProblem,
                  SystemDef, build_benchmark, build_lifted)


def random_system(rng, n_x=2, n_u=1, n_y=1, T=2, spectral=0.7):
    A = rng.standard_normal((n_x, n_x))
    A *= spectral / max(np.abs(np.linalg.eigvals(A)).max(), 1e-6)
    B = rng.standard_normal((n_x, n_u))
    H = rng.standard_normal((n_y, n_x))
    return SystemDef(A=A, B=B, H=H, T=T)


def random_moment_nominal(rng, dim, mean_scale=0.3, cov_scale=0.3):
    mu0 = mean_scale * rng.standard_normal(dim)
    W = cov_scale * rng.standard_normal((dim, dim))
    Sigma0 = W @ W.T + 0.4 * np.eye(dim)
    return MomentNominal(mu0=mu0, Sigma0=Sigma0)


def random_problem(rng, n_x=2, n_u=1, n_y=1, T=2, radius=1.0, settings=None):
    sys = random_system(rng, n_x, n_u, n_y, T)
    lift = build_lifted(sys)
    weights = CostWeights(J_x=np.eye(lift.N_x), J_u=np.eye(lift.N_u))
    bench = build_benchmark(lift, weights)
    nominal = random_moment_nominal(rng, lift.N_x + lift.N_y)
    ball = AmbiguityBall(nominal=nominal, radius=radius)
    kwargs = {"settings": settings} if settings is not None else {}
    return SynthesisProblem(lift=lift, bench=bench, weights=weights, ball=ball,
                            **kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
