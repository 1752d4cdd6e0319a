import numpy as np
import pytest

from drro import (AmbiguityBall, DiscreteNominal, Ellipsoid, MomentNominal,
                  Quadratic, atom_dual_block, build_discrete_dual,
                  build_moment_dual, nominal_expectation, wce, wce_discrete,
                  wce_moment)
from conftest import random_moment_nominal
from oracles import dual_line_search, gaussian_pushforward, quadratic_expectation


def _norm_sq(n):
    return Quadratic(P=np.eye(n), q=np.zeros(n))


class TestMomentDual:
    def test_scalar_anchor(self):
        sol = wce_moment(_norm_sq(1), MomentNominal(mu0=[0.0], Sigma0=[[1.0]]), 1.0)
        assert sol.value == pytest.approx(4.0, rel=1e-6)

    def test_closed_form_family(self, rng):
        for _ in range(5):
            n = int(rng.integers(1, 5))
            nom = random_moment_nominal(rng, n, mean_scale=0.8, cov_scale=0.8)
            r = float(rng.uniform(0.1, 3.0))
            sol = wce_moment(_norm_sq(n), nom, r)
            S = np.trace(nom.Sigma0) + nom.mu0 @ nom.mu0
            expect = (np.sqrt(S) + r) ** 2
            assert abs(sol.value - expect) <= 1e-6 * expect

    def test_matches_line_search_for_general_quadratics(self, rng):
        for _ in range(5):
            n = int(rng.integers(1, 4))
            W = rng.standard_normal((n, n))
            P = W + W.T
            if np.linalg.eigvalsh(P)[-1] < 0.1:   # keep the top eigenvalue positive
                P = P + (0.2 - np.linalg.eigvalsh(P)[-1]) * np.eye(n)
            quad = Quadratic(P=P, q=rng.standard_normal(n), c=float(rng.standard_normal()))
            nom = random_moment_nominal(rng, n)
            r = float(rng.uniform(0.2, 2.0))
            sol = wce_moment(quad, nom, r)
            oracle = dual_line_search(quad.P, quad.q, quad.c, nom.mu0, nom.Sigma0, r)
            assert sol.value == pytest.approx(oracle, rel=1e-6)

    def test_rejects_zero_top_eigenvalue(self):
        nom = MomentNominal(mu0=[0.0, 0.0], Sigma0=np.eye(2))
        with pytest.raises(ValueError, match="largest eigenvalue"):
            build_moment_dual(Quadratic(P=np.zeros((2, 2)), q=[1.0, 0.0]), nom, 1.0)

    def test_concave_branch(self, rng):
        # lambda_max < 0: no closed form, but the ball contains the nominal
        # and the value is monotone in the radius
        nom = random_moment_nominal(rng, 3)
        quad = Quadratic(P=-np.eye(3), q=np.zeros(3))
        baseline = nominal_expectation(quad, nom)
        prev = -np.inf
        for r in (0.1, 0.5, 1.0, 2.0):
            val = wce_moment(quad, nom, r).value
            assert val >= baseline - 1e-6 * (1 + abs(baseline))
            assert val >= prev - 1e-8 * (1 + abs(prev))
            prev = val

    def test_concave_branch_matches_line_search(self, rng):
        nom = random_moment_nominal(rng, 2)
        quad = Quadratic(P=-np.eye(2), q=[0.3, -0.1], c=0.2)
        sol = wce_moment(quad, nom, 0.8)
        oracle = dual_line_search(quad.P, quad.q, quad.c, nom.mu0, nom.Sigma0, 0.8)
        assert sol.value == pytest.approx(oracle, rel=1e-6)

    def test_small_radius_recovers_nominal(self, rng):
        nom = random_moment_nominal(rng, 3)
        sol = wce_moment(_norm_sq(3), nom, 1e-6)
        expect = np.trace(nom.Sigma0) + nom.mu0 @ nom.mu0
        assert sol.value == pytest.approx(expect, rel=1e-3)

    def test_duals_satisfy_invariants(self, rng):
        nom = random_moment_nominal(rng, 2)
        quad = _norm_sq(2)
        sol = wce_moment(quad, nom, 0.5)
        assert sol.duals["gamma"] >= 0
        slack = sol.duals["gamma"] * np.eye(2) - quad.P
        assert np.linalg.eigvalsh(slack)[0] > 0

    def test_shifted_gaussian_dominated(self, rng):
        # explicit couplings with cost <= r never beat the certified value
        nom = random_moment_nominal(rng, 3)
        quad = _norm_sq(3)
        r = 1.2
        value = wce_moment(quad, nom, r).value
        for _ in range(20):
            a = float(rng.uniform(0.7, 1.3))
            b = rng.standard_normal(3) * 0.3
            mu, Sigma, cost = gaussian_pushforward(nom.mu0, nom.Sigma0, a, b)
            if cost > r:
                continue
            realised = quadratic_expectation(quad.P, quad.q, quad.c, mu, Sigma)
            assert realised <= value + 1e-6 * (1 + abs(value))


class TestAtomBlock:
    def test_all_zero(self):
        quad = Quadratic(P=np.zeros((2, 2)), q=np.zeros(2), c=0.0)
        supp = Ellipsoid(P2=np.zeros((2, 2)), q2=np.zeros(2), c2=0.0)
        out = atom_dual_block(0.0, np.zeros(2), 0.0, 0.0, quad, supp)
        np.testing.assert_array_equal(out, np.zeros((3, 3)))

    def test_unit_multiplier(self):
        quad = Quadratic(P=np.zeros((2, 2)), q=np.zeros(2), c=0.0)
        supp = Ellipsoid(P2=np.eye(2), q2=np.zeros(2), c2=0.0)
        out = atom_dual_block(1.0, np.zeros(2), 0.0, 0.0, quad, supp)
        np.testing.assert_array_equal(out, np.diag([0.0, 1.0, 1.0]))

    def test_random_transcription(self, rng):
        n = 3
        quad = Quadratic(P=rng.standard_normal((n, n)), q=rng.standard_normal(n),
                         c=float(rng.standard_normal()))
        supp = Ellipsoid(P2=np.eye(n) + np.diag(rng.random(n)),
                         q2=rng.standard_normal(n), c2=-2.0)
        lam, alpha, t = rng.random(), rng.random(), float(rng.standard_normal())
        zeta = rng.standard_normal(n)
        out = atom_dual_block(lam, zeta, alpha, t, quad, supp)
        # independent entry-by-entry transcription
        expect = np.zeros((n + 1, n + 1))
        expect[0, 0] = lam * zeta @ zeta - quad.c + alpha * supp.c2 - t
        expect[1:, 0] = expect[0, 1:] = alpha * supp.q2 - lam * zeta - quad.q
        expect[1:, 1:] = lam * np.eye(n) - quad.P + alpha * supp.P2
        np.testing.assert_allclose(out, expect, atol=1e-14)


class TestDiscreteDual:
    def test_constant_objective(self):
        supp = Ellipsoid(P2=np.eye(1), q2=np.zeros(1), c2=-1.0)
        nom = DiscreteNominal(points=[[0.2], [-0.3]], support=supp)
        quad = Quadratic(P=np.zeros((1, 1)), q=np.zeros(1), c=3.25)
        sol = wce_discrete(quad, nom, 0.7)
        assert sol.value == pytest.approx(3.25, abs=1e-7)

    @pytest.mark.parametrize("r", [0.25, 0.5, 1.0, 2.0])
    def test_radial_point_mass(self, r):
        supp = Ellipsoid(P2=np.eye(2), q2=np.zeros(2), c2=-1.0)
        nom = DiscreteNominal(points=np.zeros((1, 2)), support=supp)
        sol = wce_discrete(_norm_sq(2), nom, r)
        assert sol.value == pytest.approx(min(r, 1.0) ** 2, abs=1e-5)

    def test_two_atoms_monotone(self):
        supp = Ellipsoid(P2=np.eye(1), q2=np.zeros(1), c2=-1.0)
        nom = DiscreteNominal(points=[[0.5], [-0.5]], support=supp)
        quad = _norm_sq(1)
        prev = -np.inf
        for r in (0.05, 0.2, 0.5, 1.0):
            val = wce_discrete(quad, nom, r).value
            assert val >= 0.25 - 1e-7
            assert val >= prev - 1e-8
            prev = val

    def test_small_radius_recovers_nominal(self, rng):
        supp = Ellipsoid(P2=np.eye(2), q2=np.zeros(2), c2=-4.0)
        pts = rng.uniform(-1.0, 1.0, size=(4, 2))
        nom = DiscreteNominal(points=pts, support=supp)
        quad = Quadratic(P=np.diag([1.0, 2.0]), q=[0.1, -0.2], c=0.5)
        sol = wce_discrete(quad, nom, 1e-6)
        assert sol.value == pytest.approx(nominal_expectation(quad, nom), rel=1e-3)

    def test_weights_match_uniform_bitwise(self):
        supp = Ellipsoid(P2=np.eye(1), q2=np.zeros(1), c2=-1.0)
        pts = [[0.5], [-0.5]]
        uniform = build_discrete_dual(_norm_sq(1), DiscreteNominal(points=pts,
                                                                   support=supp), 0.5)
        explicit = build_discrete_dual(
            _norm_sq(1), DiscreteNominal(points=pts, weights=[0.5, 0.5],
                                         support=supp), 0.5)
        np.testing.assert_array_equal(uniform.objective, explicit.objective)
        for bu, be in zip(uniform.blocks, explicit.blocks):
            np.testing.assert_array_equal(bu.A, be.A)
            np.testing.assert_array_equal(bu.b, be.b)

    def test_multipliers_nonnegative(self):
        supp = Ellipsoid(P2=np.eye(2), q2=np.zeros(2), c2=-1.0)
        nom = DiscreteNominal(points=[[0.1, 0.2], [-0.2, 0.1]], support=supp)
        sol = wce_discrete(_norm_sq(2), nom, 0.4)
        assert sol.duals["lam"] >= -1e-10
        assert np.min(sol.duals["alpha"]) >= -1e-10

    def test_coupled_perturbation_dominated(self):
        # move each atom radially by rho <= r: expectation of |xi|^2 under the
        # perturbed distribution is below the certificate
        supp = Ellipsoid(P2=np.eye(2), q2=np.zeros(2), c2=-1.0)
        pts = np.array([[0.3, 0.0], [0.0, -0.4]])
        nom = DiscreteNominal(points=pts, support=supp)
        r = 0.3
        value = wce_discrete(_norm_sq(2), nom, r).value
        for rho in (0.1, 0.2, 0.3):
            moved = pts * (1 + rho / np.linalg.norm(pts, axis=1, keepdims=True))
            moved = np.clip(moved, -1, 1)
            cost = np.sqrt(np.mean(np.sum((moved - pts) ** 2, axis=1)))
            assert cost <= r + 1e-12
            realised = np.mean(np.sum(moved ** 2, axis=1))
            assert realised <= value + 1e-6 * (1 + abs(value))

    def test_empty_nominal_rejected(self):
        supp = Ellipsoid(P2=np.eye(1), q2=np.zeros(1), c2=-1.0)
        nom = DiscreteNominal(points=np.zeros((1, 1)), support=supp)
        nom.points = np.zeros((0, 1))
        nom.weights = np.zeros(0)
        with pytest.raises(ValueError):
            build_discrete_dual(_norm_sq(1), nom, 1.0)


class TestDispatch:
    def test_ball_dispatch(self, rng):
        nom = random_moment_nominal(rng, 2)
        ball = AmbiguityBall(nom, radius=0.5)
        assert wce(_norm_sq(2), ball).value == pytest.approx(
            wce_moment(_norm_sq(2), nom, 0.5).value, rel=1e-9)
