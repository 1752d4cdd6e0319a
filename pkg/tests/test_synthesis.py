import numpy as np
import pytest

from drro import (AmbiguityBall, MomentNominal, SynthesisProblem,
                  assemble_certificate, build_full_program,
                  build_reduced_program, expected_regret_moments, min_eig,
                  recover_affine, regret_map, synthesize)
from conftest import random_problem
from oracles import gaussian_pushforward


def _affine_lmi(beta, gamma, mu0, g, M, D_inv):
    """Independent numeric assembly of the affine-term feasibility block."""
    n = mu0.size
    N_u = g.size
    out = np.zeros((1 + n + N_u, 1 + n + N_u))
    out[0, 0] = beta
    out[1:1 + n, 0] = out[0, 1:1 + n] = gamma * mu0
    out[1 + n:, 0] = out[0, 1 + n:] = -g
    out[1:1 + n, 1:1 + n] = gamma * np.eye(n)
    out[1 + n:, 1:1 + n] = M
    out[1:1 + n, 1 + n:] = M.T
    out[1 + n:, 1 + n:] = D_inv
    return out


class TestCertificateMatrix:
    def test_zero_arguments(self, rng):
        prob = random_problem(rng)
        n = prob.joint_dim
        N_u = prob.lift.N_u
        Q = assemble_certificate(0.0, np.zeros((n, n)), None, prob.lift,
                                 prob.bench, prob.ball.nominal)
        np.testing.assert_allclose(Q[2 * n:, n:n + prob.lift.N_x], -prob.bench.K_star)
        np.testing.assert_array_equal(Q[2 * n:, n + prob.lift.N_x:2 * n], 0)
        np.testing.assert_allclose(Q[2 * n:, 2 * n:], prob.bench.D_inv)
        Q[2 * n:, :] = 0
        Q[:, 2 * n:] = 0
        np.testing.assert_array_equal(Q, 0)

    def test_random_transcription(self, rng):
        prob = random_problem(rng)
        n = prob.joint_dim
        nom = prob.ball.nominal
        gamma = float(rng.random() + 0.5)
        X = rng.standard_normal((n, n))
        X = X + X.T
        K = rng.standard_normal((prob.lift.N_u, prob.lift.N_y))
        Q = assemble_certificate(gamma, X, K, prob.lift, prob.bench, nom)
        M = np.hstack([K @ prob.lift.CG - prob.bench.K_star, K])
        expect = np.block([
            [X, gamma * nom.Lambda.T, np.zeros((n, prob.lift.N_u))],
            [gamma * nom.Lambda, gamma * np.eye(n), M.T],
            [np.zeros((prob.lift.N_u, n)), M, prob.bench.D_inv]])
        np.testing.assert_allclose(Q, expect, atol=1e-14)
        np.testing.assert_array_equal(Q, Q.T)


class TestPrograms:
    def test_reduced_drops_affine_variables(self, rng):
        prob = random_problem(rng)
        full = build_full_program(prob)
        reduced = build_reduced_program(prob)
        assert reduced.num_vars < full.num_vars
        assert full.num_vars - reduced.num_vars == prob.lift.N_u + 1

    def test_full_and_reduced_values_agree(self, rng):
        for _ in range(3):
            prob = random_problem(rng, T=2)
            v_full = synthesize(prob, "full").value
            v_red = synthesize(prob, "reduced").value
            assert v_full == pytest.approx(v_red, rel=1e-4, abs=1e-6)

    def test_zero_mean_objectives_coincide(self, rng):
        prob = random_problem(rng, T=2)
        prob.ball.nominal.mu0[:] = 0.0
        full = build_full_program(prob)
        reduced = build_reduced_program(prob)
        g_full = full.objective[full.layout.indices("gamma")]
        g_red = reduced.objective[reduced.layout.indices("gamma")]
        assert g_full == pytest.approx(g_red)

    def test_zero_radius_rejected(self, rng):
        prob = random_problem(rng)
        prob.ball.radius = 0.0
        with pytest.raises(ValueError, match="radius"):
            prob.validate()

    def test_wrong_nominal_dimension_rejected(self, rng):
        prob = random_problem(rng)
        prob.ball = AmbiguityBall(MomentNominal(mu0=[0.0], Sigma0=[[1.0]]), 1.0)
        with pytest.raises(ValueError, match="N_x \\+ N_y"):
            prob.validate()


class TestRecoverAffine:
    def test_zero_mean_gives_linear_controller(self, rng):
        prob = random_problem(rng, T=2)
        K = rng.standard_normal((prob.lift.N_u, prob.lift.N_y))
        g, beta = recover_affine(K, 1.7, np.zeros(prob.joint_dim),
                                 prob.lift, prob.bench)
        np.testing.assert_array_equal(g, 0)
        assert beta == 0.0

    def test_scalar_hand_case(self, rng):
        prob = random_problem(rng, T=2)
        mu0 = prob.ball.nominal.mu0
        K = rng.standard_normal((prob.lift.N_u, prob.lift.N_y))
        g, beta = recover_affine(K, 2.0, mu0, prob.lift, prob.bench)
        np.testing.assert_allclose(g, -regret_map(K, prob.lift, prob.bench) @ mu0)
        assert beta == pytest.approx(2.0 * mu0 @ mu0)

    def test_recovered_tuple_feasible_for_affine_lmi(self, rng):
        for _ in range(10):
            prob = random_problem(rng, T=2)
            res = synthesize(prob, "reduced")
            M = regret_map(res.K, prob.lift, prob.bench)
            lmi = _affine_lmi(res.beta, res.gamma, prob.ball.nominal.mu0,
                              res.g, M, prob.bench.D_inv)
            scale = 1 + np.linalg.norm(lmi, 2)
            assert min_eig(lmi) >= -1e-8 * scale


class TestSynthesize:
    def test_cross_method_values(self, rng):
        prob = random_problem(rng, T=2)
        values = {m: synthesize(prob, m).value for m in ("full", "reduced", "eliminated")}
        lo, hi = min(values.values()), max(values.values())
        assert hi - lo <= 1e-3 * (1 + abs(hi))

    def test_gain_is_structured(self, rng):
        prob = random_problem(rng, T=3)
        res = synthesize(prob, "reduced")
        assert res.controller.check_structure(prob.lift.sys)

    def test_certificate_feasible(self, rng):
        prob = random_problem(rng, T=2)
        res = synthesize(prob, "reduced")
        Q = assemble_certificate(res.gamma, res.X, res.K, prob.lift, prob.bench,
                                 prob.ball.nominal)
        assert res.certificate_min_eig >= -1e-7 * (1 + np.linalg.norm(Q, 2))

    def test_performance_block_implied_by_certificate(self, rng):
        # the strict block is a principal submatrix of the certificate
        prob = random_problem(rng, T=2)
        res = synthesize(prob, "reduced")
        Q = assemble_certificate(res.gamma, res.X, res.K, prob.lift, prob.bench,
                                 prob.ball.nominal)
        n = prob.joint_dim
        sub = Q[n:, n:]
        if res.certificate_min_eig > 0:
            assert min_eig(sub) > 0
        assert min_eig(sub) >= res.certificate_min_eig - 1e-12

    def test_unknown_method_rejected(self, rng):
        with pytest.raises(ValueError, match="unknown method"):
            synthesize(random_problem(rng), "annealing")

    def test_certificate_dominates_coupled_perturbations(self, rng):
        prob = random_problem(rng, T=2, radius=0.8)
        res = synthesize(prob, "reduced")
        M = regret_map(res.K, prob.lift, prob.bench)
        nom = prob.ball.nominal
        for _ in range(25):
            a = float(rng.uniform(0.8, 1.2))
            b = 0.2 * rng.standard_normal(prob.joint_dim)
            mu, Sigma, cost = gaussian_pushforward(nom.mu0, nom.Sigma0, a, b)
            if cost > prob.ball.radius:
                continue
            realised = expected_regret_moments(M, res.g, mu, Sigma, prob.bench)
            assert realised <= res.value + 1e-5 * (1 + abs(res.value))
