import math

import numpy as np
import pytest
from scipy.linalg import expm

from enkbf_lab.linmodel import ModelParams, TimeGrid
from enkbf_lab.riccati import (
    CovarianceStepError,
    DegenerateInitialCovariance,
    PathCoverageError,
    fit_envelope_constant,
    explicit_dre_solution,
    integrate_dre,
    ricc_rhs,
    solve_are,
    spectral_norm,
    sqrt_ricc,
    transition_phi,
    transition_psi,
    transition_psi_scan,
)
from enkbf_lab.linmodel import AssumptionError

SQRT2 = math.sqrt(2.0)
SIGMA_INF_SCALAR = SQRT2 - 1.0  # positive root of -S^2 - 2S + 1 = 0
BETA_SCALAR = (SQRT2 + 1.0) / 2.0  # Sigma_B / (2 Sigma_inf)


class TestVectorFields:
    def test_ricc_zero_covariance_leaves_sigma_b(self, scalar_model):
        assert ricc_rhs(np.zeros((1, 1)), scalar_model)[0, 0] == 1.0

    def test_ricc_scalar_arithmetic(self, scalar_model):
        # A=-1, H=1, Sigma_B=1, Q=1: -2 + 1 - 1 = -2
        assert ricc_rhs(np.ones((1, 1)), scalar_model)[0, 0] == -2.0

    def test_ricc_vanishes_at_steady_state(self, scalar_model):
        Q = np.array([[SIGMA_INF_SCALAR]])
        assert abs(ricc_rhs(Q, scalar_model)[0, 0]) < 1e-14

    def test_sqrt_ricc_zero_covariance_is_drift(self, diag_model):
        assert np.array_equal(sqrt_ricc(np.zeros((2, 2)), diag_model), diag_model.A)

    def test_sqrt_ricc_no_observation_is_drift(self):
        m = ModelParams.scalar(a=-1.0, h=0.0, sigma_b=1.0, m0=0.0, sigma0=1.0)
        assert sqrt_ricc(np.array([[7.0]]), m)[0, 0] == -1.0

    def test_sqrt_ricc_at_steady_state(self, scalar_model):
        # A - Sigma_inf/2 = -(1 + sqrt(2))/2
        val = sqrt_ricc(np.array([[SIGMA_INF_SCALAR]]), scalar_model)[0, 0]
        assert val == pytest.approx(-(1.0 + SQRT2) / 2.0, abs=1e-14)

    def test_dimension_mismatch(self, scalar_model):
        with pytest.raises(ValueError):
            ricc_rhs(np.eye(2), scalar_model)
        with pytest.raises(ValueError):
            sqrt_ricc(np.eye(2), scalar_model)

    def test_factorization_identity_random_spd(self):
        # Ricc(Q) = G Q + Q G^T + Sigma_B with G = sqrt-Riccati generator
        rng = np.random.default_rng(314)
        for _ in range(100):
            d = int(rng.integers(1, 5))
            mdl = ModelParams(
                A=rng.standard_normal((d, d)),
                H=rng.standard_normal((d, d)),
                sigma_B=rng.standard_normal((d, d)),
                m0=np.zeros(d),
                Sigma0=np.eye(d),
            )
            B = rng.standard_normal((d, d))
            Q = B @ B.T + 0.1 * np.eye(d)
            G = sqrt_ricc(Q, mdl)
            lhs = ricc_rhs(Q, mdl)
            rhs = G @ Q + Q @ G.T + mdl.Sigma_B
            assert np.allclose(lhs, rhs, atol=1e-10 * max(1.0, np.abs(lhs).max()))

    def test_ricc_output_symmetric_for_symmetric_input(self, diag_model):
        rng = np.random.default_rng(7)
        for _ in range(20):
            B = rng.standard_normal((2, 2))
            Q = B + B.T
            out = ricc_rhs(Q, diag_model)
            assert np.allclose(out, out.T, atol=1e-12)


class TestIntegrateDre:
    def test_equilibrium_is_stationary(self, scalar_model, scalar_consts):
        grid = TimeGrid(T=5.0, dt=1e-3)
        path = integrate_dre(scalar_consts.sigma_inf, scalar_model, grid)
        drift = np.abs(path - scalar_consts.sigma_inf[None]).max()
        assert drift < 1e-10

    def test_scalar_converges_monotonically_to_root(self, scalar_model):
        grid = TimeGrid(T=10.0, dt=1e-3)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)[:, 0, 0]
        assert abs(path[-1] - SIGMA_INF_SCALAR) < 1e-6
        assert np.all(np.diff(path) <= 1e-15)  # decreasing from Sigma0 = 1

    def test_preserves_spd_random_starts(self, diag_model):
        rng = np.random.default_rng(21)
        grid = TimeGrid(T=2.0, dt=1e-2)
        for _ in range(5):
            B = rng.standard_normal((2, 2))
            S0 = B @ B.T + 0.05 * np.eye(2)
            path = integrate_dre(S0, diag_model, grid)
            for Q in path[:: grid.n_steps // 10]:
                assert np.allclose(Q, Q.T)
                assert np.linalg.eigvalsh(Q).min() >= -1e-10

    def test_oversized_step_refused(self, scalar_model):
        grid = TimeGrid(T=3.0, dt=1.0)
        with pytest.raises(CovarianceStepError, match="too large"):
            integrate_dre(np.array([[10.0]]), scalar_model, grid)

    def test_envelope_from_fitted_constant(self, scalar_model, scalar_consts):
        # ||Sigma_t - Sigma_inf|| <= m1_hat exp(-2 lambda_fit t) on the fit grid
        grid = TimeGrid(T=scalar_consts.fit_T, dt=scalar_consts.fit_dt)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        gaps = np.abs(path[:, 0, 0] - scalar_consts.sigma_inf[0, 0])
        env = scalar_consts.m1_hat * np.exp(-2 * scalar_consts.lambda_fit * grid.times())
        assert np.all(gaps <= env * (1.0 + 1e-12) + 1e-300)


class TestSolveAre:
    def test_scalar_closed_form(self, scalar_consts):
        assert scalar_consts.sigma_inf[0, 0] == pytest.approx(SIGMA_INF_SCALAR, abs=1e-10)
        assert scalar_consts.f_inf[0, 0] == pytest.approx(-SQRT2, abs=1e-10)
        assert scalar_consts.lambda0 == pytest.approx(SQRT2, abs=1e-10)
        assert scalar_consts.beta == pytest.approx(BETA_SCALAR, abs=1e-10)
        assert scalar_consts.are_residual <= 1e-8 * (1 + SIGMA_INF_SCALAR)

    def test_scalar_alpha_formula(self, scalar_consts):
        # alpha = exp(m1_hat * ||H^T H|| / (2 beta)) for cond(Sigma_inf) = 1
        expected = math.exp(scalar_consts.m1_hat / (2.0 * scalar_consts.beta))
        assert scalar_consts.alpha == pytest.approx(expected, rel=1e-12)
        assert scalar_consts.lambda_fit == pytest.approx(0.9 * scalar_consts.lambda0)

    def test_diagonal_model_decouples(self, diag_model):
        consts = solve_are(diag_model)
        assert consts.sigma_inf[0, 0] == pytest.approx(SQRT2 - 1.0, abs=1e-9)
        assert consts.sigma_inf[1, 1] == pytest.approx(math.sqrt(5.0) - 2.0, abs=1e-9)
        assert abs(consts.sigma_inf[0, 1]) < 1e-9

    def test_no_observation_reduces_to_lyapunov(self):
        m = ModelParams(
            A=np.diag([-1.0, -2.0]),
            H=np.zeros((2, 2)),
            sigma_B=np.eye(2),
            m0=np.zeros(2),
            Sigma0=np.eye(2),
        )
        consts = solve_are(m)
        assert np.allclose(consts.sigma_inf, np.diag([0.5, 0.25]), atol=1e-9)

    def test_refuses_undetectable_pair(self):
        m = ModelParams.scalar(a=1.0, h=0.0, sigma_b=1.0, m0=0.0, sigma0=1.0)
        with pytest.raises(AssumptionError, match="A1"):
            solve_are(m)

    def test_constants_report_roundtrips_edges(self, scalar_consts, tmp_path):
        out = tmp_path / "constants.txt"
        scalar_consts.write_text(out)
        text = out.read_text()
        assert "sigma_inf" in text and "are_residual" in text
        assert repr(scalar_consts.beta) in text


class TestExplicitSolution:
    def test_consistent_at_time_zero(self, scalar_model, scalar_consts):
        out = explicit_dre_solution(scalar_model.Sigma0, scalar_consts, scalar_model, 0.0)
        assert out[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_long_time_reaches_steady_state(self, scalar_model, scalar_consts):
        out = explicit_dre_solution(scalar_model.Sigma0, scalar_consts, scalar_model, 25.0)
        assert out[0, 0] == pytest.approx(SIGMA_INF_SCALAR, abs=1e-10)

    def test_matches_rk4_reference(self, scalar_model, scalar_consts):
        grid = TimeGrid(T=2.0, dt=1e-4)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        for t in (0.5, 1.0, 2.0):
            k = grid.index_of(t)
            closed = explicit_dre_solution(scalar_model.Sigma0, scalar_consts, scalar_model, t)
            rel = abs(closed[0, 0] - path[k, 0, 0]) / path[k, 0, 0]
            assert rel < 1e-6

    def test_equilibrium_shortcut(self, scalar_model, scalar_consts):
        out = explicit_dre_solution(scalar_consts.sigma_inf, scalar_consts, scalar_model, 3.0)
        assert np.array_equal(out, scalar_consts.sigma_inf)

    def test_degenerate_offset_refused(self, diag_model):
        consts = solve_are(diag_model)
        bad = consts.sigma_inf + np.diag([1.0, 0.0])
        with pytest.raises(DegenerateInitialCovariance):
            explicit_dre_solution(bad, consts, diag_model, 1.0)


class TestTransitionFlows:
    def test_identity_at_equal_times(self, scalar_model, scalar_consts):
        grid = TimeGrid(T=1.0, dt=1e-2)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        assert transition_phi(0.5, 0.5, path, scalar_model, grid)[0, 0] == 1.0
        assert transition_psi(0.5, 0.5, path, scalar_model, grid)[0, 0] == 1.0

    def test_constant_coefficient_matches_expm(self, scalar_model, scalar_consts):
        grid = TimeGrid(T=2.0, dt=1e-3)
        const_path = np.repeat(scalar_consts.sigma_inf[None], grid.n_steps + 1, axis=0)
        phi = transition_phi(0.0, 2.0, const_path, scalar_model, grid)
        assert phi[0, 0] == pytest.approx(expm(scalar_consts.f_inf * 2.0)[0, 0], rel=1e-10)

    def test_psi_without_observation_is_drift_flow(self):
        m = ModelParams(
            A=[[-1.0, 0.3], [0.0, -2.0]],
            H=np.zeros((2, 2)),
            sigma_B=np.eye(2),
            m0=np.zeros(2),
            Sigma0=np.eye(2),
        )
        grid = TimeGrid(T=1.0, dt=1e-3)
        path = integrate_dre(m.Sigma0, m, grid)
        psi = transition_psi(0.0, 1.0, path, m, grid)
        assert np.allclose(psi, expm(m.A), atol=1e-9)

    def test_semigroup_on_grid_nodes(self, scalar_model, diag_model):
        for mdl in (scalar_model, diag_model):
            grid = TimeGrid(T=2.0, dt=1e-2)
            path = integrate_dre(mdl.Sigma0, mdl, grid)
            full = transition_phi(0.0, 2.0, path, mdl, grid)
            split = transition_phi(0.7, 2.0, path, mdl, grid) @ transition_phi(0.0, 0.7, path, mdl, grid)
            assert np.allclose(full, split, atol=1e-13)
            fullp = transition_psi(0.0, 2.0, path, mdl, grid)
            splitp = transition_psi(0.7, 2.0, path, mdl, grid) @ transition_psi(0.0, 0.7, path, mdl, grid)
            assert np.allclose(fullp, splitp, atol=1e-13)

    def test_scan_agrees_with_single_calls(self, scalar_model):
        grid = TimeGrid(T=1.0, dt=1e-2)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        scan = transition_psi_scan(0.2, [0.2, 0.5, 1.0], path, scalar_model, grid)
        for t, M in zip([0.2, 0.5, 1.0], scan):
            single = transition_psi(0.2, t, path, scalar_model, grid)
            assert np.array_equal(M, single)

    def test_psi_envelope_decay_bound(self, scalar_model, scalar_consts):
        # ||Psi_{t,s}|| <= alpha exp(-beta (t-s)) with Q_t the DRE solution
        grid = TimeGrid(T=5.0, dt=1e-3)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        s_nodes = np.round(np.linspace(0.0, 4.0, 10), 3)
        for s in s_nodes:
            ts = [round(float(t), 3) for t in np.linspace(s, 5.0, 10)]
            ts = [grid.t0 + grid.index_of(t) * grid.dt for t in ts]
            mats = transition_psi_scan(float(s), ts, path, scalar_model, grid)
            for t, M in zip(ts, mats):
                bound = scalar_consts.alpha * math.exp(-scalar_consts.beta * (t - s))
                assert spectral_norm(M) <= bound

    def test_phi_decay_from_above_equilibrium(self, scalar_model):
        # Sigma_t >= Sigma_inf along the path from Sigma0 = 1, so
        # |Phi_{t,s}| <= exp(-lambda0 (t-s)) pointwise
        grid = TimeGrid(T=10.0, dt=1e-3)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        phi = transition_phi(0.0, 10.0, path, scalar_model, grid)
        assert abs(phi[0, 0]) <= math.exp(-SQRT2 * 10.0)

    def test_phi_envelope_fit_over_grid(self, scalar_model, scalar_consts):
        grid = TimeGrid(T=5.0, dt=1e-3)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        lam = 0.9 * scalar_consts.lambda0
        norms, gaps = [], []
        for s in (1.0, 2.0, 3.0):
            for t in (3.5, 4.0, 5.0):
                norms.append(spectral_norm(transition_phi(s, t, path, scalar_model, grid)))
                gaps.append(t - s)
        kappa = fit_envelope_constant(norms, gaps, lam)
        assert 0.0 < kappa < 10.0
        for n, g in zip(norms, gaps):
            assert n <= kappa * math.exp(-lam * g) * (1 + 1e-12)

    def test_path_coverage_gap_rejected(self, scalar_model):
        grid = TimeGrid(T=1.0, dt=1e-2)
        path = integrate_dre(scalar_model.Sigma0, scalar_model, grid)
        with pytest.raises(PathCoverageError):
            transition_phi(0.0, 1.0, path[:50], scalar_model, grid)
        with pytest.raises(ValueError):
            transition_phi(0.8, 0.2, path, scalar_model, grid)
