# tests/test_lagrangian.py

import numpy as np
import pytest

from exceptions import ConfigValidationError, ContractError, DimensionError, NumericError, SingularConstraintError
from lagrangian import (
    ConvergenceDiagnostics,
    DualControllerState,
    GradientPair,
    approximation_gap,
    drift_report,
    dual_objective,
    dynamic_regret,
    estimate_smoothness,
    implicit_lambda_update,
    lambda_star,
    surgery_direction,
)


class TestClosedForm:

    def test_orthogonal_gradients_leave_direction_unchanged(self):
        pair = GradientPair([1.0, 0.0], [0.0, 1.0])
        assert lambda_star(pair, 1e-3) < 0
        np.testing.assert_array_equal(surgery_direction(pair, 1e-3), [1.0, 0.0])

    def test_conflict_activates_constraint(self):
        pair = GradientPair([1.0, 0.0], [-1.0, 1.0])
        epsilon = 0.1
        lam = lambda_star(pair, epsilon)
        assert lam == pytest.approx((1.0 - 0.1) / 2.0)
        d = surgery_direction(pair, epsilon)
        assert float(pair.g_pr @ d) == pytest.approx(-epsilon, abs=1e-15)

    def test_kkt_on_random_pairs(self, rng):
        for _ in range(500):
            dim = int(rng.integers(1, 9))
            pair = GradientPair(rng.uniform(-1, 1, dim), rng.uniform(-1, 1, dim))
            epsilon = float(rng.uniform(0.0, 0.5))
            d = surgery_direction(pair, epsilon)
            assert float(pair.g_pr @ d) >= -epsilon - 1e-12
            if lambda_star(pair, epsilon) > 0:
                assert abs(float(pair.g_pr @ d) + epsilon) < 1e-10 * max(1.0, abs(float(pair.g_er @ pair.g_pr)))

    def test_dual_minimum_at_projected_lambda(self, rng):
        for _ in range(50):
            pair = GradientPair(rng.standard_normal(4), rng.standard_normal(4))
            best = max(lambda_star(pair, 0.01), 0.0)
            grid = np.linspace(0.0, best + 3.0, 301)
            values = [dual_objective(pair, lam, 0.01) for lam in grid]
            assert dual_objective(pair, best, 0.01) <= min(values) + 1e-12

    def test_singular_constraint(self):
        with pytest.raises(SingularConstraintError):
            lambda_star(GradientPair([1.0, 2.0], [0.0, 0.0]), 1e-3)

    def test_pair_validation(self):
        with pytest.raises(DimensionError):
            GradientPair([1.0], [1.0, 2.0])
        with pytest.raises(NumericError):
            GradientPair([np.nan], [1.0])


class TestImplicitUpdate:

    def test_first_step_needs_previous_loss(self):
        with pytest.raises(ContractError):
            implicit_lambda_update(DualControllerState(), 1.0, 1.0)

    def test_rising_preservation_loss_raises_lambda(self):
        state = DualControllerState(lam=0.0, epsilon=0.01, beta=1.0, alpha=0.1, prev_pr_loss=1.0)
        state = implicit_lambda_update(state, 1.0, 1.1)
        assert state.lam == pytest.approx(0.99)
        assert state.history[-1].g_tilde == pytest.approx(-0.99)
        assert state.prev_pr_loss == 1.1

    def test_falling_loss_keeps_lambda_nonnegative(self):
        state = DualControllerState(lam=0.05, epsilon=0.01, beta=1.0, alpha=0.1, prev_pr_loss=1.0)
        state = implicit_lambda_update(state, 1.0, 0.5)
        assert state.lam == 0.0

    def test_state_validation(self):
        with pytest.raises(ConfigValidationError):
            DualControllerState(lam=-1.0)
        with pytest.raises(ConfigValidationError):
            DualControllerState(beta=0.0)

    def test_annotate_requires_history(self):
        with pytest.raises(ContractError):
            DualControllerState().annotate(l_er=1.0)
        state = DualControllerState().start_step().annotate(l_er=2.0)
        assert state.history[-1].l_er == 2.0 and state.step == 1


class TestDiagnostics:

    def test_gap_is_exact_for_linear_loss(self):
        w = np.array([1.0, -2.0])
        gap = approximation_gap(lambda th: float(w @ th), lambda th: w, np.zeros(2), np.array([0.3, 0.1]), 0.1, 1e-3, 0.0)
        assert gap.gap == pytest.approx(0.0, abs=1e-12)
        assert not gap.violated

    def test_gap_within_quadratic_bound(self, rng):
        A = np.diag([2.0, 0.5])
        for _ in range(20):
            theta, d = rng.standard_normal(2), rng.standard_normal(2)
            gap = approximation_gap(lambda th: 0.5 * th @ A @ th, lambda th: A @ th, theta, d, 0.05, 1e-3, 2.0)
            assert not gap.violated

    def test_smoothness_of_quadratic(self, rng):
        A = np.diag([3.0, 1.0])
        estimate = estimate_smoothness(lambda th: A @ th, np.zeros(2), 200, 1e-2, rng)
        assert 1.0 <= estimate <= 3.0 + 1e-9
        assert estimate > 2.5

    def test_bound_accumulates(self):
        diagnostics = ConvergenceDiagnostics(smoothness=2.0, epsilon=0.1, alpha=0.5)
        diagnostics.record(1.0, 0.0)
        diagnostics.record(3.0, 0.0)
        assert diagnostics.bound == pytest.approx([0.05 + 0.25, 0.1 + 0.25 * 4.0])
        assert diagnostics.min_stationarity() == [1.0, 1.0]

    def test_drift_report_counts_violations(self):
        diagnostics = ConvergenceDiagnostics(smoothness=0.0, epsilon=0.1, alpha=1.0)
        for drift in (0.05, 0.5, 0.2):
            diagnostics.record(0.0, drift)
        report = drift_report(diagnostics)
        assert report.violations == 1
        assert report.as_table().splitlines()[0].startswith("step\tdrift")

    def test_regret_nonnegative_and_zero_at_optimum(self, rng):
        pairs = [GradientPair(rng.standard_normal(3), rng.standard_normal(3)) for _ in range(10)]
        optimal = [max(lambda_star(p, 0.01), 0.0) for p in pairs]
        assert dynamic_regret(pairs, optimal, 0.01)[-1] == pytest.approx(0.0, abs=1e-12)
        regret = dynamic_regret(pairs, [0.5] * 10, 0.01)
        assert all(b >= a - 1e-12 for a, b in zip(regret, regret[1:]))
        with pytest.raises(DimensionError):
            dynamic_regret(pairs, [0.0], 0.01)
