"""Template-assignment solvers: hard vertex LP, smoothed closed form, oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdkit.assignment import (
    AssignmentProblem,
    AssignmentSolution,
    bn_relu_assignment,
    normalized_bn_relu_assignment,
    oracle_smooth,
    solve_hard,
    solve_smooth,
    taylor_gap,
)
from kdkit.tensor import BatchNormState, Tensor


def is_vertex(sol: AssignmentSolution) -> bool:
    vals = np.append(sol.p, sol.q)
    return np.isclose(vals.sum(), 1.0) and set(np.round(vals, 12)) <= {0.0, 1.0}


class TestHardSolver:
    def test_unique_max_above_threshold(self):
        sol = solve_hard(AssignmentProblem(a=[0.9, 0.2], mu=0.5))
        assert np.array_equal(sol.p, [1.0, 0.0]) and sol.q == 0.0

    def test_no_kernel_clears_threshold(self):
        sol = solve_hard(AssignmentProblem(a=[0.3, 0.2], mu=0.5))
        assert np.array_equal(sol.p, [0.0, 0.0]) and sol.q == 1.0

    def test_tie_goes_to_rejection(self):
        sol = solve_hard(AssignmentProblem(a=[0.7, 0.7], mu=0.7))
        assert sol.q == 1.0

    def test_kernel_tie_goes_to_lowest_index(self):
        sol = solve_hard(AssignmentProblem(a=[0.8, 0.8], mu=0.1))
        assert np.array_equal(sol.p, [1.0, 0.0])

    @given(st.integers(1, 16), st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_always_vertex_and_optimal(self, k, seed):
        rng = np.random.default_rng(seed)
        prob = AssignmentProblem(a=rng.normal(size=k), mu=float(rng.normal()))
        sol = solve_hard(prob)
        assert is_vertex(sol)
        value = sol.q * prob.mu + sol.p @ prob.a
        assert value == pytest.approx(max(float(prob.a.max()), prob.mu), abs=1e-12)


class TestSmoothSolver:
    def test_three_way_symmetry(self):
        sol = solve_smooth(AssignmentProblem(a=[0.0, 0.0], mu=0.0, epsilon=1.0))
        assert np.abs(sol.p - 1.0 / 3.0).max() < 1e-12
        assert sol.q == pytest.approx(1.0 / 3.0)

    def test_ln2_case(self):
        sol = solve_smooth(AssignmentProblem(a=[np.log(2.0), 0.0], mu=0.0, epsilon=1.0))
        assert np.abs(sol.p - [0.5, 0.25]).max() < 1e-12
        assert sol.q == pytest.approx(0.25)

    def test_hard_limit_at_large_epsilon(self):
        prob = AssignmentProblem(a=[0.9, 0.2], mu=0.5, epsilon=100.0)
        tv = solve_smooth(prob).total_variation(solve_hard(prob))
        assert tv < 1e-3

    def test_stabilized_against_overflow(self):
        sol = solve_smooth(AssignmentProblem(a=[500.0, 0.0], mu=0.0, epsilon=10.0))
        assert np.isfinite(sol.p).all()
        assert sol.p[0] == pytest.approx(1.0)

    def test_rejects_nonpositive_epsilon(self):
        with pytest.raises(ValueError):
            solve_smooth(AssignmentProblem(a=[0.0], mu=0.0, epsilon=0.0))

    @given(st.integers(1, 16), st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_mass_conservation(self, k, seed):
        rng = np.random.default_rng(seed)
        prob = AssignmentProblem(a=rng.normal(size=k), mu=float(rng.normal()),
                                 epsilon=float(rng.uniform(0.1, 50.0)))
        sol = solve_smooth(prob)
        assert sol.p.sum() + sol.q == pytest.approx(1.0, abs=1e-12)
        assert np.all(sol.p > 0.0) and sol.q > 0.0


class TestOracle:
    def test_symmetric_case(self):
        sol = oracle_smooth(AssignmentProblem(a=[0.0, 0.0], mu=0.0, epsilon=1.0))
        assert np.abs(sol.p - 1.0 / 3.0).max() < 1e-8
        assert sol.q == pytest.approx(1.0 / 3.0, abs=1e-8)

    def test_degenerate_k1_tie(self):
        sol = oracle_smooth(AssignmentProblem(a=[0.3], mu=0.3, epsilon=1.0))
        assert sol.p[0] == pytest.approx(0.5, abs=1e-8)
        assert sol.q == pytest.approx(0.5, abs=1e-8)

    def test_agrees_with_closed_form(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            k = int(rng.integers(1, 17))
            prob = AssignmentProblem(a=rng.uniform(-3, 3, size=k),
                                     mu=float(rng.uniform(-3, 3)),
                                     epsilon=float(rng.uniform(0.1, 50.0)))
            a = solve_smooth(prob)
            b = oracle_smooth(prob)
            assert np.abs(a.p - b.p).max() < 1e-6
            assert abs(a.q - b.q) < 1e-6


class TestBnReluSurrogate:
    def test_whitened_pair(self):
        state = BatchNormState(1, eps=0.0)
        out = bn_relu_assignment(Tensor(np.array([[1.0], [3.0]])), state, "train")
        assert np.array_equal(out.data.ravel(), [0.0, 1.0])

    def test_large_negative_shift_rejects_all(self):
        state = BatchNormState(2)
        state.beta.data = np.full(2, -100.0)
        out = bn_relu_assignment(Tensor(np.random.default_rng(0).normal(size=(8, 2))),
                                 state, "train")
        assert np.all(out.data == 0.0)

    def test_threshold_support(self):
        rng = np.random.default_rng(1)
        state = BatchNormState(3, eps=0.0)
        state.gamma.data = np.array([1.0, 2.0, 0.5])
        state.beta.data = np.array([-0.5, 0.3, 0.0])
        x = rng.normal(size=(64, 3))
        out = bn_relu_assignment(Tensor(x), state, "train")
        xhat = (x - x.mean(axis=0)) / x.std(axis=0)
        expect_zero = state.gamma.data * xhat + state.beta.data <= 0.0
        assert np.array_equal(out.data == 0.0, expect_zero)

    def test_normalized_view_rows_sum_to_one_or_zero(self):
        state = BatchNormState(4)
        x = np.random.default_rng(2).normal(size=(32, 4))
        rows = normalized_bn_relu_assignment(Tensor(x), state, "train")
        sums = rows.sum(axis=-1)
        assert np.all((np.abs(sums - 1.0) < 1e-12) | (sums == 0.0))


class TestTaylorGap:
    def test_zero(self):
        assert taylor_gap(0.0) == 0.0

    def test_analytic_point(self):
        assert taylor_gap(0.1) == pytest.approx(np.exp(0.1) - 1.1, abs=1e-15)

    def test_sup_on_small_interval(self):
        grid = np.linspace(-0.1, 0.1, 2001)
        gaps = [taylor_gap(float(a)) for a in grid]
        assert max(gaps) == gaps[-1]  # convexity puts the sup at the boundary
        assert max(gaps) <= 0.0052
