from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from mentored.errors import DegenerateFit
from mentored.theory_sim import (
    SOFTMAX_SCORE_BOUND,
    CostMode,
    MdpSpec,
    RewardChainMdp,
    TabularPolicy,
    TabularSoftmaxPolicy,
    VarianceParams,
    bc_bound,
    bc_nll,
    bounds_csv,
    bounds_grid,
    derive_seed,
    estimate_gradient_variance,
    fit_growth_exponent,
    make_adversarial_mdp,
    pg_samples,
    score_bound,
    simulate_cost,
    variance_bound,
    variance_csv,
    variance_study,
)
from mentored.traj_model import PolicyRole

EPISODES = 200_000


def closed_form_compounding_cost(horizon: int, eps: float) -> float:
    """Expected cost when one slip derails everything after it.

    A first deviation at step t leaves the remaining horizon - t steps
    in the penalty state; summing the geometric first-slip law gives
    horizon - (1 - (1 - eps)**horizon) / eps.
    """
    if eps == 0.0:
        return 0.0
    return horizon - (1.0 - (1.0 - eps) ** horizon) / eps


def analytic_trace_variance(
    horizon: int, k: int, gamma: float, r_max: float = 1.0, w: float = 0.5
) -> float:
    """Exact trace of the truncated-gradient covariance on the chain.

    Per step the two score coordinates are +/- (indicator - 1/2) * G_t,
    so each contributes identically and the step-t variance pair sums to
    0.5 * (E[G_t^2] - (r_max * w)^2) under the uniform policy.
    """
    mix = w * w + (1.0 - w) * (1.0 - w)
    total = 0.0
    for t in range(k, horizon + 1):
        remaining = horizon - t + 1
        second_moment = (
            r_max * r_max * mix * (1.0 - gamma ** (2 * remaining)) / (1.0 - gamma * gamma)
        )
        total += 0.5 * (second_moment - (r_max * w) ** 2)
    return total


def test_mdp_spec_validation():
    with pytest.raises(ValueError):
        MdpSpec(horizon=0, absorbing=True, transition=((0, 1), (1, 1)), cost=((0, 0), (1, 1)))
    with pytest.raises(ValueError):
        MdpSpec(horizon=2, absorbing=True, transition=((0, 5), (1, 1)), cost=((0, 0), (1, 1)))
    with pytest.raises(ValueError):
        MdpSpec(horizon=2, absorbing=True, transition=((0, 1), (1, 1)), cost=((0, -1), (1, 1)))


def test_adversarial_mdp_shapes():
    absorbing = make_adversarial_mdp(5, with_absorbing=True)
    assert absorbing.absorbing
    # Once off the path there is no way back.
    assert absorbing.transition[1] == (1, 1)
    # The penalty is charged for being off the path, not for the slip itself.
    assert absorbing.cost[0] == (0.0, 0.0)
    assert absorbing.cost[1] == (1.0, 1.0)

    recoverable = make_adversarial_mdp(5, with_absorbing=False)
    assert not recoverable.absorbing
    # Each slip costs exactly once regardless of state.
    assert recoverable.cost[0] == (0.0, 1.0)
    assert recoverable.transition[0] == (0, 0)


def test_compounding_cost_matches_closed_form():
    mdp = make_adversarial_mdp(10, with_absorbing=True)
    estimate = simulate_cost(CostMode.BC_STUDENT, mdp, 0.02, EPISODES, seed=7)
    expected = closed_form_compounding_cost(10, 0.02)
    assert expected == pytest.approx(0.8536403443773342)
    assert abs(estimate.mean - expected) <= 3 * estimate.ci95_halfwidth
    assert estimate.episodes == EPISODES


def test_recoverable_cost_is_linear_in_horizon():
    mdp = make_adversarial_mdp(10, with_absorbing=False)
    estimate = simulate_cost(CostMode.OWN_DIST_STUDENT, mdp, 0.02, EPISODES, seed=7)
    assert abs(estimate.mean - 10 * 0.02) <= 3 * estimate.ci95_halfwidth


def test_expert_and_zero_eps_pay_nothing():
    mdp = make_adversarial_mdp(6, with_absorbing=True)
    expert = simulate_cost(CostMode.EXPERT, mdp, 0.3, 1000, seed=0)
    assert expert.mean == 0.0
    assert expert.ci95_halfwidth == 0.0
    student = simulate_cost(CostMode.BC_STUDENT, mdp, 0.0, 1000, seed=0)
    assert student.mean == 0.0


def test_single_episode_has_unbounded_ci():
    mdp = make_adversarial_mdp(4, with_absorbing=True)
    estimate = simulate_cost(CostMode.BC_STUDENT, mdp, 0.5, 1, seed=3)
    assert estimate.ci95_halfwidth == math.inf
    assert 0.0 <= estimate.mean <= 4.0


def test_simulate_cost_is_deterministic_across_jobs():
    mdp = make_adversarial_mdp(8, with_absorbing=True)
    # 70_000 episodes span two chunks, so threads actually split the work.
    a = simulate_cost(CostMode.BC_STUDENT, mdp, 0.05, 70_000, seed=11, jobs=1)
    b = simulate_cost(CostMode.BC_STUDENT, mdp, 0.05, 70_000, seed=11, jobs=4)
    assert a.mean == b.mean
    assert a.ci95_halfwidth == b.ci95_halfwidth
    c = simulate_cost(CostMode.BC_STUDENT, mdp, 0.05, 70_000, seed=12, jobs=1)
    assert c.mean != a.mean


def test_cost_bounds():
    assert bc_bound(10, 0.01, 0.0) == pytest.approx(0.45)
    assert score_bound(10, 0.01, 0.0) == pytest.approx(0.1)
    # The expert's own cost rides on top.
    assert bc_bound(10, 0.01, 1.5) == pytest.approx(1.95)
    assert score_bound(10, 0.01, 1.5) == pytest.approx(1.6)


def test_fit_growth_exponent_on_exact_series():
    quad = [(h, bc_bound(h, 0.005, 0.0)) for h in (4, 8, 16, 32)]
    assert fit_growth_exponent(quad) == pytest.approx(2.1207237102548073, abs=1e-12)
    linear = [(h, 0.005 * h) for h in (4, 8, 16, 32)]
    assert fit_growth_exponent(linear) == pytest.approx(1.0, abs=1e-12)
    cubic = [(h, float(h) ** 3) for h in (2, 4, 8)]
    assert fit_growth_exponent(cubic) == pytest.approx(3.0, abs=1e-12)


def test_fit_growth_exponent_rejects_degenerate_input():
    with pytest.raises(DegenerateFit):
        fit_growth_exponent([(2, 1.0), (4, 2.0)])
    with pytest.raises(DegenerateFit):
        fit_growth_exponent([(2, 1.0), (4, 0.0), (8, 2.0)])
    with pytest.raises(DegenerateFit):
        fit_growth_exponent([(4, 1.0), (4, 2.0), (4, 3.0)])


def test_variance_bound_frozen_values():
    # H=8, gamma=0.9 reference values, four decimals.
    expected = [1652.2107, 1062.3027, 635.7957, 345.5347, 163.7688, 62.9442, 16.8200, 2.0]
    for k, want in zip(range(1, 9), expected):
        params = VarianceParams(
            gamma=0.9, r_max=1.0, g_max=SOFTMAX_SCORE_BOUND, horizon=8, k=k
        )
        assert variance_bound(params) == pytest.approx(want, abs=5e-4)


def test_variance_bound_collapses_exactly_at_last_step():
    params = VarianceParams(
        gamma=0.9, r_max=1.0, g_max=SOFTMAX_SCORE_BOUND, horizon=8, k=8
    )
    assert variance_bound(params) == params.c  # exact float equality

    bounds = [
        variance_bound(
            VarianceParams(
                gamma=0.9, r_max=1.0, g_max=SOFTMAX_SCORE_BOUND, horizon=8, k=k
            )
        )
        for k in range(1, 9)
    ]
    assert all(earlier > later for earlier, later in zip(bounds, bounds[1:]))


def test_variance_params_validation():
    good = dict(gamma=0.9, r_max=1.0, g_max=1.0, horizon=4, k=2)
    VarianceParams(**good)
    with pytest.raises(ValueError):
        VarianceParams(**{**good, "gamma": 1.0})
    with pytest.raises(ValueError):
        VarianceParams(**{**good, "gamma": 0.0})
    with pytest.raises(ValueError):
        VarianceParams(**{**good, "k": 5})
    with pytest.raises(ValueError):
        VarianceParams(**{**good, "r_max": 0.0})
    with pytest.raises(ValueError):
        VarianceParams(**{**good, "g_max": -1.0})


def test_gradient_variance_matches_analytic_trace():
    assert analytic_trace_variance(8, 1, 0.9) == pytest.approx(4.956334039452903)
    assert analytic_trace_variance(8, 8, 0.9) == pytest.approx(0.125)

    mdp = RewardChainMdp(horizon=8)
    policy = TabularSoftmaxPolicy.uniform(8)
    for k in (1, 4, 8):
        estimate = estimate_gradient_variance(mdp, policy, k, 0.9, 60_000, seed=13)
        want = analytic_trace_variance(8, k, 0.9)
        slack = 3 * estimate.ci95_halfwidth + 1e-3  # k=H has a ~zero-width CI
        assert abs(estimate.var_trace - want) <= slack


def test_truncation_keeps_gradient_mean_when_early_rewards_are_zero():
    # With rewards silenced before step 3, starting the sum at k<=3 only
    # adds coordinates whose expectation is zero.
    mdp = RewardChainMdp(horizon=6, zero_before=3)
    policy = TabularSoftmaxPolicy.uniform(6)
    samples = 80_000
    full = np.array(
        [s.gradient for s in pg_samples(mdp, policy, 1, 0.9, samples, seed=5)]
    )
    truncated = np.array(
        [s.gradient for s in pg_samples(mdp, policy, 3, 0.9, samples, seed=6)]
    )
    sem = full.std(axis=0, ddof=1) / math.sqrt(samples) + truncated.std(
        axis=0, ddof=1
    ) / math.sqrt(samples)
    gap = np.abs(full.mean(axis=0) - truncated.mean(axis=0))
    assert np.all(gap <= 4 * sem + 1e-9)
    # The pre-truncation coordinates of the full estimator average to zero.
    early = full[:, : 2 * 2]
    early_sem = early.std(axis=0, ddof=1) / math.sqrt(samples)
    assert np.all(np.abs(early.mean(axis=0)) <= 4 * early_sem)


def test_pg_samples_shape_and_determinism():
    mdp = RewardChainMdp(horizon=4)
    policy = TabularSoftmaxPolicy.uniform(4)
    first = pg_samples(mdp, policy, 2, 0.9, 50, seed=21)
    again = pg_samples(mdp, policy, 2, 0.9, 50, seed=21)
    assert first == again
    assert len(first) == 50
    sample = first[0]
    assert len(sample.gradient) == 8
    assert len(sample.returns) == 4
    # Truncation zeroes the coordinates before k.
    assert sample.gradient[0] == 0.0 and sample.gradient[1] == 0.0
    other = pg_samples(mdp, policy, 2, 0.9, 50, seed=22)
    assert first != other


def test_estimate_gradient_variance_needs_two_samples():
    mdp = RewardChainMdp(horizon=3)
    policy = TabularSoftmaxPolicy.uniform(3)
    with pytest.raises(ValueError):
        estimate_gradient_variance(mdp, policy, 1, 0.9, 1, seed=0)


def test_bc_nll_known_values(caplog):
    coin = TabularPolicy(role=PolicyRole.STUDENT, deviation_rate=0.5)
    dataset = [((1, 0), 0), ((2, 0), 1)]
    assert bc_nll(dataset, coin) == pytest.approx(math.log(2.0))

    sure = TabularPolicy(role=PolicyRole.STUDENT, deviation_rate=0.0)
    assert bc_nll([((1, 0), 0)], sure) == 0.0

    with caplog.at_level(logging.WARNING, logger="mentored.theory_sim"):
        clamped = bc_nll([((1, 0), 1)], sure)
    assert clamped == pytest.approx(-math.log(1e-12))
    assert any("clamp" in r.message for r in caplog.records)

    with pytest.raises(ValueError):
        bc_nll([], coin)
    with pytest.raises(ValueError):
        bc_nll([((1, 0), 7)], coin)


def test_derive_seed_separates_branches():
    assert derive_seed(42, 1) == derive_seed(42, 1)
    assert derive_seed(42, 1) != derive_seed(42, 2)
    assert derive_seed(42, 1, 0) != derive_seed(42, 1, 1)
    assert 0 <= derive_seed(0) < 2 ** 32


def test_bounds_grid_and_csv_layout():
    rows = bounds_grid([2, 4], [0.02], episodes=5_000, seed=3)
    assert len(rows) == 4  # two horizons x one eps x two modes
    lines = bounds_csv(rows)
    assert lines[0] == "H,eps,mode,mean,ci95,bound"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert first[0] == "2"
    assert first[2] == "bc_student"
    # repr round-trip: the CSV loses no precision.
    assert float(first[3]) == rows[0].mean
    assert float(first[5]) == rows[0].bound
    modes = [line.split(",")[2] for line in lines[1:]]
    assert modes == ["bc_student", "own_dist_student"] * 2


def test_variance_study_and_csv_layout():
    rows = variance_study(4, 0.9, [1, 4], samples=4_000, seed=9)
    assert [r.k for r in rows] == [1, 4]
    assert rows[0].var_trace > rows[1].var_trace
    assert rows[0].bound > rows[1].bound
    assert rows[1].var_trace <= rows[1].bound
    lines = variance_csv(rows)
    assert lines[0] == "H,k,gamma,var_trace,var_norm2,bound"
    assert len(lines) == 3
    cells = lines[1].split(",")
    assert cells[0] == "4" and cells[1] == "1"
    assert float(cells[3]) == rows[0].var_trace
