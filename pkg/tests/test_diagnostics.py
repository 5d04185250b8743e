from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldpsgd.datagen import LINEAR, SyntheticDesign, design_chunks, sample_dataset
from ldpsgd.diagnostics import (
    Trajectory,
    bound_shaped_series,
    default_window,
    estimate_rate,
    flag_nonconvergent,
    loss_gap,
    param_distance,
    relative_order,
    rate_exponents,
    tail_nonincreasing,
    theoretical_relative_orders,
)
from ldpsgd.errors import ConfigurationError, DomainError
from ldpsgd.losses import HuberScaleLoss
from ldpsgd.numerics import RngHandle
from ldpsgd.optimizer import StepSchedule, log_checkpoints, run_batch
from ldpsgd.privacy import GDP, PrivacyBudget


def test_param_distance():
    assert param_distance([1.0, 2.0], [0.0, 0.0]) == 5.0
    np.testing.assert_allclose(param_distance(np.ones((3, 2)), np.zeros(2)), [2, 2, 2])
    with pytest.raises(ConfigurationError):
        param_distance(np.ones(3), np.ones(2))


@given(st.floats(-2.0, 0.5), st.floats(0.01, 100))
def test_rate_fit_exact_power_law(slope, scale):
    n = log_checkpoints(100_000)
    fit = estimate_rate(n, scale * n.astype(float) ** slope)
    assert fit.slope == pytest.approx(slope, abs=1e-9)
    if abs(slope) > 1e-3:
        assert fit.r2 == pytest.approx(1.0, abs=1e-9)
    assert fit.window == (10_000, 100_000)


def test_rate_fit_requires_points_and_positivity():
    n = log_checkpoints(100_000)
    with pytest.raises(DomainError):
        estimate_rate(n, np.where(n > 50_000, -1.0, 1.0))
    with pytest.raises(DomainError):
        estimate_rate(n, n ** -0.5, window=(90_000, 100_000))
    assert default_window([10, 500, 1000]) == (100, 1000)


def test_rate_exponents_and_relative_orders():
    assert rate_exponents(0.5) == {"delta": 0.5, "delta_bar": 1.0, "gap": 0.25, "gap_bar": 0.5}
    assert rate_exponents(0.25)["gap"] is None
    r, R = theoretical_relative_orders(0.4)
    assert r == pytest.approx(0.4) and R == pytest.approx(0.3)
    assert theoretical_relative_orders(0.6) == pytest.approx((0.4, 0.1))
    assert theoretical_relative_orders(0.8) == pytest.approx((0.2, 0.0))
    with pytest.raises(DomainError):
        rate_exponents(1.0)


@pytest.mark.parametrize("alpha", [0.3, 0.4, 0.6, 0.8])
def test_bound_shaped_series_relative_order(alpha):
    # the psi term carries log factors at alpha = 1/2 only; elsewhere the fit is close
    n = np.geomspace(1e8, 1e9, 30)
    delta, delta_bar = bound_shaped_series(alpha, n)
    r, _ = theoretical_relative_orders(alpha)
    assert relative_order(n, delta, delta_bar) == pytest.approx(r, abs=0.03)


def test_tail_and_flag():
    se = np.full(10, 0.01)
    assert tail_nonincreasing(np.linspace(1, 0.5, 10), se, 5)
    assert not tail_nonincreasing(np.r_[np.ones(9), 2.0], se, 5)
    n = log_checkpoints(100_000)
    assert flag_nonconvergent(estimate_rate(n, n ** -0.05))
    assert not flag_nonconvergent(estimate_rate(n, n ** -0.5))


def test_loss_gap_batched_and_nonnegative_in_population():
    design = SyntheticDesign(LINEAR, d=2)
    loss = HuberScaleLoss(3)
    X, y = sample_dataset(design, RngHandle(0), 200_000)
    thetas = design.theta_star + np.array([[0.0] * 4, [0.3, 0, 0, 0], [0, 0, 0, 0.5]])
    gaps = loss_gap(thetas, design.theta_star, loss, X, y)
    assert gaps.shape == (3,)
    assert gaps[0] == 0.0 and np.all(gaps[1:] > 0)
    with pytest.raises(DomainError):
        loss_gap(thetas, design.theta_star, loss, X[:0], y[:0])


def test_trajectory_from_run_and_csv(tmp_path):
    design = SyntheticDesign(LINEAR, d=2)
    loss = HuberScaleLoss(3)
    cps = log_checkpoints(2000, 12)
    res = run_batch(loss, StepSchedule(0.2, 0.5), PrivacyBudget.gdp(2.0), GDP,
                    [design_chunks(design, RngHandle(0, (r,)), 2000) for r in range(4)], cps,
                    [RngHandle(1, (r,)) for r in range(4)])
    holdout = sample_dataset(design, RngHandle(2), 3000)
    traj = Trajectory.from_run(res, design.theta_star, loss, holdout)
    d = param_distance(res.thetas, design.theta_star)
    np.testing.assert_allclose(traj.theta_dist, d.mean(axis=0))
    np.testing.assert_allclose(traj.theta_dist_se, d.std(axis=0, ddof=1) / 2)
    assert traj.replications == 4
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("n,delta,delta_se,delta_bar")
    assert len(lines) == len(cps) + 1
    assert traj.gap_flags().dtype == bool
