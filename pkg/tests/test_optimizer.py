from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldpsgd.datagen import LINEAR, Chunk, LabeledExample, SyntheticDesign, design_chunks
from ldpsgd.errors import ConfigurationError, DomainError, TruncatedRunError
from ldpsgd.losses import BoundedLoss, HuberScaleLoss, LogisticLoss
from ldpsgd.numerics import RngHandle
from ldpsgd.optimizer import (
    NOISE_BLOCK,
    FixedBudget,
    NoiseStream,
    OptimizerState,
    PerIndividualBudget,
    StepSchedule,
    ldp_sgd_step,
    log_checkpoints,
    rechunk,
    run_batch,
    run_stream,
    step_size,
    update_average,
)
from ldpsgd.privacy import GDP, LAPLACE, PrivacyBudget


class Quadratic(BoundedLoss):
    """0.5 (theta - y)^2 in one dimension; c0 is nominal."""

    name = "quadratic"
    dim = 1
    n_features = 1
    c0 = 1.0

    def value(self, theta, x, y):
        return 0.5 * (np.asarray(theta)[..., 0] - y) ** 2

    def grad(self, theta, x, y):
        return (np.asarray(theta)[..., 0] - y)[..., None]


def test_step_size():
    s = StepSchedule(0.5, 0.5)
    assert step_size(s, 1) == 0.5
    assert s(4) == 0.25
    with pytest.raises(DomainError):
        s(0)
    with pytest.raises(DomainError):
        StepSchedule(0.0, 0.5)
    with pytest.raises(DomainError):
        StepSchedule(1.0, 1.5)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
def test_running_average_is_mean(values):
    bar = None
    for i, v in enumerate(values, start=1):
        bar = update_average(bar, np.array([v]), i)
    assert bar[0] == pytest.approx(np.mean(values), rel=1e-9, abs=1e-9)


def test_scalar_reference_loop():
    n = 3000
    ys = np.random.default_rng(0).normal(size=n)
    sched = StepSchedule(0.7, 0.6)
    rng = RngHandle(3, ("noise",))
    budget = PrivacyBudget.gdp(1.5)
    res = run_batch(Quadratic(), sched, budget, GDP, [[(np.ones((n, 1)), ys)]],
                    [n], [rng], keep_history=True)
    # independent loop in plain floats
    ns = NoiseStream(GDP, 1, FixedBudget(budget), rng)
    theta, bar = 0.0, 0.0
    for i in range(1, n + 1):
        unit, scale, *_ = ns.block((i - 1) // NOISE_BLOCK)
        w = unit[(i - 1) % NOISE_BLOCK, 0] * scale[(i - 1) % NOISE_BLOCK]
        eta = 0.7 * i ** -0.6
        theta = theta - eta * (theta - ys[i - 1]) + eta * 1.0 * w
        bar = bar * (i - 1) / i + theta / i
    assert res.final_theta[0, 0] == pytest.approx(theta, rel=1e-12)
    assert res.final_theta_bar[0, 0] == pytest.approx(bar, rel=1e-12)
    assert res.history[0, :, 0].mean() == pytest.approx(bar, rel=1e-10)


def test_single_step_matches_batch():
    design = SyntheticDesign(LINEAR, d=3)
    loss = HuberScaleLoss(4)
    n = 2100
    rng = RngHandle(5, ("noise",))
    budget = PrivacyBudget.gdp(2.0)
    sched = StepSchedule(0.2, 0.5)
    res = run_batch(loss, sched, budget, GDP, [design_chunks(design, RngHandle(1), n)], [n], [rng])
    ns = NoiseStream(GDP, loss.dim, FixedBudget(budget), rng)
    state = OptimizerState.start(np.zeros(loss.dim))
    i = 0
    for chunk in design_chunks(design, RngHandle(1), n):
        for ex in chunk.examples():
            unit, scale, *_ = ns.block(i // NOISE_BLOCK)
            noise = unit[i % NOISE_BLOCK] * scale[i % NOISE_BLOCK]
            state = ldp_sgd_step(state, ex, loss, sched, GDP, budget, noise=noise)
            i += 1
    np.testing.assert_allclose(state.theta, res.final_theta[0], rtol=1e-12)
    np.testing.assert_allclose(state.theta_bar, res.final_theta_bar[0], rtol=1e-12)
    assert state.ledger == res.ledgers[0]
    assert state.ledger.count == n


def test_zero_multiplier_is_plain_sgd():
    design = SyntheticDesign(LINEAR, d=5)
    loss = HuberScaleLoss(6)
    n = 5000
    kw = dict(checkpoints=[n], keep_history=True)
    private = run_batch(loss, StepSchedule(0.2, 0.5), PrivacyBudget.gdp(2.0), GDP,
                        [design_chunks(design, RngHandle(0, (r,)), n) for r in range(2)],
                        rngs=[RngHandle(9, (r,)) for r in range(2)], c0=0.0, **kw)
    plain = run_batch(loss, StepSchedule(0.2, 0.5), None, None,
                      [design_chunks(design, RngHandle(0, (r,)), n) for r in range(2)], rngs=None, **kw)
    assert private.history.tobytes() == plain.history.tobytes()
    assert plain.ledgers[0].count == 0
    assert private.ledgers[0].count == n


def test_grad_calls_and_history_average():
    design = SyntheticDesign(LINEAR, d=2)
    loss = HuberScaleLoss(3)
    n = 1500
    cps = [10, 100, 1500]
    res = run_batch(loss, StepSchedule(0.3, 0.5), PrivacyBudget.gdp(1.0), GDP,
                    [design_chunks(design, RngHandle(2), n)], cps, [RngHandle(4)], keep_history=True)
    assert res.grad_calls == n
    for k, c in enumerate(cps):
        np.testing.assert_allclose(res.thetas[0, k], res.history[0, c - 1])
        np.testing.assert_allclose(res.theta_bars[0, k], res.history[0, :c].mean(axis=0), rtol=1e-10)


def test_averaging_leaves_ledger_and_iterates_unchanged():
    design = SyntheticDesign(LINEAR, d=2)
    loss = HuberScaleLoss(3)
    args = (loss, StepSchedule(0.3, 0.5), PrivacyBudget.gdp(1.0), GDP)
    a = run_batch(*args, [design_chunks(design, RngHandle(2), 900)], [900], [RngHandle(4)], average=True)
    b = run_batch(*args, [design_chunks(design, RngHandle(2), 900)], [900], [RngHandle(4)], average=False)
    assert a.ledgers == b.ledgers
    np.testing.assert_array_equal(a.thetas, b.thetas)
    assert b.theta_bars is None


def test_prefix_and_replication_isolation():
    design = SyntheticDesign(LINEAR, d=3)
    loss = HuberScaleLoss(4)
    args = (loss, StepSchedule(0.2, 0.5), PrivacyBudget.gdp(2.0), GDP)
    short = run_batch(*args, [design_chunks(design, RngHandle(0, (r,)), 3000) for r in range(3)],
                      [1000, 3000], [RngHandle(1, (r,)) for r in range(3)])
    long = run_batch(*args, [design_chunks(design, RngHandle(0, (2,)), 6000)],
                     [1000, 3000, 6000], [RngHandle(1, (2,))])
    np.testing.assert_array_equal(short.thetas[2], long.thetas[0, :2])


def test_per_individual_budgets_in_ledger():
    design = SyntheticDesign(LINEAR, d=3)
    loss = HuberScaleLoss(4)
    src = PerIndividualBudget.uniform(GDP, 1.0, 2.0)
    res = run_batch(loss, StepSchedule(0.2, 0.5), src, GDP, [design_chunks(design, RngHandle(0), 2500)],
                    [2500], [RngHandle(1)])
    led = res.ledgers[0]
    assert led.count == 2500 and 1.9 < led.max_mu <= 2.0 and led.family == "gdp"


def test_truncated_stream_reports_partial():
    design = SyntheticDesign(LINEAR, d=3)
    loss = HuberScaleLoss(4)
    with pytest.raises(TruncatedRunError) as info:
        run_batch(loss, StepSchedule(0.2, 0.5), PrivacyBudget.gdp(2.0), GDP,
                  [design_chunks(design, RngHandle(0), 1500)], [1000, 2000], [RngHandle(1)])
    partial = info.value.partial
    assert partial.ledgers[0].count == 1500
    assert list(partial.checkpoints) == [1000]
    assert partial.grad_calls == 1500


def test_configuration_errors():
    design = SyntheticDesign(LINEAR, d=3)
    with pytest.raises(ConfigurationError):
        run_batch(HuberScaleLoss(5), StepSchedule(0.2, 0.5), PrivacyBudget.gdp(1.0), GDP,
                  [design_chunks(design, RngHandle(0), 100)], [100], [RngHandle(1)])
    with pytest.raises(ConfigurationError):
        run_batch(LogisticLoss(4, weighted=False), StepSchedule(0.2, 0.5), PrivacyBudget.gdp(1.0), GDP,
                  [design_chunks(design, RngHandle(0), 100)], [100], [RngHandle(1)])
    with pytest.raises(ConfigurationError):
        run_batch(HuberScaleLoss(4), StepSchedule(0.2, 0.5), PrivacyBudget.gdp(1.0), LAPLACE,
                  [design_chunks(design, RngHandle(0), 100)], [100], [RngHandle(1)])
    with pytest.raises(ConfigurationError):
        run_batch(HuberScaleLoss(4), StepSchedule(0.2, 0.5), None, None,
                  [design_chunks(design, RngHandle(0), 100)], [50, 50], None)


def test_run_stream_accepts_examples():
    design = SyntheticDesign(LINEAR, d=2)
    examples = (ex for c in design_chunks(design, RngHandle(0), 700) for ex in c.examples())
    res, ledger = run_stream(HuberScaleLoss(3), StepSchedule(0.2, 0.5), PrivacyBudget.gdp(1.0), GDP,
                             examples, [700], RngHandle(3))
    assert ledger.count == 700 and res.thetas.shape == (1, 1, 4)


def test_rechunk_and_checkpoints():
    chunks = [Chunk(np.ones((3, 2)), np.zeros(3)), LabeledExample(np.ones(2), 1.0), Chunk(np.ones((5, 2)), np.ones(5))]
    sizes = [len(c) for c in rechunk(chunks, 4)]
    assert sizes == [4, 4, 1]
    cps = log_checkpoints(100_000)
    assert cps[0] == 10 and cps[-1] == 100_000 and np.all(np.diff(cps) > 0)
