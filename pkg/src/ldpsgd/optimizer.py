"""One-pass locally private SGD and its Polyak-Ruppert average.

Each step is ``theta_i = theta_{i-1} - eta_i * grad + eta_i * C0 * omega_i``,
with ``omega_i`` drawn for individual ``i``'s own budget. The running mean of
``theta_1 .. theta_i`` is post-processing and never touches the ledger.

``run_batch`` advances R independent replications in lockstep as an ``(R, p)``
array; ``run_stream`` is the single-replication case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .datagen import CHUNK, Chunk, LabeledExample
from .errors import ConfigurationError, DomainError, TruncatedRunError
from .losses import BoundedLoss
from .numerics import RngHandle
from .privacy import (
    APPROX,
    GDP,
    PURE,
    NoiseMechanism,
    PrivacyBudget,
    PrivacyLedger,
    draw_unit,
    noise_scale,
    sample_noise,
)

NOISE_BLOCK = 1024


@dataclass(frozen=True)
class StepSchedule:
    eta: float
    alpha: float

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError("initial step size must be positive")
        if not 0 <= self.alpha <= 1:
            raise DomainError("decay exponent must lie in [0, 1]")

    def __call__(self, i: int) -> float:
        return step_size(self, i)


def step_size(sched: StepSchedule, i: int) -> float:
    if i < 1:
        raise DomainError("iterations are 1-based")
    return sched.eta * float(i) ** (-sched.alpha)


def update_average(theta_bar_prev, theta_new, i: int):
    """Running Polyak-Ruppert mean after ``i`` iterates."""
    if i < 1:
        raise DomainError("iterations are 1-based")
    if i == 1:
        return np.array(theta_new, dtype=float, copy=True)
    return ((i - 1) / i) * theta_bar_prev + theta_new / i


# -- budgets -----------------------------------------------------------------

@dataclass(frozen=True)
class FixedBudget:
    budget: PrivacyBudget

    @property
    def kind(self) -> str:
        return self.budget.kind

    def draw(self, gen: np.random.Generator | None, count: int):
        b = self.budget
        return (np.full(count, b.eps), np.full(count, b.delta), np.full(count, b.mu))


@dataclass(frozen=True)
class PerIndividualBudget:
    """Each individual draws its own eps (or mu) from ``sampler(gen, count)``.

    For approximate-DP budgets every individual shares ``delta``.
    """

    kind: str
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    delta: float = 0.0
    label: str = "custom"

    @classmethod
    def uniform(cls, kind: str, low: float, high: float, delta: float = 0.0):
        if not 0 < low <= high:
            raise DomainError("uniform budget range must satisfy 0 < low <= high")
        return cls(kind, lambda gen, m: gen.uniform(low, high, m), delta, f"uniform({low},{high})")

    def draw(self, gen: np.random.Generator, count: int):
        vals = np.asarray(self.sampler(gen, count), dtype=float)
        if np.any(~(vals > 0)):
            raise DomainError("sampled budgets must be positive")
        zeros = np.zeros(count)
        if self.kind == GDP:
            return zeros, zeros, vals
        if self.kind == APPROX:
            if not 0 < self.delta < 1:
                raise DomainError("approximate-DP budgets need 0 < delta < 1")
            return vals, np.full(count, self.delta), zeros
        if self.kind == PURE:
            return vals, zeros, zeros
        raise ConfigurationError(f"unknown budget kind {self.kind!r}")


BudgetSource = FixedBudget | PerIndividualBudget


def as_budget_source(budget) -> BudgetSource:
    if isinstance(budget, PrivacyBudget):
        return FixedBudget(budget)
    return budget


def check_mechanism(mechanism: str, source: BudgetSource, dim: int):
    # validates the pairing with a representative budget of the right kind
    probe = {PURE: PrivacyBudget.pure(1.0), APPROX: PrivacyBudget.approx(1.0, 0.5),
             GDP: PrivacyBudget.gdp(1.0)}[source.kind]
    NoiseMechanism(mechanism, probe, dim)


class NoiseStream:
    """Per-individual noise for one replication, drawn in keyed blocks.

    Individual ``i`` (1-based) reads block ``(i - 1) // NOISE_BLOCK`` of
    substream ``("noise", block)``, so its draw depends only on
    ``(seed, replication, i)``. Budgets come from a parallel ``("budget", block)``
    substream.
    """

    def __init__(self, mechanism: str, dim: int, source: BudgetSource, rng: RngHandle,
                 block: int = NOISE_BLOCK):
        self.mechanism = mechanism
        self.dim = dim
        self.source = source
        self.rng = rng
        self.block_size = block

    def block(self, k: int):
        """Return (unit noise (B, p), per-individual scale (B,), eps, delta, mu)."""
        B = self.block_size
        unit = draw_unit(self.mechanism, self.rng.substream("noise", k).generator, (B, self.dim))
        eps, delta, mu = self.source.draw(self.rng.substream("budget", k).generator, B)
        scale = np.broadcast_to(noise_scale(self.mechanism, self.dim, eps, delta, mu), (B,))
        return unit, scale, eps, delta, mu


# -- single step ---------------------------------------------------------------

@dataclass
class OptimizerState:
    theta: np.ndarray
    theta_bar: np.ndarray | None = None
    i: int = 0
    ledger: PrivacyLedger = field(default_factory=PrivacyLedger)

    @classmethod
    def start(cls, theta0) -> "OptimizerState":
        theta0 = np.array(theta0, dtype=float)
        return cls(theta0, np.zeros_like(theta0), 0, PrivacyLedger())


def _noisy_update(theta, g, eta, c0, noise):
    out = theta - eta * g
    if noise is not None:
        out = out + (eta * c0) * noise
    return out


def ldp_sgd_step(state: OptimizerState, example, loss: BoundedLoss, sched: StepSchedule,
                 mechanism: str | None, budget: PrivacyBudget | None, rng: RngHandle | None = None,
                 noise=None, c0: float | None = None, average: bool = True) -> OptimizerState:
    """Consume one individual's example and return the next state.

    ``noise`` may be supplied directly (already scaled to the budget); otherwise it
    is sampled from ``rng``. ``mechanism=None`` is plain, non-private SGD.
    """
    x, y = (example.x, example.y) if isinstance(example, LabeledExample) else example
    loss.check_example(x)
    if np.shape(state.theta)[-1] != loss.dim:
        raise ConfigurationError(f"parameter has length {np.shape(state.theta)[-1]}, loss needs {loss.dim}")
    i = state.i + 1
    eta = step_size(sched, i)
    theta_in = loss.project(np.array(state.theta, dtype=float))
    g = loss.grad(theta_in, x, y)
    ledger = state.ledger
    if mechanism is not None:
        if budget is None:
            raise ConfigurationError("a private step needs the individual's budget")
        if noise is None:
            noise = sample_noise(NoiseMechanism(mechanism, budget, loss.dim), rng)
        c0 = loss.c0 if c0 is None else c0
        if not np.isfinite(c0):
            raise ConfigurationError(f"{loss.name} has no finite gradient bound; clip it first")
        ledger = ledger.record(budget)
    theta = loss.project(_noisy_update(theta_in, g, eta, c0, noise))
    bar = update_average(state.theta_bar, theta, i) if average else state.theta_bar
    return OptimizerState(theta, bar, i, ledger)


# -- streaming runs ----------------------------------------------------------------

@dataclass
class RunResult:
    """Snapshots from R lockstep replications.

    ``thetas`` and ``theta_bars`` have shape ``(R, K, p)`` for the K checkpoints.
    """

    checkpoints: np.ndarray
    thetas: np.ndarray
    theta_bars: np.ndarray | None
    ledgers: list[PrivacyLedger]
    grad_calls: int
    final_theta: np.ndarray
    final_theta_bar: np.ndarray | None
    history: np.ndarray | None = None

    @property
    def replications(self) -> int:
        return self.thetas.shape[0]


def validate_checkpoints(checkpoints: Sequence[int]) -> np.ndarray:
    cps = np.asarray(checkpoints, dtype=np.int64)
    if cps.ndim != 1 or cps.size == 0:
        raise ConfigurationError("need at least one checkpoint")
    if cps[0] < 1 or np.any(np.diff(cps) <= 0):
        raise ConfigurationError("checkpoints must be positive and strictly increasing")
    return cps


def log_checkpoints(n: int, count: int = 30, start: int = 10) -> np.ndarray:
    """Roughly ``count`` log-spaced iteration indices ending at ``n``."""
    start = min(start, n)
    cps = np.unique(np.round(np.geomspace(start, n, count)).astype(np.int64))
    return cps


def rechunk(stream: Iterable, size: int = CHUNK) -> Iterable[Chunk]:
    """Regroup a stream of examples or chunks into chunks of exactly ``size`` rows."""
    xs, ys, held = [], [], 0
    for item in stream:
        if isinstance(item, Chunk):
            X, y = item.X, item.y
        elif isinstance(item, LabeledExample):
            X, y = np.atleast_2d(item.x), np.atleast_1d(item.y)
        else:
            X, y = np.atleast_2d(item[0]), np.atleast_1d(item[1])
        if held == 0 and len(y) == size:
            yield Chunk(X, y)
            continue
        xs.append(X)
        ys.append(y)
        held += len(y)
        while held >= size:
            Xc, yc = np.vstack(xs), np.concatenate(ys)
            yield Chunk(Xc[:size], yc[:size])
            xs, ys, held = [Xc[size:]], [yc[size:]], held - size
    if held:
        yield Chunk(np.vstack(xs), np.concatenate(ys))


def run_batch(loss: BoundedLoss, sched: StepSchedule, budget_source, mechanism: str | None,
              streams: Sequence[Iterable], checkpoints: Sequence[int], rngs: Sequence[RngHandle] | None,
              theta0=None, c0: float | None = None, average: bool = True,
              keep_history: bool = False) -> RunResult:
    """Run R replications in lockstep, one stream and one noise handle each.

    ``mechanism=None`` runs plain SGD (no noise, empty ledgers). ``c0`` overrides
    the noise multiplier (default ``loss.c0``); ``c0=0`` keeps the private code path
    but adds zero noise.
    """
    R = len(streams)
    p = loss.dim
    cps = validate_checkpoints(checkpoints)
    n_total = int(cps[-1])
    private = mechanism is not None
    if private:
        source = as_budget_source(budget_source)
        check_mechanism(mechanism, source, p)
        c0 = loss.c0 if c0 is None else float(c0)
        if not np.isfinite(c0):
            raise ConfigurationError(f"{loss.name} has no finite gradient bound; clip it first")
        if rngs is None or len(rngs) != R:
            raise ConfigurationError("need one noise handle per replication")
        noise_streams = [NoiseStream(mechanism, p, source, r) for r in rngs]

    if theta0 is None:
        theta = np.zeros((R, p))
    else:
        theta = np.array(np.broadcast_to(np.asarray(theta0, dtype=float), (R, p)))
    theta = loss.project(theta)
    bar = np.zeros((R, p))
    ledgers = [PrivacyLedger() for _ in range(R)]

    snaps = np.empty((R, len(cps), p))
    snaps_bar = np.empty((R, len(cps), p)) if average else None
    history = np.empty((R, n_total, p)) if keep_history else None
    chunkers = [iter(rechunk(s)) for s in streams]
    i = 0
    k = 0
    grad_calls = 0
    noise_block = None
    noise_block_id = -1
    block_budgets = []

    def flush_ledgers():
        # record only the individuals of the current block actually consumed
        used = i - noise_block_id * NOISE_BLOCK
        for r, (eps, delta, mu) in enumerate(block_budgets):
            ledgers[r] = ledgers[r].record_many(source.kind, used, eps[:used], delta[:used], mu[:used])
        block_budgets.clear()

    def partial():
        if private and block_budgets:
            flush_ledgers()
        return RunResult(cps[:k], snaps[:, :k], None if snaps_bar is None else snaps_bar[:, :k],
                         ledgers, grad_calls, theta, bar if average else None,
                         None if history is None else history[:, :i])

    while i < n_total:
        try:
            chunks = [next(c) for c in chunkers]
        except StopIteration:
            raise TruncatedRunError(f"stream exhausted after {i} of {n_total} examples", partial())
        m = len(chunks[0])
        if any(len(c) != m for c in chunks):
            raise ConfigurationError("replication streams have unequal lengths")
        X = np.stack([c.X for c in chunks])
        Y = np.stack([c.y for c in chunks])
        if X.shape[-1] != loss.n_features:
            raise ConfigurationError(
                f"{loss.name} expects {loss.n_features} covariates, stream has {X.shape[-1]}")
        for j in range(m):
            if i >= n_total:
                break
            noise = None
            if private:
                blk, off = divmod(i, NOISE_BLOCK)
                if blk != noise_block_id:
                    if block_budgets:
                        flush_ledgers()
                    scaled = []
                    for ns in noise_streams:
                        unit, scale, eps, delta, mu = ns.block(blk)
                        scaled.append(unit * scale[:, None])
                        block_budgets.append((eps, delta, mu))
                    noise_block = np.stack(scaled)
                    noise_block_id = blk
                noise = noise_block[:, off]
            i += 1
            eta = step_size(sched, i)
            g = loss.grad(theta, X[:, j], Y[:, j])
            grad_calls += 1
            theta = loss.project(_noisy_update(theta, g, eta, c0, noise))
            if average:
                bar = update_average(bar, theta, i)
            if history is not None:
                history[:, i - 1] = theta
            if i == cps[k]:
                snaps[:, k] = theta
                if average:
                    snaps_bar[:, k] = bar
                k += 1
    if private and block_budgets:
        flush_ledgers()
    return RunResult(cps, snaps, snaps_bar, ledgers, grad_calls, theta,
                     bar if average else None, history)


def run_stream(loss: BoundedLoss, sched: StepSchedule, budget_source, mechanism: str | None,
               data_stream: Iterable, checkpoints: Sequence[int], rng: RngHandle | None,
               theta0=None, **kwargs) -> tuple[RunResult, PrivacyLedger]:
    """Single-replication streaming run; returns the snapshots and the final ledger."""
    result = run_batch(loss, sched, budget_source, mechanism, [data_stream], checkpoints,
                       None if rng is None else [rng], theta0=theta0, **kwargs)
    return result, result.ledgers[0]
