"""Local-DP budgets, calibrated noise mechanisms and the parallel-composition ledger.

Noise is unit-calibrated for a gradient bound of 1: the optimizer multiplies
each draw by the loss's ``C0`` so the 2*C0 sensitivity of the gradient is covered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import ConfigurationError, DomainError
from .numerics import RngHandle

PURE = "pure"
APPROX = "approx"
GDP = "gdp"

LAPLACE = "laplace"
GAUSSIAN = "gaussian"
MECHANISMS = (LAPLACE, GAUSSIAN, GDP)

# mechanism -> budget kinds it accepts
_COMPATIBLE = {LAPLACE: {PURE}, GAUSSIAN: {APPROX}, GDP: {GDP}}


@dataclass(frozen=True)
class PrivacyBudget:
    kind: str
    eps: float = 0.0
    delta: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if self.kind == PURE:
            ok = self.eps > 0 and self.delta == 0 and self.mu == 0
        elif self.kind == APPROX:
            ok = self.eps > 0 and 0 < self.delta < 1 and self.mu == 0
        elif self.kind == GDP:
            ok = self.mu > 0 and self.eps == 0 and self.delta == 0
        else:
            raise ConfigurationError(f"unknown budget kind {self.kind!r}")
        if not ok:
            raise DomainError(f"invalid privacy budget {self}")

    @classmethod
    def pure(cls, eps: float) -> "PrivacyBudget":
        return cls(PURE, eps=float(eps))

    @classmethod
    def approx(cls, eps: float, delta: float) -> "PrivacyBudget":
        return cls(APPROX, eps=float(eps), delta=float(delta))

    @classmethod
    def gdp(cls, mu: float) -> "PrivacyBudget":
        return cls(GDP, mu=float(mu))


def noise_scale(mechanism: str, dim: int, eps=None, delta=None, mu=None):
    """Per-component scale of the unit-calibrated noise.

    Laplace returns the scale ``b`` (variance ``2 b^2``); the Gaussian mechanisms
    return a standard deviation. Vectorizes over array budgets.
    """
    if mechanism == LAPLACE:
        return 2.0 * math.sqrt(dim) / np.asarray(eps, dtype=float)
    if mechanism == GAUSSIAN:
        eps = np.asarray(eps, dtype=float)
        return np.sqrt(8.0 * np.log(1.25 / np.asarray(delta, dtype=float))) / eps
    if mechanism == GDP:
        return 2.0 / np.asarray(mu, dtype=float)
    raise ConfigurationError(f"unknown mechanism {mechanism!r}")


@dataclass(frozen=True)
class NoiseMechanism:
    mechanism: str
    budget: PrivacyBudget
    dim: int

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if self.budget.kind not in _COMPATIBLE[self.mechanism]:
            raise ConfigurationError(
                f"{self.mechanism} mechanism cannot be calibrated by a {self.budget.kind} budget"
            )
        if self.dim < 1:
            raise ConfigurationError("noise dimension must be >= 1")

    @property
    def scale(self) -> float:
        b = self.budget
        return float(noise_scale(self.mechanism, self.dim, b.eps, b.delta, b.mu))

    @property
    def component_variance(self) -> float:
        s = self.scale
        return 2.0 * s * s if self.mechanism == LAPLACE else s * s

    def omega_second_moment(self) -> float:
        return omega_second_moment(self)

    def sample(self, rng: RngHandle, size=None) -> np.ndarray:
        return sample_noise(self, rng, size=size)


def draw_unit(mechanism: str, gen: np.random.Generator, shape) -> np.ndarray:
    """Unit-scale draws for a mechanism (standard Laplace or standard normal)."""
    if mechanism == LAPLACE:
        return gen.laplace(0.0, 1.0, shape)
    if mechanism in (GAUSSIAN, GDP):
        return gen.standard_normal(shape)
    raise ConfigurationError(f"unknown mechanism {mechanism!r}")


def sample_noise(mech: NoiseMechanism, rng: RngHandle, size=None) -> np.ndarray:
    """Draw a noise vector ``omega`` (or a batch of them) for ``mech``."""
    shape = (mech.dim,) if size is None else tuple(np.atleast_1d(size)) + (mech.dim,)
    return mech.scale * draw_unit(mech.mechanism, rng.generator, shape)


def omega_second_moment(mech: NoiseMechanism) -> float:
    """Closed-form ``E ||omega||_2^2``."""
    return mech.dim * mech.component_variance


def gdp_to_dp(mu: float, eps: float) -> float:
    """delta(eps) such that a mu-GDP mechanism is (eps, delta)-DP."""
    if not (mu > 0 and eps > 0):
        raise DomainError("gdp_to_dp requires mu > 0 and eps > 0")
    a = -eps / mu + mu / 2.0
    b = -eps / mu - mu / 2.0
    # e^eps * Phi(b) evaluated in log space to avoid overflow for large eps
    delta = ndtr(a) - math.exp(eps + log_ndtr(b))
    return float(min(max(delta, 0.0), 1.0))


@dataclass(frozen=True)
class PrivacyLedger:
    """Per-run privacy report under parallel composition.

    Each individual's datum is touched once, so the run is as private as its
    least private individual: the ledger keeps componentwise maxima, never sums.
    """

    family: str | None = None  # "eps-delta" or "gdp"; None while empty
    max_eps: float = 0.0
    max_delta: float = 0.0
    max_mu: float = 0.0
    count: int = 0

    def _check_family(self, family: str):
        if self.family is not None and self.family != family:
            raise ConfigurationError("cannot mix GDP and (eps, delta) budgets in one ledger")

    def record(self, budget: PrivacyBudget) -> "PrivacyLedger":
        family = "gdp" if budget.kind == GDP else "eps-delta"
        self._check_family(family)
        return PrivacyLedger(
            family,
            max(self.max_eps, budget.eps),
            max(self.max_delta, budget.delta),
            max(self.max_mu, budget.mu),
            self.count + 1,
        )

    def record_many(self, kind: str, count: int, eps=0.0, delta=0.0, mu=0.0) -> "PrivacyLedger":
        """Record ``count`` individuals of one budget kind (arrays or scalars)."""
        if count == 0:
            return self
        family = "gdp" if kind == GDP else "eps-delta"
        self._check_family(family)
        return PrivacyLedger(
            family,
            max(self.max_eps, float(np.max(eps))),
            max(self.max_delta, float(np.max(delta))),
            max(self.max_mu, float(np.max(mu))),
            self.count + int(count),
        )

    def to_json(self) -> dict:
        return {
            "kind": self.family,
            "max_eps": self.max_eps,
            "max_delta": self.max_delta,
            "max_mu": self.max_mu,
            "count": self.count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrivacyLedger":
        return cls(obj["kind"], obj["max_eps"], obj["max_delta"], obj["max_mu"], obj["count"])


def ledger_record(ledger: PrivacyLedger, budget: PrivacyBudget) -> PrivacyLedger:
    return ledger.record(budget)
