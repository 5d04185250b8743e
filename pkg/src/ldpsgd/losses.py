"""Per-example losses with a certified gradient-norm bound ``C0``.

All oracles broadcast over leading batch axes: ``theta`` has shape ``(..., p)``,
``x`` has shape ``(..., q)`` and ``y`` has shape ``(...)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate
from scipy.special import expit, softmax
from scipy.stats import norm

from .errors import ConfigurationError, DomainError

SIGMA_FLOOR = 1e-3


def mallows_weight(x):
    """``min(1, 2 / ||x||^2)``; bounds ``||x|| w(x)`` by sqrt(2)."""
    sq = np.sum(np.square(x), axis=-1)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, 2.0 / sq)


def huber_rho(z, c: float):
    az = np.abs(z)
    return np.where(az <= c, 0.5 * np.square(z), c * az - 0.5 * c * c)


def huber_psi(z, c: float):
    return np.clip(z, -c, c)


def kappa_c(c: float) -> float:
    """E[min(Z^2, c^2)] for standard normal Z, by adaptive quadrature."""
    if not c > 0:
        raise DomainError("Huber tuning constant must be positive")
    inner, _ = integrate.quad(lambda z: z * z * norm.pdf(z), 0.0, c, epsabs=1e-15, epsrel=1e-13)
    outer, _ = integrate.quad(norm.pdf, c, np.inf, epsabs=1e-15, epsrel=1e-13)
    return 2.0 * inner + 2.0 * c * c * outer


def clip_gradient(g, C: float):
    """Rescale ``g`` (along its last axis) to norm at most ``C``."""
    if not C > 0:
        raise DomainError("clip threshold must be positive")
    g = np.asarray(g, dtype=float)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > C, C / norms, 1.0)
    return g * factor


def _dot(x, theta):
    return np.sum(x * theta, axis=-1)


class BoundedLoss:
    """Base class. Subclasses set ``dim`` (parameter length) and ``c0``."""

    name = "loss"
    dim: int
    n_features: int
    c0: float

    def value(self, theta, x, y):
        raise NotImplementedError

    def grad(self, theta, x, y):
        raise NotImplementedError

    def project(self, theta):
        return theta

    def check_example(self, x):
        if np.shape(x)[-1] != self.n_features:
            raise ConfigurationError(
                f"{self.name} expects {self.n_features} covariates, got {np.shape(x)[-1]}"
            )


class HuberScaleLoss(BoundedLoss):
    """Mallows-weighted Huber regression with a concomitant scale.

    ``theta = (beta, sigma)``; the per-example objective is
    ``(sigma * rho_c((y - x.beta) / sigma) + kappa_c * sigma / 2) * w(x)``.
    """

    name = "huber"

    def __init__(self, n_features: int, c: float = 1.345, weighted: bool = True,
                 sigma_floor: float = SIGMA_FLOOR):
        if not c > 0:
            raise DomainError("Huber tuning constant must be positive")
        self.n_features = n_features
        self.dim = n_features + 1
        self.c = float(c)
        self.kappa = kappa_c(c)
        self.weighted = weighted
        self.sigma_floor = sigma_floor
        # Constant quoted for the gradient sensitivity, halved to a norm bound.
        self.reported_c0 = math.sqrt(8 * c**2 + c**4 / 4) / 2
        # Attained sup: ||x w(x)|| = sqrt(2) jointly with |r / sigma| > c.
        self.derived_c0 = math.sqrt(2 * c**2 + max(self.kappa, c**2 - self.kappa) ** 2 / 4)
        if weighted:
            self.c0 = self.derived_c0
        else:
            self.c0 = math.inf

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[..., :-1], theta[..., -1]

    def _weight(self, x):
        return mallows_weight(x) if self.weighted else np.ones(np.shape(x)[:-1])

    def value(self, theta, x, y):
        beta, sigma = self._split(theta)
        u = (y - _dot(x, beta)) / sigma
        return (sigma * huber_rho(u, self.c) + 0.5 * self.kappa * sigma) * self._weight(x)

    def grad(self, theta, x, y):
        beta, sigma = self._split(theta)
        w = self._weight(x)
        u = (y - _dot(x, beta)) / sigma
        psi = huber_psi(u, self.c)
        g_beta = -(psi * w)[..., None] * x
        # rho(u) - u psi(u), written without the cancellation for large |u|
        rho_minus = np.where(np.abs(u) <= self.c, -0.5 * np.square(u), -0.5 * self.c * self.c)
        g_sigma = (rho_minus + 0.5 * self.kappa) * w
        return np.concatenate([g_beta, g_sigma[..., None]], axis=-1)

    def project(self, theta):
        theta[..., -1] = np.maximum(theta[..., -1], self.sigma_floor)
        return theta


class LogisticLoss(BoundedLoss):
    """Binary cross-entropy, optionally Mallows-weighted; ``y`` in {0, 1}."""

    name = "logistic"

    def __init__(self, n_features: int, weighted: bool = True):
        self.n_features = n_features
        self.dim = n_features
        self.weighted = weighted
        self.c0 = math.sqrt(2.0) if weighted else math.inf

    def _weight(self, x):
        return mallows_weight(x) if self.weighted else np.ones(np.shape(x)[:-1])

    def value(self, theta, x, y):
        z = _dot(x, np.asarray(theta, dtype=float))
        # log(1 + e^z) - y z, rewritten so small losses do not cancel
        nll = np.logaddexp(-y * z, (1.0 - y) * z)
        return nll * self._weight(x)

    def grad(self, theta, x, y):
        p = expit(_dot(x, np.asarray(theta, dtype=float)))
        return ((p - y) * self._weight(x))[..., None] * x

    def predict(self, theta, x):
        return (_dot(x, np.asarray(theta, dtype=float)) > 0).astype(int)


class MultinomialLoss(BoundedLoss):
    """Softmax cross-entropy over ``K`` classes with Mallows weights.

    ``theta`` is the row-major flattening of a ``K x q`` coefficient block.
    """

    name = "multinomial"

    def __init__(self, n_features: int, n_classes: int, weighted: bool = True):
        if n_classes < 2:
            raise ConfigurationError("need at least two classes")
        self.n_features = n_features
        self.n_classes = n_classes
        self.dim = n_features * n_classes
        self.weighted = weighted
        self.c0 = 2.0 if weighted else math.inf

    def _weight(self, x):
        return mallows_weight(x) if self.weighted else np.ones(np.shape(x)[:-1])

    def logits(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        block = theta.reshape(theta.shape[:-1] + (self.n_classes, self.n_features))
        return np.sum(block * np.asarray(x)[..., None, :], axis=-1)

    def value(self, theta, x, y):
        z = self.logits(theta, x)
        y = np.broadcast_to(np.asarray(y, dtype=int), z.shape[:-1])
        # -log p_y = log(1 + sum_{k != y} e^{z_k - z_y}); log1p keeps small losses exact
        m = z - np.take_along_axis(z, y[..., None], axis=-1)
        others = np.where(np.arange(self.n_classes) == y[..., None], -np.inf, m)
        top = np.maximum(np.max(others, axis=-1), 0.0)
        s = np.sum(np.exp(others - top[..., None]), axis=-1)
        nll = np.where(top > 0, top + np.log(np.exp(-top) + s), np.log1p(s))
        return nll * self._weight(x)

    def grad(self, theta, x, y):
        p = softmax(self.logits(theta, x), axis=-1)
        y = np.asarray(y, dtype=int)
        resid = p - (np.arange(self.n_classes) == np.asarray(y)[..., None])
        resid = resid * self._weight(x)[..., None]
        g = resid[..., :, None] * np.asarray(x)[..., None, :]
        return g.reshape(g.shape[:-2] + (self.dim,))

    def predict(self, theta, x):
        # argmax returns the lowest index on ties
        return np.argmax(self.logits(theta, x), axis=-1)


class ClippedLoss(BoundedLoss):
    """Wraps a loss so each per-example gradient is norm-clipped at ``C``."""

    def __init__(self, base: BoundedLoss, C: float):
        if not C > 0:
            raise DomainError("clip threshold must be positive")
        self.base = base
        self.C = float(C)
        self.c0 = float(C)
        self.dim = base.dim
        self.n_features = base.n_features
        self.name = f"clipped-{base.name}"

    def value(self, theta, x, y):
        return self.base.value(theta, x, y)

    def grad(self, theta, x, y):
        return clip_gradient(self.base.grad(theta, x, y), self.C)

    def project(self, theta):
        return self.base.project(theta)

    def predict(self, theta, x):
        return self.base.predict(theta, x)
