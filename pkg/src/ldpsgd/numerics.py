"""Shared numeric primitives: the psi_beta family and seeded random streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

BETA_SWITCH = 1e-8


def psi_beta(beta: float, t):
    """Return ``(t**beta - 1) / beta``, continuously extended to ``beta = 0``.

    For ``|beta| <= 1e-8`` the second-order expansion ``ln t + beta ln(t)^2 / 2``
    is used. Accepts scalar or array ``t``.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(~(t_arr > 0)):
        raise DomainError(f"psi_beta requires t > 0, got {t!r}")
    log_t = np.log(t_arr)
    if abs(beta) <= BETA_SWITCH:
        out = log_t + beta * log_t**2 / 2.0
    else:
        x = beta * log_t
        with np.errstate(over="ignore"):
            # expm1 keeps precision when beta * ln t is small; pow is exact on
            # integer powers elsewhere
            out = np.where(np.abs(x) < 0.5, np.expm1(x), t_arr**beta - 1.0) / beta
    return float(out) if out.ndim == 0 else out


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise DomainError("stream keys must be non-negative")
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stable_hash(obj) -> int:
    """64-bit hash of a string/repr that is stable across processes."""
    return _key_to_int(str(obj))


@dataclass
class RngHandle:
    """A seeded random stream addressed by ``(seed, stream)``.

    ``stream`` is a path of non-negative integers (strings are hashed), so
    ``RngHandle(7, (3, 12))`` names substream 12 of replication 3 under seed 7.
    Equal addresses replay bit-identical samples; distinct addresses are
    independent streams (numpy ``SeedSequence`` spawn keys).
    """

    seed: int
    stream: tuple = ()
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if isinstance(self.stream, (int, np.integer, str)):
            self.stream = (self.stream,)
        self.stream = tuple(_key_to_int(k) for k in self.stream)
        if self.seed < 0 or self.seed >= 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def substream(self, *keys) -> "RngHandle":
        """Fresh handle one level deeper; does not consume from this stream."""
        return RngHandle(self.seed, self.stream + tuple(_key_to_int(k) for k in keys))


def standard_gaussian(rng: RngHandle, d: int, size=None) -> np.ndarray:
    """``d`` iid N(0, 1) draws (with optional leading batch shape)."""
    if d < 1:
        raise DomainError("dimension must be >= 1")
    shape = (d,) if size is None else tuple(np.atleast_1d(size)) + (d,)
    return rng.generator.standard_normal(shape)


def standard_laplace(rng: RngHandle, d: int, scale: float = 1.0, size=None) -> np.ndarray:
    """``d`` iid Laplace(0, scale) draws; per-component variance ``2 scale^2``."""
    if not scale > 0:
        raise DomainError(f"Laplace scale must be positive, got {scale}")
    if d < 1:
        raise DomainError("dimension must be >= 1")
    shape = (d,) if size is None else tuple(np.atleast_1d(size)) + (d,)
    return rng.generator.laplace(0.0, scale, shape)
