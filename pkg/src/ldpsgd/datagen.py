"""Seeded synthetic streams for the linear (Huber) and logistic simulation designs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError
from .numerics import RngHandle

LINEAR = "linear"
LOGISTIC = "logistic"
CHUNK = 4096


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class Chunk:
    """A contiguous block of a stream: ``X`` is (m, q), ``y`` is (m,)."""

    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def examples(self) -> Iterator[LabeledExample]:
        for xi, yi in zip(self.X, self.y):
            yield LabeledExample(xi, yi)


@dataclass
class SyntheticDesign:
    kind: str = LINEAR
    d: int = 5
    beta_true: np.ndarray | None = None
    sigma: float = 2.0
    sigma_z: float = 1.0
    n: int = 100_000
    chunk: int = field(default=CHUNK, repr=False)

    def __post_init__(self):
        if self.kind not in (LINEAR, LOGISTIC):
            raise ConfigurationError(f"unknown design kind {self.kind!r}")
        if self.n < 1 or self.d < 0:
            raise ConfigurationError("design needs n >= 1 and d >= 0")
        if self.sigma < 0 or self.sigma_z < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if self.beta_true is None:
            self.beta_true = np.ones(self.d + 1)
        self.beta_true = np.asarray(self.beta_true, dtype=float)
        if self.beta_true.shape != (self.d + 1,):
            raise ConfigurationError("beta_true must have length d + 1 (intercept first)")

    @property
    def n_features(self) -> int:
        return self.d + 1

    @property
    def theta_star(self) -> np.ndarray:
        """Population minimizer of the matching weighted loss."""
        if self.kind == LINEAR:
            return np.append(self.beta_true, self.sigma)
        return self.beta_true.copy()


def _draw_block(design: SyntheticDesign, gen: np.random.Generator, m: int):
    z = design.sigma_z * gen.standard_normal((m, design.d))
    X = np.hstack([np.ones((m, 1)), z])
    lin = X @ design.beta_true
    if design.kind == LINEAR:
        y = lin + design.sigma * gen.standard_normal(m)
    else:
        y = (gen.random(m) < expit(lin)).astype(float)
    return X, y


def design_chunks(design: SyntheticDesign, rng: RngHandle, n: int | None = None) -> Iterator[Chunk]:
    """Lazily yield the stream in chunks; chunk ``k`` is drawn from substream ``k``.

    Keying by chunk index keeps any prefix of the stream independent of ``n``.
    """
    total = design.n if n is None else n
    for k, start in enumerate(range(0, total, design.chunk)):
        m = min(design.chunk, total - start)
        # always draw a full block so row j of chunk k never depends on n
        X, y = _draw_block(design, rng.substream(k).generator, design.chunk)
        yield Chunk(X[:m], y[:m])


def _examples(design, rng):
    for chunk in design_chunks(design, rng):
        yield from chunk.examples()


def gen_linear(design: SyntheticDesign, rng: RngHandle) -> Iterator[LabeledExample]:
    if design.kind != LINEAR:
        raise ConfigurationError("gen_linear needs a linear design")
    return _examples(design, rng)


def gen_logistic(design: SyntheticDesign, rng: RngHandle) -> Iterator[LabeledExample]:
    if design.kind != LOGISTIC:
        raise ConfigurationError("gen_logistic needs a logistic design")
    return _examples(design, rng)


def sample_dataset(design: SyntheticDesign, rng: RngHandle, n: int):
    """Materialize ``n`` rows as arrays (used for held-out evaluation samples)."""
    chunks = list(design_chunks(design, rng, n))
    return np.vstack([c.X for c in chunks]), np.concatenate([c.y for c in chunks])


def dump_csv(stream, path) -> int:
    """Write a stream (examples or chunks) as CSV with header x_0..x_d, y."""
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header_done = False
        for item in stream:
            block = item if isinstance(item, Chunk) else Chunk(np.atleast_2d(item.x), np.atleast_1d(item.y))
            if not header_done:
                writer.writerow([f"x_{j}" for j in range(block.X.shape[1])] + ["y"])
                header_done = True
            for xi, yi in zip(block.X, block.y):
                writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
                rows += 1
    return rows
