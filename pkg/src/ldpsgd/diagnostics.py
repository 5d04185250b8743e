"""Distances, replicated trajectories and log-log rate fits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .numerics import psi_beta

NONCONVERGENCE_SLOPE = -0.1


def param_distance(theta, theta_star):
    """Squared Euclidean distance along the last axis."""
    theta = np.asarray(theta, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    if theta.shape[-1] != theta_star.shape[-1]:
        raise ConfigurationError("parameter dimensions differ")
    return np.sum(np.square(theta - theta_star), axis=-1)


def loss_gap(theta, theta_star, loss, X, y):
    """Mean held-out loss at ``theta`` minus at ``theta_star``.

    ``theta`` may carry leading batch axes; the result keeps them.
    """
    X = np.asarray(X)
    if len(X) == 0:
        raise DomainError("held-out sample is empty")
    theta = np.asarray(theta, dtype=float)
    at = loss.value(theta[..., None, :], X, y).mean(axis=-1)
    ref = loss.value(np.asarray(theta_star, dtype=float), X, y).mean()
    return at - ref


def _mean_se(a):
    a = np.asarray(a, dtype=float)
    R = a.shape[0]
    se = a.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(a.shape[1:])
    return a.mean(axis=0), se


@dataclass
class Trajectory:
    """Replication means (and standard errors) at each checkpoint."""

    checkpoints: np.ndarray
    theta_dist: np.ndarray
    theta_dist_se: np.ndarray
    theta_bar_dist: np.ndarray
    theta_bar_dist_se: np.ndarray
    loss_gap: np.ndarray | None
    loss_gap_se: np.ndarray | None
    loss_gap_bar: np.ndarray | None
    loss_gap_bar_se: np.ndarray | None
    replications: int

    def __post_init__(self):
        cps = np.asarray(self.checkpoints)
        if np.any(np.diff(cps) <= 0):
            raise ConfigurationError("checkpoints must be strictly increasing")
        if np.any(self.theta_dist < 0) or np.any(self.theta_bar_dist < 0):
            raise DomainError("distances must be non-negative")

    @classmethod
    def from_run(cls, result, theta_star, loss=None, holdout=None) -> "Trajectory":
        """Aggregate an R-replication ``RunResult`` (holdout = (X, y) for loss gaps)."""
        d = param_distance(result.thetas, theta_star)
        db = param_distance(result.theta_bars, theta_star)
        gap = gap_bar = None
        if loss is not None and holdout is not None:
            X, y = holdout
            gap = loss_gap(result.thetas, theta_star, loss, X, y)
            gap_bar = loss_gap(result.theta_bars, theta_star, loss, X, y)
        m, s = _mean_se(d)
        mb, sb = _mean_se(db)
        if gap is not None:
            g, gs = _mean_se(gap)
            gb, gbs = _mean_se(gap_bar)
        else:
            g = gs = gb = gbs = None
        return cls(np.asarray(result.checkpoints), m, s, mb, sb, g, gs, gb, gbs, d.shape[0])

    def gap_flags(self) -> np.ndarray:
        """Checkpoints where a mean loss gap sits below -3 standard errors."""
        if self.loss_gap is None:
            return np.zeros(len(self.checkpoints), dtype=bool)
        low = self.loss_gap < -3 * self.loss_gap_se
        low_bar = self.loss_gap_bar < -3 * self.loss_gap_bar_se
        return low | low_bar

    def series(self, name: str) -> np.ndarray:
        return {
            "delta": self.theta_dist,
            "delta_bar": self.theta_bar_dist,
            "gap": self.loss_gap,
            "gap_bar": self.loss_gap_bar,
        }[name]

    def to_csv(self, path):
        cols = ["n", "delta", "delta_se", "delta_bar", "delta_bar_se",
                "gap", "gap_se", "gap_bar", "gap_bar_se"]
        nan = np.full(len(self.checkpoints), np.nan)
        data = [self.checkpoints, self.theta_dist, self.theta_dist_se, self.theta_bar_dist,
                self.theta_bar_dist_se,
                nan if self.loss_gap is None else self.loss_gap,
                nan if self.loss_gap_se is None else self.loss_gap_se,
                nan if self.loss_gap_bar is None else self.loss_gap_bar,
                nan if self.loss_gap_bar_se is None else self.loss_gap_bar_se]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*data):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    window: tuple[int, int]


def default_window(checkpoints) -> tuple[int, int]:
    """The final decade of checkpoints."""
    n_max = int(np.max(checkpoints))
    return (int(math.ceil(n_max / 10)), n_max)


def estimate_rate(n, v, window=None) -> RateFit:
    """OLS fit of ``ln v`` on ``ln n`` over ``window`` (default: last decade)."""
    n = np.asarray(n, dtype=float)
    v = np.asarray(v, dtype=float)
    lo, hi = default_window(n) if window is None else window
    mask = (n >= lo) & (n <= hi)
    if mask.sum() < 5:
        raise DomainError(f"need at least 5 checkpoints in window {lo}..{hi}, have {mask.sum()}")
    if np.any(~(v[mask] > 0)):
        raise DomainError("rate fit needs strictly positive values in the window")
    lx, ly = np.log(n[mask]), np.log(v[mask])
    xc = lx - lx.mean()
    yc = ly - ly.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ yc) / sxx
    intercept = float(ly.mean() - slope * lx.mean())
    ss_tot = float(yc @ yc)
    resid = yc - slope * xc
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(resid @ resid) / ss_tot)
    return RateFit(slope, intercept, r2, (int(lo), int(hi)))


def relative_order(n, sgd_series, avg_series, window=None) -> float:
    """Empirical relative order: slope of ``ln(sgd / avg)`` against ``ln n``.

    Pass (delta_n, delta_bar_n) for r or (Delta_n, Delta_bar_n) for R.
    """
    sgd = np.asarray(sgd_series, dtype=float)
    avg = np.asarray(avg_series, dtype=float)
    lo, hi = default_window(n) if window is None else window
    nn = np.asarray(n, dtype=float)
    mask = (nn >= lo) & (nn <= hi)
    if np.any(~(sgd[mask] > 0)) or np.any(~(avg[mask] > 0)):
        raise DomainError("relative order needs positive series in the window")
    ratio = np.ones_like(sgd)
    ratio[mask] = sgd[mask] / avg[mask]
    return estimate_rate(nn, ratio, (lo, hi)).slope


def trajectory_relative_orders(traj: Trajectory, window=None) -> dict:
    out = {"r": relative_order(traj.checkpoints, traj.theta_dist, traj.theta_bar_dist, window)}
    if traj.loss_gap is not None:
        try:
            out["R"] = relative_order(traj.checkpoints, traj.loss_gap, traj.loss_gap_bar, window)
        except DomainError:
            out["R"] = None
    return out


def rate_exponents(alpha: float) -> dict:
    """Leading decay exponents of (delta, delta_bar, Delta, Delta_bar) as n^-e.

    ``Delta`` is ``None`` below alpha = 1/3 where no loss-gap rate is given for
    the unaveraged iterate.
    """
    if not 0 < alpha < 1:
        raise DomainError("rates are tabulated for alpha in (0, 1)")
    delta = alpha
    delta_bar = 2 * alpha if alpha <= 0.5 else 1.0
    if alpha < 1 / 3:
        gap = None
    elif alpha <= 0.5:
        gap = (3 * alpha - 1) / 2
    elif alpha <= 2 / 3:
        gap = alpha / 2
    else:
        gap = 1 - alpha
    gap_bar = alpha if alpha <= 0.5 else 1 - alpha
    return {"delta": delta, "delta_bar": delta_bar, "gap": gap, "gap_bar": gap_bar}


def theoretical_relative_orders(alpha: float) -> tuple[float, float | None]:
    """(r, R) implied by the tabulated exponents."""
    e = rate_exponents(alpha)
    r = e["delta_bar"] - e["delta"]
    R = None if e["gap"] is None else e["gap_bar"] - e["gap"]
    return r, R


def bound_shaped_series(alpha: float, n, eta: float = 1.0, omega: float = 1.0):
    """Synthetic (delta_n, delta_bar_n) with the shape of the non-asymptotic bounds.

    delta_n ~ (1 + Omega) eta n^-alpha and
    delta_bar_n ~ (1 + Omega) / n + eta^2 psi_{1-2 alpha}(n) / n,
    so the averaged series carries the psi-term that dominates for alpha < 1/2.
    """
    n = np.asarray(n, dtype=float)
    delta = (1 + omega) * eta * n ** (-alpha)
    delta_bar = (1 + omega) / n + eta**2 * psi_beta(1 - 2 * alpha, n) / n
    return delta, delta_bar


def tail_nonincreasing(series, se, k_last: int) -> bool:
    """True when the last ``k_last`` points never rise by more than 3 standard errors."""
    s = np.asarray(series)[-k_last:]
    e = np.asarray(se)[-k_last:]
    rises = np.diff(s)
    tol = 3 * np.sqrt(e[1:] ** 2 + e[:-1] ** 2)
    return bool(np.all(rises <= tol))


def flag_nonconvergent(fit: RateFit) -> bool:
    return fit.slope > NONCONVERGENCE_SLOPE
