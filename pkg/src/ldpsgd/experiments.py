"""Replicated experiment runner: JSON configs, grid cells, CSV and manifest output.

Random streams are keyed by cell identity, never by execution order:

* data for replication r:   (seed, "data", design key, r)
* noise for replication r:  (seed, "noise", cell key, r)
* held-out sample:          (seed, "holdout", design key)

so a cell's output does not depend on which other cells share the grid, and
cells that share a design see identical data (paired comparisons).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import LINEAR, LOGISTIC, SyntheticDesign, design_chunks, sample_dataset
from .diagnostics import (
    Trajectory,
    estimate_rate,
    flag_nonconvergent,
    param_distance,
    trajectory_relative_orders,
)
from .errors import ConfigurationError, DomainError
from .ingest import (
    CLASSIFICATION,
    REGRESSION,
    SplitPlan,
    evaluation_points,
    load_and_encode,
    permuted_chunks,
    synthetic_insurance,
)
from .losses import ClippedLoss, HuberScaleLoss, LogisticLoss, MultinomialLoss
from .numerics import RngHandle, stable_hash
from .optimizer import (
    FixedBudget,
    PerIndividualBudget,
    StepSchedule,
    check_mechanism,
    log_checkpoints,
    run_batch,
)
from .privacy import APPROX, GDP, MECHANISMS, PURE, PrivacyBudget, PrivacyLedger, gdp_to_dp

log = logging.getLogger(__name__)

DESK_SCALE = {"n": 100_000, "replications": 50}
FULL_SCALE = {"n": 300_000, "replications": 200}
NONE = "none"


# -- configuration -------------------------------------------------------------

def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def parse_budget(spec) -> FixedBudget | PerIndividualBudget:
    """Budget from JSON: {"mu": 2}, {"eps": 1}, {"eps": 1, "delta": 0.05},
    or per-individual {"mu": {"uniform": [1, 2]}}."""
    if not isinstance(spec, dict):
        raise ConfigurationError(f"budget must be an object, got {spec!r}")
    if "mu" in spec:
        kind, value = GDP, spec["mu"]
    elif "delta" in spec:
        kind, value = APPROX, spec["eps"]
    elif "eps" in spec:
        kind, value = PURE, spec["eps"]
    else:
        raise ConfigurationError(f"budget needs mu or eps: {spec!r}")
    delta = float(spec.get("delta", 0.0))
    if isinstance(value, dict):
        if "uniform" not in value:
            raise ConfigurationError(f"unsupported budget distribution {value!r}")
        lo, hi = value["uniform"]
        return PerIndividualBudget.uniform(kind, float(lo), float(hi), delta)
    if kind == GDP:
        return FixedBudget(PrivacyBudget.gdp(value))
    if kind == APPROX:
        return FixedBudget(PrivacyBudget.approx(value, delta))
    return FixedBudget(PrivacyBudget.pure(value))


def budget_label(spec) -> str:
    if spec is None:
        return "nonprivate"
    parts = []
    for k in ("mu", "eps", "delta"):
        if k in spec:
            v = spec[k]
            if isinstance(v, dict):
                lo, hi = v["uniform"]
                parts.append(f"{k}U{lo}-{hi}")
            else:
                parts.append(f"{k}{v}")
    return "_".join(parts)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    design: dict = field(default_factory=lambda: {"kind": LINEAR, "d": [5], "sigma": 2.0, "sigma_z": 1.0})
    loss: dict = field(default_factory=lambda: {"c": 1.345, "weighting": "mallows"})
    mechanism: str = GDP
    budgets: list = field(default_factory=lambda: [{"mu": 2.0}])
    eta: list = field(default_factory=lambda: [0.2])
    alpha: list = field(default_factory=lambda: [0.5])
    n: int = DESK_SCALE["n"]
    replications: int = DESK_SCALE["replications"]
    checkpoints: int = 30
    holdout: int = 10_000
    seed: int = 0
    noise_multiplier: float | None = None
    theta0: str = "zeros"
    output: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(obj))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.design.get("kind", LINEAR) not in (LINEAR, LOGISTIC):
            raise ConfigurationError(f"unknown design kind {self.design.get('kind')!r}")
        if self.mechanism != NONE and self.mechanism not in MECHANISMS:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if self.n < 1 or self.replications < 1:
            raise ConfigurationError("n and replications must be positive")
        if self.theta0 not in ("zeros", "uniform"):
            raise ConfigurationError("theta0 must be 'zeros' or 'uniform'")
        for a in self.alpha:
            StepSchedule(1.0, float(a))
        for e in self.eta:
            StepSchedule(float(e), 0.0)
        if self.mechanism != NONE:
            if not self.budgets:
                raise ConfigurationError("a private run needs at least one budget")
            for d in _as_list(self.design.get("d", 5)):
                for b in self.budgets:
                    src = parse_budget(b)
                    check_mechanism(self.mechanism, src, _make_loss(self.design, self.loss, int(d)).dim)

    def scaled(self, paper_scale: bool) -> "ExperimentConfig":
        if not paper_scale:
            return self
        out = copy.deepcopy(self)
        out.n = FULL_SCALE["n"]
        out.replications = FULL_SCALE["replications"]
        return out

    def cells(self) -> list[dict]:
        budgets = self.budgets if self.mechanism != NONE else [None]
        cells = []
        for d, b, eta, alpha in itertools.product(_as_list(self.design.get("d", 5)), budgets,
                                                  self.eta, self.alpha):
            cells.append(make_cell(self, int(d), b, float(eta), float(alpha)))
        return cells


def config_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _design_for(design_cfg: dict, d: int, n: int) -> SyntheticDesign:
    beta = design_cfg.get("beta")
    return SyntheticDesign(
        kind=design_cfg.get("kind", LINEAR), d=d,
        beta_true=None if beta is None else np.asarray(beta, dtype=float),
        sigma=float(design_cfg.get("sigma", 2.0)), sigma_z=float(design_cfg.get("sigma_z", 1.0)), n=n,
    )


def _make_loss(design_cfg: dict, loss_cfg: dict, d: int):
    kind = design_cfg.get("kind", LINEAR)
    weighting = loss_cfg.get("weighting", "mallows")
    if weighting not in ("mallows", "clip"):
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    q = d + 1
    if kind == LINEAR:
        c = float(loss_cfg.get("c", 1.345))
        if weighting == "mallows":
            return HuberScaleLoss(q, c)
        threshold = loss_cfg.get("clip") or HuberScaleLoss(q, c).c0
        return ClippedLoss(HuberScaleLoss(q, c, weighted=False), float(threshold))
    if weighting == "mallows":
        return LogisticLoss(q)
    threshold = loss_cfg.get("clip") or LogisticLoss(q).c0
    return ClippedLoss(LogisticLoss(q, weighted=False), float(threshold))


def make_cell(cfg: ExperimentConfig, d: int, budget, eta: float, alpha: float) -> dict:
    design_identity = {k: cfg.design.get(k) for k in ("kind", "sigma", "sigma_z", "beta")}
    design_identity["d"] = d
    identity = {
        "design": design_identity,
        "loss": cfg.loss,
        "mechanism": cfg.mechanism,
        "budget": budget,
        "eta": eta,
        "alpha": alpha,
        "noise_multiplier": cfg.noise_multiplier,
        "theta0": cfg.theta0,
    }
    label = f"d{d}_{budget_label(budget)}_eta{eta:g}_alpha{alpha:.4g}"
    if cfg.loss.get("weighting", "mallows") != "mallows":
        label += "_" + cfg.loss["weighting"]
    return {
        "label": label,
        "design_key": stable_hash(json.dumps(design_identity, sort_keys=True)),
        "cell_key": stable_hash(json.dumps(identity, sort_keys=True)),
        "d": d,
        "budget": budget,
        "eta": eta,
        "alpha": alpha,
        "design": cfg.design,
        "loss": cfg.loss,
        "mechanism": cfg.mechanism,
        "n": cfg.n,
        "replications": cfg.replications,
        "checkpoints": cfg.checkpoints,
        "holdout": cfg.holdout,
        "seed": cfg.seed,
        "noise_multiplier": cfg.noise_multiplier,
        "theta0": cfg.theta0,
    }


# -- running cells -----------------------------------------------------------------

@dataclass
class CellResult:
    cell: dict
    trajectory: Trajectory
    fits: dict
    relative_orders: dict
    flags: dict
    final_dist: np.ndarray
    final_dist_bar: np.ndarray
    final_theta: np.ndarray
    final_theta_bar: np.ndarray
    ledgers: list
    theta_star: np.ndarray

    def summary(self) -> dict:
        ledgers = [l.to_json() for l in self.ledgers]
        return {
            "label": self.cell["label"],
            "params": {k: self.cell[k] for k in ("d", "budget", "eta", "alpha", "mechanism",
                                                 "noise_multiplier", "theta0")},
            "streams": {
                "seed": self.cell["seed"],
                "data": ["data", self.cell["design_key"], "<replication>"],
                "noise": ["noise", self.cell["cell_key"], "<replication>"],
                "holdout": ["holdout", self.cell["design_key"]],
            },
            "ledger": _merge_ledgers(self.ledgers),
            "ledgers": ledgers,
            "fits": {k: None if v is None else asdict(v) for k, v in self.fits.items()},
            "relative_orders": self.relative_orders,
            "flags": self.flags,
            "final": {
                "delta": float(self.final_dist.mean()),
                "delta_bar": float(self.final_dist_bar.mean()),
                "bar_better_fraction": float(np.mean(self.final_dist_bar < self.final_dist)),
            },
        }


def _merge_ledgers(ledgers: list[PrivacyLedger]) -> dict:
    """Worst case over replications (each replication is its own population)."""
    if not ledgers or ledgers[0].family is None:
        return PrivacyLedger().to_json()
    return {
        "kind": ledgers[0].family,
        "max_eps": max(l.max_eps for l in ledgers),
        "max_delta": max(l.max_delta for l in ledgers),
        "max_mu": max(l.max_mu for l in ledgers),
        "count": ledgers[0].count,
    }


def _theta0(cell: dict, p: int, R: int):
    if cell["theta0"] == "zeros":
        return None
    return np.stack([RngHandle(cell["seed"], ("init", cell["cell_key"], r)).generator.uniform(0, 1, p)
                     for r in range(R)])


def run_cell(cell: dict) -> CellResult:
    d, R, n, seed = cell["d"], cell["replications"], cell["n"], cell["seed"]
    design = _design_for(cell["design"], d, n)
    loss = _make_loss(cell["design"], cell["loss"], d)
    private = cell["mechanism"] != NONE
    source = parse_budget(cell["budget"]) if private else None
    streams = [design_chunks(design, RngHandle(seed, ("data", cell["design_key"], r))) for r in range(R)]
    noise = [RngHandle(seed, ("noise", cell["cell_key"], r)) for r in range(R)] if private else None
    cps = log_checkpoints(n, cell["checkpoints"])
    log.info("cell %s: R=%d n=%d", cell["label"], R, n)
    result = run_batch(loss, StepSchedule(cell["eta"], cell["alpha"]), source,
                       cell["mechanism"] if private else None, streams, cps, noise,
                       theta0=_theta0(cell, loss.dim, R), c0=cell["noise_multiplier"])
    theta_star = design.theta_star
    holdout = sample_dataset(design, RngHandle(seed, ("holdout", cell["design_key"])), cell["holdout"])
    traj = Trajectory.from_run(result, theta_star, loss, holdout)

    fits = {}
    for name in ("delta", "delta_bar", "gap", "gap_bar"):
        try:
            fits[name] = estimate_rate(traj.checkpoints, traj.series(name))
        except DomainError:
            fits[name] = None
    try:
        orders = trajectory_relative_orders(traj)
    except DomainError:
        orders = {"r": None, "R": None}
    flags = {
        "nonconvergent": bool(fits["delta"] is not None and flag_nonconvergent(fits["delta"])),
        "gap_below_noise": [int(c) for c in traj.checkpoints[traj.gap_flags()]],
    }
    return CellResult(
        cell, traj, fits, orders, flags,
        param_distance(result.thetas[:, -1], theta_star),
        param_distance(result.theta_bars[:, -1], theta_star),
        result.thetas[:, -1], result.theta_bars[:, -1], result.ledgers, theta_star,
    )


def _run_cells(cells: list[dict], jobs: int = 1) -> list[CellResult]:
    if jobs <= 1 or len(cells) == 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, cells))


def _write_replications(res: CellResult, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        p = res.final_theta.shape[1]
        w.writerow(["replication", "delta_final", "delta_bar_final"]
                   + [f"theta_{j}" for j in range(p)] + [f"theta_bar_{j}" for j in range(p)])
        for r in range(len(res.final_dist)):
            w.writerow([r, repr(float(res.final_dist[r])), repr(float(res.final_dist_bar[r]))]
                       + [repr(float(v)) for v in res.final_theta[r]]
                       + [repr(float(v)) for v in res.final_theta_bar[r]])


def _write_json(obj, path: Path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


@dataclass
class ExperimentResult:
    out_dir: Path | None
    cells: list[CellResult]
    extra: dict = field(default_factory=dict)

    def cell(self, label_part: str) -> CellResult:
        hits = [c for c in self.cells if label_part in c.cell["label"]]
        if len(hits) != 1:
            raise KeyError(f"{label_part!r} matches {len(hits)} cells")
        return hits[0]


def _emit(kind: str, cfg_dict: dict, results: list[CellResult], out_dir, extra=None) -> Path | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        res.trajectory.to_csv(out / f"{res.cell['label']}.csv")
        _write_replications(res, out / f"{res.cell['label']}_replications.csv")
    manifest = {
        "kind": kind,
        "package_version": __version__,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "cells": [r.summary() for r in results],
    }
    if extra:
        manifest["extra"] = extra
    _write_json(manifest, out / "manifest.json")
    _write_json({r.cell["label"]: {"merged": _merge_ledgers(r.ledgers),
                                   "replications": [l.to_json() for l in r.ledgers]}
                 for r in results}, out / "ledger.json")
    return out


def run_experiment(config, jobs: int = 1, out_dir=None) -> ExperimentResult:
    """Run every grid cell of ``config`` and write one CSV per cell plus a manifest."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    cfg.validate()
    cells = cfg.cells()
    results = _run_cells(cells, jobs)
    out = _emit("run", cfg.to_dict(), results, out_dir if out_dir is not None else cfg.output)
    return ExperimentResult(out, results)


# -- mechanism comparison ----------------------------------------------------------

@dataclass
class ComparisonConfig:
    name: str = "mechanism-comparison"
    gdp_mu: float = 1.0
    laplace_eps: list = field(default_factory=lambda: [1.0, 2.0, 3.0])
    d: list = field(default_factory=lambda: [5, 10])
    design: dict = field(default_factory=lambda: {"kind": LINEAR, "sigma": 2.0, "sigma_z": 1.0})
    loss: dict = field(default_factory=lambda: {"c": 1.345, "weighting": "mallows"})
    eta: float = 0.2
    alpha: float = 0.5
    n: int = DESK_SCALE["n"]
    replications: int = DESK_SCALE["replications"]
    checkpoints: int = 30
    holdout: int = 10_000
    seed: int = 0
    output: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ComparisonConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(obj))

    def to_dict(self):
        return asdict(self)

    def sub_config(self, mechanism: str, budgets: list) -> ExperimentConfig:
        design = dict(self.design, d=list(self.d))
        return ExperimentConfig(
            name=self.name, design=design, loss=self.loss, mechanism=mechanism, budgets=budgets,
            eta=[self.eta], alpha=[self.alpha], n=self.n, replications=self.replications,
            checkpoints=self.checkpoints, holdout=self.holdout, seed=self.seed,
        )


def run_mechanism_comparison(config, jobs: int = 1, out_dir=None) -> ExperimentResult:
    """Laplace eps-LDP runs against a mu-GDP run on identical data streams."""
    cfg = config if isinstance(config, ComparisonConfig) else ComparisonConfig.from_dict(config)
    if not cfg.laplace_eps:
        raise ConfigurationError("comparison needs at least one Laplace epsilon")
    gdp_cfg = cfg.sub_config(GDP, [{"mu": cfg.gdp_mu}])
    lap_cfg = cfg.sub_config("laplace", [{"eps": e} for e in cfg.laplace_eps])
    gdp_cfg.validate()
    lap_cfg.validate()
    cells = gdp_cfg.cells() + lap_cfg.cells()
    for c in cells:
        c["label"] = f"{c['mechanism']}_{c['label']}"
    results = _run_cells(cells, jobs)

    table = [{"mu": cfg.gdp_mu, "eps": float(e), "delta": gdp_to_dp(cfg.gdp_mu, float(e))}
             for e in cfg.laplace_eps]
    by = {(r.cell["mechanism"], r.cell["d"], budget_label(r.cell["budget"])): r for r in results}
    comparisons = []
    gdp_key = budget_label({"mu": cfg.gdp_mu})
    for d in cfg.d:
        g = by[(GDP, d, gdp_key)]
        for e in cfg.laplace_eps:
            lap = by[("laplace", d, budget_label({"eps": e}))]
            comparisons.append({
                "d": d, "eps": e,
                "gdp_mean_delta_bar": float(g.final_dist_bar.mean()),
                "laplace_mean_delta_bar": float(lap.final_dist_bar.mean()),
                "laplace_over_gdp": float(lap.final_dist_bar.mean() / g.final_dist_bar.mean()),
                "gdp_better_fraction": float(np.mean(g.final_dist_bar < lap.final_dist_bar)),
            })
    growth = {}
    if len(cfg.d) >= 2:
        d_lo, d_hi = min(cfg.d), max(cfg.d)
        gdp_growth = (by[(GDP, d_hi, gdp_key)].final_dist_bar.mean()
                      / by[(GDP, d_lo, gdp_key)].final_dist_bar.mean())
        for e in cfg.laplace_eps:
            k = budget_label({"eps": e})
            growth[str(e)] = {
                "laplace": float(by[("laplace", d_hi, k)].final_dist_bar.mean()
                                 / by[("laplace", d_lo, k)].final_dist_bar.mean()),
                "gdp": float(gdp_growth),
            }
    extra = {"matching_table": table, "comparisons": comparisons, "dimension_growth": growth}
    target = out_dir if out_dir is not None else cfg.output
    out = _emit("compare-mechanisms", cfg.to_dict(), results, target, extra)
    if out is not None:
        with open(out / "gdp_to_dp.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mu", "eps", "delta"])
            for row in table:
                w.writerow([row["mu"], row["eps"], f"{row['delta']:.6g}"])
    return ExperimentResult(out, results, extra)


# -- clipping versus Mallows weighting ----------------------------------------------

@dataclass
class ClippingConfig:
    name: str = "clipping-bias"
    d: int = 3
    beta: list | None = None
    mechanism: str = GDP
    budget: dict = field(default_factory=lambda: {"mu": 2.0})
    clip: float | None = None
    eta: float = 0.2
    alpha: float = 0.5
    n: int = 300_000
    replications: int = 100
    checkpoints: int = 30
    holdout: int = 10_000
    seed: int = 0
    output: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ClippingConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(obj))

    def to_dict(self):
        return asdict(self)

    def sub_config(self, weighting: str) -> ExperimentConfig:
        loss = {"weighting": weighting}
        if weighting == "clip" and self.clip is not None:
            loss["clip"] = self.clip
        return ExperimentConfig(
            name=self.name,
            design={"kind": LOGISTIC, "d": [self.d], "sigma_z": 1.0, "beta": self.beta},
            loss=loss, mechanism=self.mechanism, budgets=[self.budget], eta=[self.eta],
            alpha=[self.alpha], n=self.n, replications=self.replications,
            checkpoints=self.checkpoints, holdout=self.holdout, seed=self.seed,
        )


def bias_table(estimates: np.ndarray, truth: np.ndarray) -> list[dict]:
    """Per-coordinate mean, Monte-Carlo standard error and z-score against ``truth``."""
    R = estimates.shape[0]
    mean = estimates.mean(axis=0)
    se = estimates.std(axis=0, ddof=1) / math.sqrt(R)
    return [{"coord": j, "mean": float(mean[j]), "se": float(se[j]),
             "z": float((mean[j] - truth[j]) / se[j])} for j in range(len(truth))]


def run_clipping_bias(config, jobs: int = 1, out_dir=None) -> ExperimentResult:
    """Logistic LDP-SGD/ASGD with Mallows weights versus norm clipping at the same bound."""
    cfg = config if isinstance(config, ClippingConfig) else ClippingConfig.from_dict(config)
    subs = {w: cfg.sub_config(w) for w in ("mallows", "clip")}
    cells = []
    for w, sc in subs.items():
        sc.validate()
        (cell,) = sc.cells()
        cell["label"] = f"{w}_{cell['label']}"
        cells.append(cell)
    results = _run_cells(cells, jobs)
    truth = results[0].theta_star
    tables = {}
    for w, res in zip(subs, results):
        tables[w] = {"sgd": bias_table(res.final_theta, truth),
                     "asgd": bias_table(res.final_theta_bar, truth)}
    extra = {"truth": truth.tolist(), "bias": tables,
             "ledgers_identical": _merge_ledgers(results[0].ledgers) == _merge_ledgers(results[1].ledgers)}
    target = out_dir if out_dir is not None else cfg.output
    out = _emit("clipping-bias", cfg.to_dict(), results, target, extra)
    if out is not None:
        with open(out / "bias_table.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["variant", "estimator", "coord", "mean", "se", "z"])
            for w, t in tables.items():
                for est, rows in t.items():
                    for row in rows:
                        wr.writerow([w, est, row["coord"], repr(row["mean"]), repr(row["se"]),
                                     repr(row["z"])])
        with open(out / "estimates.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["variant", "estimator", "replication", "coord", "value"])
            for w, res in zip(subs, results):
                for est, arr in (("sgd", res.final_theta), ("asgd", res.final_theta_bar)):
                    for r in range(arr.shape[0]):
                        for j in range(arr.shape[1]):
                            wr.writerow([w, est, r, j, repr(float(arr[r, j]))])
    return ExperimentResult(out, results, extra)


# -- insurance pipeline ---------------------------------------------------------------

@dataclass
class IngestConfig:
    name: str = "insurance"
    csv: str | None = None
    synthetic_rows: int = 100_000
    synthetic_seed: int = 0
    task: str = CLASSIFICATION
    mechanism: str = GDP
    budgets: list = field(default_factory=lambda: [{"mu": 2.0}])
    eta: list = field(default_factory=lambda: [0.5])
    alpha: list = field(default_factory=lambda: [1 / 3])
    c: float = 1.345
    replications: int = 50
    eval_every: int = 10_000
    train_fraction: float = 0.8
    train_eval_rows: int = 10_000
    seed: int = 0
    theta0: str = "uniform"
    output: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "IngestConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(obj))
        if cfg.task not in (CLASSIFICATION, REGRESSION):
            raise ConfigurationError(f"unknown task {cfg.task!r}")
        return cfg

    def to_dict(self):
        return asdict(self)


def evaluate(loss, theta, X, y, dataset) -> dict:
    """Held-out metrics for a batch of parameters ``theta`` of shape (R, p).

    Classification: unweighted cross-entropy and accuracy. Regression: mean squared
    error of de-standardized predictions, in the response's original units.
    """
    if dataset.task == CLASSIFICATION:
        ce_loss = MultinomialLoss(loss.n_features, loss.n_classes, weighted=False)
        ce = ce_loss.value(theta[:, None, :], X, y)
        acc = (ce_loss.predict(theta[:, None, :], X) == y.astype(int)).mean(axis=-1)
        return {"loss": ce.mean(axis=-1), "accuracy": acc}
    mean, sd = dataset.response_scale
    pred = np.sum(theta[:, None, :-1] * X, axis=-1) * sd + mean
    truth = y * sd + mean
    return {"loss": np.mean((pred - truth) ** 2, axis=-1), "accuracy": None}


def load_ingest_dataset(cfg: IngestConfig):
    plan = SplitPlan(cfg.train_fraction, cfg.seed)
    if cfg.csv:
        return load_and_encode(cfg.csv, plan=plan, task=cfg.task)
    df = synthetic_insurance(cfg.synthetic_rows, RngHandle(cfg.synthetic_seed, ("insurance",)))
    return load_and_encode(df, plan=plan, task=cfg.task)


def run_ingest(config, jobs: int = 1, out_dir=None) -> ExperimentResult:
    """Permuted single-pass LDP-SGD/ASGD on the encoded insurance table."""
    cfg = config if isinstance(config, IngestConfig) else IngestConfig.from_dict(config)
    ds = load_ingest_dataset(cfg)
    if cfg.task == CLASSIFICATION:
        loss = MultinomialLoss(ds.n_features, ds.n_classes)
    else:
        loss = HuberScaleLoss(ds.n_features, cfg.c)
    n = len(ds.y_train)
    points = evaluation_points(n, cfg.eval_every)
    m = min(cfg.train_eval_rows, n)
    X_tr, y_tr = ds.X_train[:m], ds.y_train[:m]
    R = cfg.replications
    private = cfg.mechanism != NONE
    budgets = cfg.budgets if private else [None]
    cells = []
    for b, eta, alpha in itertools.product(budgets, cfg.eta, cfg.alpha):
        identity = {"task": cfg.task, "mechanism": cfg.mechanism, "budget": b, "eta": eta,
                    "alpha": alpha, "theta0": cfg.theta0}
        key = stable_hash(json.dumps(identity, sort_keys=True))
        label = f"{cfg.task}_{budget_label(b)}_eta{eta:g}_alpha{alpha:.4g}"
        if private:
            source = parse_budget(b)
            check_mechanism(cfg.mechanism, source, loss.dim)
        theta0 = None
        if cfg.theta0 == "uniform":
            theta0 = np.stack([RngHandle(cfg.seed, ("init", key, r)).generator.uniform(0, 1, loss.dim)
                               for r in range(R)])
        streams = [permuted_chunks(ds, RngHandle(cfg.seed, ("permutation", r))) for r in range(R)]
        noise = [RngHandle(cfg.seed, ("noise", key, r)) for r in range(R)] if private else None
        res = run_batch(loss, StepSchedule(float(eta), float(alpha)),
                        parse_budget(b) if private else None, cfg.mechanism if private else None,
                        streams, points, noise, theta0=theta0)
        rows = {}
        for tag, snaps in (("", res.thetas), ("_bar", res.theta_bars)):
            tr = [evaluate(loss, snaps[:, k], X_tr, y_tr, ds) for k in range(len(points))]
            te = [evaluate(loss, snaps[:, k], ds.X_test, ds.y_test, ds) for k in range(len(points))]
            rows["train_loss" + tag] = np.stack([t["loss"] for t in tr], axis=1)
            rows["test_loss" + tag] = np.stack([t["loss"] for t in te], axis=1)
            if cfg.task == CLASSIFICATION:
                rows["test_accuracy" + tag] = np.stack([t["accuracy"] for t in te], axis=1)
        cells.append({"label": label, "key": key, "metrics": rows, "ledgers": res.ledgers,
                      "params": identity})

    extra = {
        "majority_accuracy": ds.majority_accuracy() if cfg.task == CLASSIFICATION else None,
        "class_proportions": (np.bincount(ds.y_train.astype(int), minlength=3) / n).tolist()
        if cfg.task == CLASSIFICATION else None,
        "evaluation_points": points.tolist(),
        "cells": cells,
    }
    target = out_dir if out_dir is not None else cfg.output
    out = None
    if target is not None:
        out = Path(target)
        out.mkdir(parents=True, exist_ok=True)
        for cell in cells:
            cols = list(cell["metrics"])
            sub = out / cell["label"]
            sub.mkdir(exist_ok=True)
            for r in range(R):
                _write_eval_csv(sub / f"replication_{r:03d}.csv", points, cols,
                                [cell["metrics"][c][r] for c in cols])
            _write_eval_csv(out / f"{cell['label']}_mean.csv", points, cols,
                            [cell["metrics"][c].mean(axis=0) for c in cols])
        manifest = {
            "kind": "ingest-run", "package_version": __version__, "config": cfg.to_dict(),
            "config_hash": config_hash(cfg.to_dict()),
            "majority_accuracy": extra["majority_accuracy"],
            "class_proportions": extra["class_proportions"],
            "cells": [{"label": c["label"], "params": c["params"],
                       "ledger": _merge_ledgers(c["ledgers"]),
                       "final": {k: float(v[:, -1].mean()) for k, v in c["metrics"].items()}}
                      for c in cells],
        }
        _write_json(manifest, out / "manifest.json")
        _write_json({c["label"]: [l.to_json() for l in c["ledgers"]] for c in cells}, out / "ledger.json")
    return ExperimentResult(out, [], extra)


def _write_eval_csv(path, points, cols, series):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + cols)
        for k, it in enumerate(points):
            w.writerow([int(it)] + [repr(float(s[k])) for s in series])


# -- built-in recipes ----------------------------------------------------------------

RECIPES = {
    "fig2-right": ("run", {"name": "fig2-right", "budgets": [{"mu": 2.0}], "alpha": [0.5],
                           "eta": [0.2], "design": {"kind": LINEAR, "d": [5], "sigma": 2.0, "sigma_z": 1.0}}),
    "budget-mix": ("run", {"name": "budget-mix", "budgets": [{"mu": 1.0}, {"mu": 2.0}, {"mu": {"uniform": [1.0, 2.0]}}],
                          "alpha": [0.5], "eta": [0.2]}),
    "rates": ("run", {"name": "rates", "budgets": [{"mu": 2.0}], "eta": [0.2],
                      "alpha": [1 / 3, 0.5, 2 / 3, 1.0]}),
    "linear-grid": ("run", {"name": "linear-grid", "design": {"kind": LINEAR, "d": [5, 10, 20], "sigma": 2.0, "sigma_z": 1.0},
                            "budgets": [{"mu": 0.5}, {"mu": 1.0}, {"mu": 2.0}, {"mu": 3.0}],
                            "eta": [0.2], "alpha": [1 / 3, 0.5, 2 / 3, 1.0]}),
    "logistic-grid": ("run", {"name": "logistic-grid", "design": {"kind": LOGISTIC, "d": [5], "sigma_z": 1.0},
                              "loss": {"weighting": "mallows"},
                              "budgets": [{"mu": 0.5}, {"mu": 1.0}, {"mu": 2.0}, {"mu": 3.0}],
                              "eta": [0.2], "alpha": [1 / 3, 0.5, 2 / 3, 1.0]}),
    "noise-off": ("run", {"name": "noise-off", "budgets": [{"mu": 2.0}], "noise_multiplier": 0.0}),
    "nonprivate": ("run", {"name": "nonprivate", "mechanism": NONE, "budgets": []}),
    "mechanisms": ("compare-mechanisms", {}),
    "clipping": ("clipping-bias", {}),
    "insurance-multinomial": ("ingest-run", {"task": CLASSIFICATION, "alpha": [1 / 3]}),
    "insurance-huber": ("ingest-run", {"task": REGRESSION, "alpha": [0.5]}),
}


def recipe_config(name: str):
    if name not in RECIPES:
        raise ConfigurationError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    kind, overrides = RECIPES[name]
    factory = {"run": ExperimentConfig, "compare-mechanisms": ComparisonConfig,
               "clipping-bias": ClippingConfig, "ingest-run": IngestConfig}[kind]
    return kind, factory.from_dict(overrides)
