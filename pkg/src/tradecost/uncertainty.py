"""Ensembles of costs and plans from resampled dual reports.

Each sample picks, entry by entry and with equal probability, the exporter-
or importer-reported value, pushes the sampled plan through the trained
network and solves for the corresponding plan.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_ingest import DualReport, format_float
from .errors import InsufficientSamples
from .inverse_model import MlpParameters, forward_batch
from .ot_core import CostMatrix, SolverOptions, TransportPlan, sinkhorn_batch

__all__ = [
    "DualReport",
    "CostEnsemble",
    "sample_rng",
    "sample_plan",
    "selection_pattern",
    "build_ensemble",
    "solve_plans",
    "summarize",
    "write_ensemble_csv",
]


def sample_rng(seed: int, year: int, index: int) -> np.random.Generator:
    """Independent stream for one ensemble member."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(year, index)))


def selection_pattern(report: DualReport, rng: np.random.Generator) -> np.ndarray:
    """Boolean matrix: True where the exporter value is taken."""
    e, i = report.exporter_plan.mask, report.importer_plan.mask
    coin = rng.random(report.shape) < 0.5
    return np.where(e & i, coin, e)


def _apply(report: DualReport, take_exporter: np.ndarray) -> TransportPlan:
    e, i = report.exporter_plan, report.importer_plan
    values = np.where(take_exporter, e.values, i.values)
    return TransportPlan(values, e.mask | i.mask)


def sample_plan(report: DualReport, rng: np.random.Generator) -> TransportPlan:
    return _apply(report, selection_pattern(report, rng))


@dataclass
class CostEnsemble:
    year: int
    costs: np.ndarray
    plans: np.ndarray
    observed: np.ndarray
    seed: int
    epsilon: float
    failed: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.costs.shape[0]

    @property
    def samples(self) -> list[CostMatrix]:
        return [CostMatrix(c, self.epsilon) for c in self.costs]

    @property
    def plan_samples(self) -> list[TransportPlan]:
        return [TransportPlan(p) for p in self.plans]


def solve_plans(
    params: MlpParameters,
    stack: np.ndarray,
    epsilon: float,
    solver: SolverOptions,
    fixed_plan: np.ndarray | None = None,
):
    """Costs and re-solved plans for a ``(B, k, k)`` stack of NaN-masked plans.

    Marginals come from each input plan, or from ``fixed_plan`` for all of
    them. Returns ``(costs, plans, failed)`` with ``failed`` a boolean per
    plan for solves that missed the tolerance.
    """
    costs = forward_batch(params, stack)
    filled = np.nan_to_num(stack, nan=0.0)
    if fixed_plan is not None:
        mu = np.broadcast_to(fixed_plan.sum(axis=1), filled.shape[:2]).copy()
        nu = np.broadcast_to(fixed_plan.sum(axis=0), (filled.shape[0], filled.shape[2])).copy()
    else:
        mu, nu = filled.sum(axis=2), filled.sum(axis=1)
    total = mu.sum(axis=1, keepdims=True)
    _, _, plans, _, residual = sinkhorn_batch(
        costs, mu / total, nu / total, epsilon, solver.max_iterations, solver.tolerance
    )
    plans = plans * total[:, :, None]
    failed = ~(residual <= solver.tolerance) | ~np.all(np.isfinite(plans), axis=(1, 2))
    return costs, plans, failed


def build_ensemble(
    params: MlpParameters,
    report: DualReport,
    n: int = 1000,
    epsilon: float = 0.1,
    seed: int = 0,
    solver: SolverOptions | None = None,
    fix_marginals: bool = False,
) -> CostEnsemble:
    """``n`` cost samples and their plans for one year.

    Marginals are recomputed from every sampled plan unless
    ``fix_marginals``, in which case the reporter-averaged plan's marginals
    are used throughout. Samples whose solve does not reach the tolerance
    are listed in ``failed``.
    """
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    solver = solver or SolverOptions()
    patterns = np.stack([selection_pattern(report, sample_rng(seed, report.year, k)) for k in range(n)])
    # identical draws share one evaluation so degenerate reports give bitwise-equal samples
    flat = patterns.reshape(n, -1)
    unique, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    plans_in = [_apply(report, u.reshape(report.shape)) for u in unique]
    fixed = report.averaged().filled(0.0) if fix_marginals else None
    costs_u, plan_u, bad_u = solve_plans(params, np.stack([p.values for p in plans_in]), epsilon, solver, fixed)
    failed = [int(k) for k in np.flatnonzero(bad_u[inverse])]
    observed = report.exporter_plan.mask | report.importer_plan.mask
    return CostEnsemble(
        year=report.year,
        costs=costs_u[inverse],
        plans=plan_u[inverse],
        observed=observed,
        seed=seed,
        epsilon=epsilon,
        failed=failed,
    )


def _stats(x: np.ndarray, quantiles: Sequence[float]):
    same = np.all(x == x[0], axis=0)
    mean = np.where(same, x[0], x.mean(axis=0))
    std = np.where(same, 0.0, x.std(axis=0, ddof=1))
    qs = [np.where(same, x[0], np.quantile(x, q, axis=0)) for q in quantiles]
    return mean, std, qs


def summarize(ensemble: CostEnsemble, quantiles: Sequence[float] = (0.05, 0.95)) -> dict:
    """Per-entry mean, unbiased std and quantiles of costs and plans.

    Failed samples are dropped; entries observed by neither reporter are NaN.
    """
    keep = np.setdiff1d(np.arange(ensemble.n), ensemble.failed)
    if keep.size < 2:
        raise InsufficientSamples(f"need at least 2 usable samples, have {keep.size}")
    out = {"n_used": int(keep.size), "n_failed": len(ensemble.failed), "quantiles": list(quantiles)}
    for name, arr in (("cost", ensemble.costs[keep]), ("flow", ensemble.plans[keep])):
        mean, std, qs = _stats(arr, quantiles)
        hide = ~ensemble.observed
        out[f"mean_{name}"] = np.where(hide, np.nan, mean)
        out[f"std_{name}"] = np.where(hide, np.nan, std)
        out[f"q_{name}"] = [np.where(hide, np.nan, q) for q in qs]
    return out


ENSEMBLE_HEADER = ["year", "i", "j", "mean_cost", "std_cost", "q05", "q95", "mean_flow", "std_flow"]


def write_ensemble_csv(path, summaries: dict[int, dict], labels: Sequence[str]) -> None:
    """One row per observed (year, exporter, importer)."""

    def fmt(x):
        return format_float(x) if np.isfinite(x) else "NA"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENSEMBLE_HEADER)
        for year in sorted(summaries):
            s = summaries[year]
            lo, hi = s["q_cost"][0], s["q_cost"][-1]
            k = s["mean_cost"].shape[0]
            for a in range(k):
                for b in range(k):
                    if not np.isfinite(s["mean_cost"][a, b]):
                        continue
                    w.writerow([
                        year, labels[a], labels[b],
                        fmt(s["mean_cost"][a, b]), fmt(s["std_cost"][a, b]),
                        fmt(lo[a, b]), fmt(hi[a, b]),
                        fmt(s["mean_flow"][a, b]), fmt(s["std_flow"][a, b]),
                    ])


def read_ensemble_csv(path) -> dict[int, dict[tuple[str, str], dict[str, float]]]:
    out: dict[int, dict] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            year = int(row["year"])
            out.setdefault(year, {})[(row["i"], row["j"])] = {
                k: (float(row[k]) if row[k] != "NA" else float("nan")) for k in ENSEMBLE_HEADER[3:]
            }
    return out
