"""Accuracy metrics for estimated transport plans against reported data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data_ingest import TradePanel, format_float, write_json
from .errors import AlignmentMismatch, DegenerateVariance, EmptyComparison, ShapeMismatch


def _prepare(estimates, truths, mask):
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truths, dtype=float)
    if e.shape != t.shape:
        raise ShapeMismatch(f"estimates {e.shape} vs truths {t.shape}")
    m = np.ones(e.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != e.shape:
        raise ShapeMismatch(f"mask {m.shape} vs data {e.shape}")
    return e[m], t[m]


def rmse(estimates, truths, mask=None) -> float:
    e, t = _prepare(estimates, truths, mask)
    if e.size == 0:
        raise EmptyComparison("no unmasked pairs to compare")
    return math.sqrt(float(np.mean((e - t) ** 2)))


def rmse_in_std(estimates, exporter_values, importer_values, mask=None, return_counts: bool = False):
    """RMSE of ``(estimate - centre) / scale``.

    ``centre`` is the mean of the two reported values and ``scale`` their
    sample standard deviation (``|T^E - T^I| / sqrt(2)``). Entries where the
    reports agree have no scale and are excluded; with ``return_counts`` the
    result is ``(value, n_used, n_excluded)``.
    """
    est = np.asarray(estimates, dtype=float)
    te = np.asarray(exporter_values, dtype=float)
    ti = np.asarray(importer_values, dtype=float)
    if not (est.shape == te.shape == ti.shape):
        raise ShapeMismatch("estimates and reports must share a shape")
    m = np.isfinite(te) & np.isfinite(ti) & np.isfinite(est)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    centre = 0.5 * (te + ti)
    scale = np.abs(te - ti) / math.sqrt(2.0)
    use = m & (scale > 0)
    excluded = int(np.sum(m & ~(scale > 0)))
    if not use.any():
        raise EmptyComparison("no entries with nonzero reporting dispersion")
    z = (est[use] - centre[use]) / scale[use]
    value = math.sqrt(float(np.mean(z**2)))
    if return_counts:
        return value, int(use.sum()), excluded
    return value


def linear_fit(estimates, truths, mask=None) -> tuple[float, float, float]:
    """Least-squares line ``truth = slope * estimate + intercept`` and Pearson r."""
    e, t = _prepare(estimates, truths, mask)
    if e.size < 2:
        raise DegenerateVariance("need at least two pairs")
    de, dt = e - e.mean(), t - t.mean()
    see, stt = float(np.dot(de, de)), float(np.dot(dt, dt))
    if see == 0 or stt == 0:
        raise DegenerateVariance("estimates or truths have zero variance")
    slope = float(np.dot(de, dt)) / see
    intercept = float(t.mean() - slope * e.mean())
    r = float(np.dot(de, dt)) / math.sqrt(see * stt)
    return slope, intercept, max(-1.0, min(1.0, r))


def _aggregate(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "median": float(np.median(v)),
        "n": int(v.size),
    }


@dataclass
class ComparisonReport:
    commodity: str
    positive_only: bool
    pooled: bool
    metrics: dict[str, dict[str, dict]] = field(default_factory=dict)
    per_year: dict[str, dict] = field(default_factory=dict)
    scatter: dict[str, list[tuple]] = field(default_factory=dict)
    n_compared: int = 0

    def rows(self):
        for model, metrics in self.metrics.items():
            for metric, agg in metrics.items():
                yield (self.commodity, model, metric, agg["mean"], agg["std"], agg["median"], agg["n"])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["commodity", "model", "metric", "mean", "std", "median", "n"])
            for c, model, metric, mean, std, med, n in self.rows():
                w.writerow([c, model, metric, format_float(mean), format_float(std), format_float(med), n])

    def write_json(self, path) -> None:
        write_json(path, {
            "commodity": self.commodity,
            "positive_only": self.positive_only,
            "pooled": self.pooled,
            "n_compared": self.n_compared,
            "metrics": self.metrics,
            "per_year": self.per_year,
        })

    def write_scatter(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimate", "truth", "commodity", "model", "year", "exporter", "importer"])
            for model, pts in self.scatter.items():
                for est, tru, year, e, i in pts:
                    w.writerow([format_float(est), format_float(tru), self.commodity, model, year, e, i])


def compare_models(
    ot_results: Mapping[int, np.ndarray],
    gravity_results: Mapping[int, np.ndarray],
    panel: TradePanel,
    commodity: str = "commodity",
    positive_only: bool = True,
    pooled: bool = False,
) -> ComparisonReport:
    """Score both models' plans against the reporter-averaged data.

    RMSE and RMSE-in-std are computed per (exporter, year) and then
    aggregated by mean, standard deviation and median; ``pooled`` computes
    each over all entries at once instead. Every compared entry must carry a
    finite estimate from both models.
    """
    models = {"ot": ot_results, "gravity": gravity_results}
    labels = panel.country_index.labels
    report = ComparisonReport(commodity, positive_only, pooled)
    units = {m: {"rmse": [], "rmse_in_std": []} for m in models}
    pooled_pts = {m: {"est": [], "tru": [], "te": [], "ti": []} for m in models}
    scatter = {m: [] for m in models}
    excluded_std = 0
    for rep in panel.reports:
        year = rep.year
        avg = rep.averaged()
        truth = avg.filled(0.0)
        mask = avg.mask & ((truth > 0) if positive_only else True)
        te, ti = rep.exporter_plan.values, rep.importer_plan.values
        report.per_year[str(year)] = {}
        for model, results in models.items():
            if year not in results:
                raise AlignmentMismatch(f"{model} results lack year {year}")
            est = np.asarray(results[year], dtype=float)
            if est.shape != truth.shape:
                raise AlignmentMismatch(f"{model} year {year}: shape {est.shape} != {truth.shape}")
            if not np.all(np.isfinite(est[mask])):
                raise AlignmentMismatch(f"{model} year {year}: missing estimates on compared entries")
            detail = {}
            for a in np.flatnonzero(mask.any(axis=1)):
                row_mask = np.zeros_like(mask)
                row_mask[a] = mask[a]
                r = rmse(est, truth, row_mask)
                units[model]["rmse"].append(r)
                entry = {"rmse": r}
                try:
                    z, used, excl = rmse_in_std(est, te, ti, row_mask, return_counts=True)
                    units[model]["rmse_in_std"].append(z)
                    entry["rmse_in_std"] = z
                except EmptyComparison:
                    pass
                detail[labels[a]] = entry
            report.per_year[str(year)][model] = detail
            pooled_pts[model]["est"].append(est[mask])
            pooled_pts[model]["tru"].append(truth[mask])
            pooled_pts[model]["te"].append(np.where(mask, te, np.nan)[mask])
            pooled_pts[model]["ti"].append(np.where(mask, ti, np.nan)[mask])
            for a, b in zip(*np.nonzero(mask)):
                scatter[model].append((float(est[a, b]), float(truth[a, b]), year, labels[a], labels[b]))
        report.n_compared += int(mask.sum())
    if report.n_compared == 0:
        raise EmptyComparison("no entries to compare")
    for model in models:
        est = np.concatenate(pooled_pts[model]["est"])
        tru = np.concatenate(pooled_pts[model]["tru"])
        metrics = {}
        if pooled:
            metrics["rmse"] = _aggregate([rmse(est, tru)])
            try:
                z, used, excluded_std = rmse_in_std(
                    est, np.concatenate(pooled_pts[model]["te"]), np.concatenate(pooled_pts[model]["ti"]),
                    return_counts=True,
                )
                metrics["rmse_in_std"] = _aggregate([z])
            except EmptyComparison:
                pass
        else:
            metrics["rmse"] = _aggregate(units[model]["rmse"])
            if units[model]["rmse_in_std"]:
                metrics["rmse_in_std"] = _aggregate(units[model]["rmse_in_std"])
        try:
            slope, intercept, r = linear_fit(est, tru)
            n = int(est.size)
            metrics["fit_slope"] = {"mean": slope, "std": 0.0, "median": slope, "n": n}
            metrics["fit_intercept"] = {"mean": intercept, "std": 0.0, "median": intercept, "n": n}
            metrics["pearson_r"] = {"mean": r, "std": 0.0, "median": r, "n": n}
        except DegenerateVariance:
            pass
        report.metrics[model] = metrics
    report.scatter = scatter
    return report
