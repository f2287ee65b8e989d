"""Synthetic panels with known generating costs.

Costs are drawn with rows summing to one, marginals are drawn at random
and the observed plan is the converged entropic plan for that cost. The
generating cost is deliberately not of gravity form: it carries no
relation to the bilateral covariates emitted alongside the panel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_ingest import (
    EXPORT,
    IMPORT,
    OTHER,
    CountryIndex,
    DualReport,
    TradePanel,
    TradeRecord,
    build_panel,
    format_float,
    pool_countries,
    write_json,
    write_matrix_csv,
)
from .ot_core import CostMatrix, Marginals, SolverOptions, TransportPlan, sinkhorn


@dataclass(frozen=True)
class GeneratorConfig:
    n_countries: int = 10
    years: int = 5
    first_year: int = 2000
    epsilon: float = 0.1
    noise: float = 0.0
    total_mass: float = 1.0e6
    concentration: float = 4.0
    drift: float = 0.15
    mask_diagonal: bool = False
    seed: int = 0


@dataclass
class SyntheticData:
    panel: TradePanel
    true_costs: dict[int, np.ndarray]
    true_plans: dict[int, np.ndarray]
    records: list[TradeRecord]
    bilateral: list[dict] = field(default_factory=list)
    country_table: list[dict] = field(default_factory=list)
    config: GeneratorConfig | None = None


def _row_stochastic(x: np.ndarray) -> np.ndarray:
    return x / x.sum(axis=1, keepdims=True)


def generate(cfg: GeneratorConfig) -> SyntheticData:
    rng = np.random.default_rng(cfg.seed)
    names = [f"C{i + 1:02d}" for i in range(cfg.n_countries)] + [OTHER]
    k = len(names)
    base = rng.dirichlet(np.full(k, cfg.concentration), size=k)
    sizes_out = rng.lognormal(0.0, 1.0, size=k)
    sizes_in = rng.lognormal(0.0, 1.0, size=k)
    opts = SolverOptions(tolerance=1e-13, max_iterations=100_000)

    costs, plans, views = {}, {}, {}
    for t in range(cfg.years):
        year = cfg.first_year + t
        c = _row_stochastic(base * np.exp(cfg.drift * rng.standard_normal((k, k))))
        mu = sizes_out * np.exp(0.1 * rng.standard_normal(k))
        nu = sizes_in * np.exp(0.1 * rng.standard_normal(k))
        mu = cfg.total_mass * mu / mu.sum()
        nu = cfg.total_mass * nu / nu.sum()
        res = sinkhorn(CostMatrix(c, cfg.epsilon), Marginals(mu, nu), opts)
        plan = res.plan.values
        if cfg.noise > 0:
            e_view = plan * np.exp(cfg.noise * rng.standard_normal((k, k)))
            i_view = plan * np.exp(cfg.noise * rng.standard_normal((k, k)))
        else:
            e_view, i_view = plan.copy(), plan.copy()
        costs[year], plans[year], views[year] = c, plan, (e_view, i_view)

    records = []
    for year, (e_view, i_view) in views.items():
        for a in range(k):
            for b in range(k):
                if a == b:
                    continue
                records.append(TradeRecord(names[a], names[b], year, EXPORT, float(e_view[a, b]), "t"))
                records.append(TradeRecord(names[b], names[a], year, IMPORT, float(i_view[a, b]), "t"))

    if cfg.mask_diagonal:
        index = pool_countries(records, 1.0)
        panel = build_panel(records, index, provenance={"source": "synthetic", "seed": cfg.seed})
        order = [names.index(lab) for lab in index.labels]
        costs = {y: c[np.ix_(order, order)] for y, c in costs.items()}
        plans = {y: p[np.ix_(order, order)] for y, p in plans.items()}
        names = list(index.labels)
    else:
        index = CountryIndex(tuple(names[:-1]), 1.0)
        reports = [
            DualReport(TransportPlan(e), TransportPlan(i), year) for year, (e, i) in views.items()
        ]
        panel = TradePanel(index, sorted(views), reports, {"source": "synthetic", "seed": cfg.seed, "threshold": 1.0})

    bilateral, country_table = _covariates(rng, names, sorted(views), plans)
    return SyntheticData(panel, costs, plans, records, bilateral, country_table, cfg)


def _covariates(rng, names, years, plans):
    k = len(names)
    coords = rng.uniform(-1.0, 1.0, size=(k, 2))
    dist = 200.0 + 8000.0 * np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    np.fill_diagonal(dist, 150.0)
    contig = (dist < 2500.0).astype(int)
    colony = rng.random((k, k)) < 0.1
    comlang = rng.random((k, k)) < 0.2
    rta = rng.random((k, k)) < 0.3
    tariff = np.round(rng.uniform(0.0, 25.0, size=(k, k)), 2)
    bilateral, country_table = [], []
    for year in years:
        plan = plans[year]
        for a in range(k):
            for b in range(k):
                bilateral.append({
                    "exporter": names[a], "importer": names[b], "year": year,
                    "dist_km": float(dist[a, b]), "contig": int(contig[a, b]),
                    "colony": int(colony[a, b] or colony[b, a]),
                    "comlang": int(comlang[a, b] or comlang[b, a]),
                    "rta": int(rta[a, b] or rta[b, a]),
                    "tariff": 0.0 if rta[a, b] else float(tariff[a, b]),
                })
        for a in range(k):
            country_table.append({
                "country": names[a], "year": year,
                "output": float(plan[a, :].sum()), "expenditure": float(plan[:, a].sum()),
            })
    return bilateral, country_table


BILATERAL_HEADER = ["exporter", "importer", "year", "dist_km", "contig", "colony", "comlang", "rta", "tariff"]
COUNTRY_HEADER = ["country", "year", "output", "expenditure"]
RECORD_HEADER = ["Reporter Country Code", "Partner Country Code", "Element", "Year", "Unit", "Value"]


def _write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(row[h]) if isinstance(row[h], float) else row[h] for h in header])


def write_synthetic(data: SyntheticData, out_dir) -> Path:
    """Write ``panel/``, ``truth/``, ``records.csv`` and the covariate tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.panel.save(out / "panel")
    truth = out / "truth"
    truth.mkdir(exist_ok=True)
    labels = data.panel.country_index.labels
    for year in data.panel.years:
        full = np.ones(data.true_costs[year].shape, dtype=bool)
        write_matrix_csv(truth / f"C_{year}.csv", data.true_costs[year], full, labels)
        write_matrix_csv(truth / f"T_{year}.csv", data.true_plans[year], full, labels)
    cfg = data.config
    write_json(truth / "truth.json", {
        "labels": list(labels), "years": list(data.panel.years),
        "epsilon": cfg.epsilon if cfg else None,
        "config": cfg.__dict__ if cfg else None,
    })
    label = {EXPORT: "Export Quantity", IMPORT: "Import Quantity"}
    _write_table(out / "records.csv", RECORD_HEADER, [
        {"Reporter Country Code": r.reporter_id, "Partner Country Code": r.partner_id,
         "Element": label[r.element], "Year": r.year, "Unit": r.unit, "Value": r.value}
        for r in data.records
    ])
    _write_table(out / "bilateral.csv", BILATERAL_HEADER, data.bilateral)
    _write_table(out / "countries.csv", COUNTRY_HEADER, data.country_table)
    return out
