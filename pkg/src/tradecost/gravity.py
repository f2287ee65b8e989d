"""Structural gravity baseline fitted by Poisson pseudo maximum likelihood.

    log E[T_ij(t)] = kappa_i(t) + omega_j(t) + l1 log O_i + l2 log E_j + l3 log d_ij
                     + l4 CNTG + l5 CNLY + l6 LANG + l7 RTA + l8 log chi_j
                     + l9 log(1 + TRFF)

Exporter-year and importer-year fixed effects each drop one reference
level per year. With ``fe_scheme="full"`` a per-year intercept is added as
well, which absorbs the monadic covariates (log O, log E, log chi); those
are then reported as absorbed instead of estimated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data_ingest import TradePanel, format_float
from .errors import MissingCovariate, NonConvergence, RankDeficient, SchemaMismatch, Separation, ZeroTotalOutput

DENSE_NAMES = (
    "log_output",
    "log_expenditure",
    "log_distance",
    "contiguity",
    "colony",
    "common_language",
    "rta",
    "log_remoteness",
    "log1p_tariff",
)
MONADIC = ("log_output", "log_expenditure", "log_remoteness")
TARIFF_OFFSET = 1.0
BILATERAL_COLUMNS = ("exporter", "importer", "year", "dist_km", "contig", "colony", "comlang", "rta", "tariff")
COUNTRY_COLUMNS = ("country", "year", "output", "expenditure")


def remoteness(distances, outputs) -> np.ndarray:
    """Output-weighted mean distance to each importer: sum_i d_ij O_i / sum_k O_k."""
    d = np.asarray(distances, dtype=float)
    o = np.asarray(outputs, dtype=float)
    total = o.sum()
    if not total > 0:
        raise ZeroTotalOutput("outputs must have a positive sum")
    return (o @ d) / total


@dataclass
class GravityDesign:
    dense: np.ndarray
    dense_names: list[str]
    fe: np.ndarray
    fe_names: list[str]
    y: np.ndarray
    keys: list[tuple[int, str, str]] = field(default_factory=list)
    references: dict = field(default_factory=dict)
    absorbed: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.dense, self.fe]) if self.fe.size else self.dense

    @property
    def names(self) -> list[str]:
        return list(self.dense_names) + list(self.fe_names)

    def decode(self) -> list[dict]:
        """Map design rows back to named covariates (inverse of the encoding)."""
        col = {name: k for k, name in enumerate(self.dense_names)}
        out = []
        for r, (year, exp_, imp) in enumerate(self.keys):
            row = self.dense[r]
            d = {"exporter": exp_, "importer": imp, "year": year, "flow": float(self.y[r])}
            if "log_distance" in col:
                d["dist_km"] = math.exp(row[col["log_distance"]])
            for name, key in (("contiguity", "contig"), ("colony", "colony"), ("common_language", "comlang"), ("rta", "rta")):
                if name in col:
                    d[key] = int(round(row[col[name]]))
            if "log1p_tariff" in col:
                d["tariff"] = math.expm1(row[col["log1p_tariff"]])
            if "log_output" in col:
                d["output"] = math.exp(row[col["log_output"]])
            if "log_expenditure" in col:
                d["expenditure"] = math.exp(row[col["log_expenditure"]])
            out.append(d)
        return out


def read_bilateral_csv(path) -> dict[tuple[int, str, str], dict]:
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in BILATERAL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaMismatch(f"{path}: missing columns {missing}")
        for row in reader:
            key = (int(row["year"]), row["exporter"], row["importer"])
            table[key] = {
                "dist_km": float(row["dist_km"]),
                "contig": int(float(row["contig"])),
                "colony": int(float(row["colony"])),
                "comlang": int(float(row["comlang"])),
                "rta": int(float(row["rta"])),
                "tariff": float(row["tariff"]),
            }
    return table


def read_country_csv(path) -> dict[tuple[int, str], dict]:
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COUNTRY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaMismatch(f"{path}: missing columns {missing}")
        for row in reader:
            table[(int(row["year"]), row["country"])] = {
                "output": float(row["output"]),
                "expenditure": float(row["expenditure"]),
            }
    return table


def build_design(
    panel: TradePanel,
    bilateral: Mapping[tuple[int, str, str], dict],
    countries: Mapping[tuple[int, str], dict] | None = None,
    positive_only: bool = False,
    fe_scheme: str = "reference",
    references: Mapping[int, Mapping[str, str]] | None = None,
) -> GravityDesign:
    """One design row per observed (year, exporter, importer) flow.

    The response is the reporter-averaged flow. Output and expenditure come
    from ``countries`` when given, otherwise from the averaged plan's row
    and column sums. The dropped reference level of each group is the
    first present country of that year unless ``references`` names one
    (``{year: {"exporter": ..., "importer": ...}}``).
    """
    if fe_scheme not in ("reference", "full"):
        raise ValueError(f"unknown fe_scheme {fe_scheme!r}")
    labels = panel.country_index.labels
    k = len(labels)
    rows, keys, ys = [], [], []
    fe_cols: dict[str, int] = {}
    fe_entries: list[list[int]] = []
    chosen: dict[int, dict[str, str]] = {}
    missing = []
    for rep in panel.reports:
        year = rep.year
        avg = rep.averaged()
        vals = avg.filled(0.0)
        if countries is not None:
            try:
                output = np.array([countries[(year, c)]["output"] for c in labels])
                expend = np.array([countries[(year, c)]["expenditure"] for c in labels])
            except KeyError as exc:
                missing.append((year, exc.args[0][1], "country"))
                continue
        else:
            output, expend = vals.sum(axis=1), vals.sum(axis=0)
        dist = np.full((k, k), np.nan)
        for a in range(k):
            for b in range(k):
                entry = bilateral.get((year, labels[a], labels[b]))
                if entry is not None:
                    dist[a, b] = entry["dist_km"]
        known = np.isfinite(dist)
        chi = remoteness(np.where(known, dist, 0.0), output)
        obs = avg.mask & ((vals > 0) if positive_only else True)
        exp_present = sorted({a for a, b in zip(*np.nonzero(obs))})
        imp_present = sorted({b for a, b in zip(*np.nonzero(obs))})
        if not exp_present:
            continue
        ref_e, ref_i = labels[exp_present[0]], labels[imp_present[0]]
        if references is not None and year in references:
            ref_e = references[year].get("exporter", ref_e)
            ref_i = references[year].get("importer", ref_i)
        chosen[year] = {"exporter": ref_e, "importer": ref_i}
        if fe_scheme == "full":
            fe_cols.setdefault(f"year[{year}]", len(fe_cols))
        for a, b in zip(*np.nonzero(obs)):
            key = (year, labels[a], labels[b])
            cov = bilateral.get(key)
            if cov is None:
                missing.append(key)
                continue
            if output[a] <= 0 or expend[b] <= 0 or chi[b] <= 0:
                missing.append(key + ("nonpositive output/expenditure",))
                continue
            rows.append([
                math.log(output[a]), math.log(expend[b]), math.log(cov["dist_km"]),
                cov["contig"], cov["colony"], cov["comlang"], cov["rta"],
                math.log(chi[b]), math.log(TARIFF_OFFSET + cov["tariff"]),
            ])
            cols = []
            if fe_scheme == "full":
                cols.append(fe_cols[f"year[{year}]"])
            if labels[a] != ref_e:
                cols.append(fe_cols.setdefault(f"exp[{labels[a]},{year}]", len(fe_cols)))
            if labels[b] != ref_i:
                cols.append(fe_cols.setdefault(f"imp[{labels[b]},{year}]", len(fe_cols)))
            fe_entries.append(cols)
            keys.append(key)
            ys.append(vals[a, b])
    if missing:
        raise MissingCovariate(missing)
    dense = np.array(rows, dtype=float).reshape(len(rows), len(DENSE_NAMES))
    fe = np.zeros((len(rows), len(fe_cols)))
    for r, cols in enumerate(fe_entries):
        fe[r, cols] = 1.0
    fe_names = sorted(fe_cols, key=fe_cols.get)
    dense_names = list(DENSE_NAMES)
    absorbed = []
    if fe_scheme == "full":
        keep = [n not in MONADIC for n in dense_names]
        absorbed = [n for n in dense_names if n in MONADIC]
        dense = dense[:, keep]
        dense_names = [n for n in dense_names if n not in MONADIC]
    return GravityDesign(
        dense=dense, dense_names=dense_names, fe=fe, fe_names=fe_names,
        y=np.array(ys, dtype=float), keys=keys, references=chosen, absorbed=absorbed,
        meta={"tariff_offset": TARIFF_OFFSET, "positive_only": positive_only, "fe_scheme": fe_scheme,
              "output_source": "table" if countries is not None else "marginals"},
    )


@dataclass
class GravityFit:
    names: list[str]
    coef: np.ndarray
    standard_errors: np.ndarray
    fitted_means: np.ndarray
    converged: bool
    iterations: int
    score_norm: float
    dense_names: list[str]
    absorbed: list[str] = field(default_factory=list)

    @property
    def lam(self) -> dict[str, float]:
        """Dense coefficients by name; absorbed covariates are NaN."""
        idx = {n: k for k, n in enumerate(self.names)}
        return {n: (float(self.coef[idx[n]]) if n in idx else float("nan")) for n in DENSE_NAMES}

    @property
    def fixed_effects(self) -> dict[str, float]:
        return {n: float(c) for n, c in zip(self.names, self.coef) if n not in self.dense_names}

    def se(self, name: str) -> float:
        return float(self.standard_errors[self.names.index(name)])


@dataclass(frozen=True)
class PpmlOptions:
    tolerance: float = 1e-8
    max_iterations: int = 200
    se_type: str = "hc3"
    small_sample: bool = True  # n / (n - p) factor, hc1 only

    def __post_init__(self):
        if self.se_type not in ("hc1", "hc2", "hc3"):
            raise ValueError(f"unknown se_type {self.se_type!r}")


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    zero = [names[k] for k in range(X.shape[1]) if not np.any(X[:, k])]
    if zero:
        raise RankDeficient(f"all-zero design columns: {zero}")
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(f"{X.shape[0]} rows for {X.shape[1]} columns")
    scale = np.linalg.norm(X, axis=0)
    s = np.linalg.svd(X / scale, compute_uv=False)
    if s[-1] <= s[0] * X.shape[1] * 1e-12:
        rank = int(np.sum(s > s[0] * X.shape[1] * 1e-12))
        raise RankDeficient(f"design has rank {rank} < {X.shape[1]} columns")


def _check_separation(design: GravityDesign) -> None:
    cells = []
    for k, name in enumerate(design.fe_names):
        rows = design.fe[:, k] > 0
        if rows.any() and not np.any(design.y[rows] > 0):
            cells.append(name)
    if cells:
        raise Separation(f"fixed-effect cells with only zero flows: {cells}", cells)


def ppml_fit(design: GravityDesign, opts: PpmlOptions | None = None) -> GravityFit:
    """Iteratively reweighted least squares for the Poisson log-link model.

    Converged when the largest absolute score ``X'(y - mu)``, measured in
    units of the mean flow, is at most ``opts.tolerance``. Standard errors
    are heteroskedasticity-robust sandwich estimates; ``hc3`` (default)
    inflates each squared residual by ``(1 - h_i)^-2`` with ``h_i`` the
    IRLS leverage, ``hc2`` by ``(1 - h_i)^-1``, ``hc1`` uses the plain
    residuals with an ``n / (n - p)`` factor.
    """
    opts = opts or PpmlOptions()
    X, y, names = design.X, design.y, design.names
    if np.any(y < 0):
        raise ValueError("flows must be nonnegative")
    _check_rank(X, names)
    _check_separation(design)
    n, p = X.shape
    scale = y.mean()
    if not scale > 0:
        raise Separation("all flows are zero")
    mu = np.full(n, scale)
    eta = np.log(mu)
    beta = np.zeros(p)
    converged = False
    score_norm = np.inf
    it = 0

    def irls_step(eta, mu):
        z = eta + (y - mu) / mu
        sw = np.sqrt(mu / scale)
        beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        eta = X @ beta
        if np.max(eta) > 700:
            raise Separation("linear predictor diverged; fitted means overflow")
        mu = np.exp(eta)
        return beta, eta, mu, float(np.max(np.abs(X.T @ (y - mu)))) / scale

    for it in range(1, opts.max_iterations + 1):
        beta, eta, mu, score_norm = irls_step(eta, mu)
        if score_norm <= opts.tolerance:
            converged = True
            break
    if not converged:
        tiny = np.flatnonzero((mu < 1e-12 * scale) & (y == 0))
        if tiny.size:
            raise Separation(
                f"fitted means collapse to zero on {tiny.size} zero-flow rows",
                [design.keys[r] for r in tiny[:20]] if design.keys else tiny[:20].tolist(),
            )
        raise NonConvergence(
            f"PPML did not converge: score {score_norm:.3e} after {it} iterations",
            iterations=it, residual=score_norm,
        )
    # one polishing step takes the score down to roundoff (quadratic convergence)
    polished = irls_step(eta, mu)
    if polished[3] < score_norm:
        beta, eta, mu, score_norm = polished
    fitted = mu
    bread = np.linalg.inv(X.T @ (X * fitted[:, None]))
    resid2 = (y - fitted) ** 2
    if opts.se_type == "hc1":
        weight = resid2 * (n / (n - p) if opts.small_sample and n > p else 1.0)
    else:
        lev = np.einsum("ij,jk,ik->i", X, bread, X) * fitted
        power = 1 if opts.se_type == "hc2" else 2
        weight = resid2 / np.clip(1.0 - lev, 1e-12, None) ** power
    cov = bread @ (X.T @ (X * weight[:, None])) @ bread
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return GravityFit(
        names=list(names), coef=beta, standard_errors=se, fitted_means=fitted,
        converged=True, iterations=it, score_norm=score_norm,
        dense_names=list(design.dense_names), absorbed=list(design.absorbed),
    )


def gravity_predict(fit: GravityFit, design: GravityDesign) -> np.ndarray:
    """Exponentiated linear predictor for every design row."""
    return np.exp(design.X @ fit.coef)


def first_order_conditions(fit: GravityFit, design: GravityDesign) -> np.ndarray:
    """Per-column PPML score ``X'(y - mu)`` at the fitted means."""
    return design.X.T @ (design.y - gravity_predict(fit, design))


def write_coefficients_csv(path, fits: Mapping[str, GravityFit]) -> None:
    """Coefficient-by-commodity table (dense coefficients and robust SEs)."""
    commodities = list(fits)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["coefficient", "covariate", *commodities, *(f"{c}_se" for c in commodities)])
        for k, name in enumerate(DENSE_NAMES, start=1):
            vals, ses = [], []
            for c in commodities:
                fit = fits[c]
                if name in fit.names:
                    vals.append(format_float(fit.coef[fit.names.index(name)]))
                    ses.append(format_float(fit.se(name)))
                else:
                    vals.append("absorbed")
                    ses.append("NA")
            w.writerow([f"lambda_{k}", name, *vals, *ses])


def write_predictions_csv(path, design: GravityDesign, predictions: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "exporter", "importer", "observed", "predicted"])
        for (year, e, i), yv, pv in zip(design.keys, design.y, predictions):
            w.writerow([year, e, i, format_float(yv), format_float(pv)])
