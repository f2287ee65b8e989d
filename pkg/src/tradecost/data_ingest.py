"""Trade-matrix ingestion: parse FAOSTAT-style CSV exports, pool minor
countries into ``Other`` and assemble per-year dual-reported panels.

Matrices are indexed ``[exporter, importer]``. ``T^E`` holds the values
reported by exporters, ``T^I`` those reported by importers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateRow, InconsistentUnits, IoFailure, MissingInput, SchemaMismatch
from .ot_core import Marginals, TransportPlan

OTHER = "Other"
EXPORT = "export_quantity"
IMPORT = "import_quantity"
TONNE_UNITS = frozenset({"t", "tonnes", "tonne", "tons", "ton", "metric tons"})
NA = "NA"


@dataclass(frozen=True)
class SchemaOptions:
    """Column mapping for the input CSV; defaults follow FAOSTAT trade-matrix exports."""

    reporter: str = "Reporter Country Code"
    partner: str = "Partner Country Code"
    element: str = "Element"
    year: str = "Year"
    unit: str = "Unit"
    value: str = "Value"
    export_labels: tuple[str, ...] = ("Export Quantity", "export_quantity")
    import_labels: tuple[str, ...] = ("Import Quantity", "import_quantity")
    delimiter: str = ","

    @property
    def columns(self) -> tuple[str, ...]:
        return (self.reporter, self.partner, self.element, self.year, self.unit, self.value)


@dataclass(frozen=True)
class TradeRecord:
    reporter_id: str
    partner_id: str
    year: int
    element: str
    value: float
    unit: str = "t"

    @property
    def exporter(self) -> str:
        return self.reporter_id if self.element == EXPORT else self.partner_id

    @property
    def importer(self) -> str:
        return self.partner_id if self.element == EXPORT else self.reporter_id


@dataclass
class ParseReport:
    path: str
    rows_read: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)
    self_flows_dropped: int = 0
    other_elements_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "rows_read": self.rows_read,
            "errors": [{"line": ln, "reason": why} for ln, why in self.errors],
            "self_flows_dropped": self.self_flows_dropped,
            "other_elements_skipped": self.other_elements_skipped,
        }


class ParseResult(list):
    """List of records that also carries the parse report."""

    def __init__(self, records, report: ParseReport):
        super().__init__(records)
        self.report = report

    @property
    def errors(self):
        return self.report.errors


def parse_trade_csv(path, schema_options: SchemaOptions | None = None) -> ParseResult:
    """Read trade records, routing malformed rows to the error report.

    Rows whose element is neither the export nor the import label are
    counted and skipped; self-flows are counted and dropped.
    """
    schema = schema_options or SchemaOptions()
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"input file not found: {path}")
    report = ParseReport(str(path))
    records: list[TradeRecord] = []
    try:
        fh = path.open(newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file, no header") from None
        header = [h.strip() for h in header]
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: header lacks columns {missing}")
        col = {name: header.index(name) for name in schema.columns}
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            report.rows_read += 1
            if len(row) < len(header):
                report.errors.append((line, "too few fields"))
                continue
            element_raw = row[col[schema.element]].strip()
            if element_raw in schema.export_labels:
                element = EXPORT
            elif element_raw in schema.import_labels:
                element = IMPORT
            else:
                report.other_elements_skipped += 1
                continue
            reporter = row[col[schema.reporter]].strip()
            partner = row[col[schema.partner]].strip()
            if not reporter or not partner:
                report.errors.append((line, "missing country code"))
                continue
            try:
                year = int(row[col[schema.year]].strip())
            except ValueError:
                report.errors.append((line, f"bad year {row[col[schema.year]]!r}"))
                continue
            raw_value = row[col[schema.value]].strip()
            try:
                value = float(raw_value)
            except ValueError:
                report.errors.append((line, f"bad value {raw_value!r}"))
                continue
            if not math.isfinite(value):
                report.errors.append((line, f"non-finite value {raw_value!r}"))
                continue
            if value < 0:
                report.errors.append((line, f"negative value {value!r}"))
                continue
            if reporter == partner:
                report.self_flows_dropped += 1
                continue
            unit = row[col[schema.unit]].strip()
            records.append(TradeRecord(reporter, partner, year, element, value, unit))
    return ParseResult(records, report)


@dataclass(frozen=True)
class CountryIndex:
    """Retained countries in volume order, followed by the ``Other`` aggregate."""

    countries: tuple[str, ...]
    threshold: float = 0.99

    def __post_init__(self):
        countries = tuple(str(c) for c in self.countries)
        if OTHER in countries:
            raise ValueError(f"{OTHER!r} is reserved")
        if len(set(countries)) != len(countries):
            raise ValueError("country identifiers must be unique")
        object.__setattr__(self, "countries", countries)
        object.__setattr__(self, "_pos", {c: i for i, c in enumerate(countries)})

    @property
    def labels(self) -> tuple[str, ...]:
        return self.countries + (OTHER,)

    def __len__(self) -> int:
        return len(self.countries) + 1

    def position(self, country: str) -> int:
        return self._pos.get(country, len(self.countries))


def _select_retained(volumes: Mapping[str, float], threshold: float) -> tuple[str, ...]:
    """Volume-ranked prefix reaching ``threshold`` of the total.

    ``Other`` counts towards the total but is never ranked, so re-pooling a
    pooled panel reproduces its index.
    """
    ranked = sorted((c for c in volumes if c != OTHER), key=lambda c: (-volumes[c], c))
    if threshold >= 1.0:
        return tuple(ranked)
    target = threshold * math.fsum(volumes.values())
    kept: list[str] = []
    for c in ranked:
        kept.append(c)
        if math.fsum(volumes[k] for k in kept) >= target:
            break
    return tuple(kept)


def combined_volumes(records: Iterable[TradeRecord]) -> dict[str, float]:
    """Export plus import volume per country across every record and year."""
    parts: dict[str, list[float]] = defaultdict(list)
    for r in records:
        parts[r.exporter].append(r.value)
        parts[r.importer].append(r.value)
    return {c: math.fsum(v) for c, v in parts.items()}


def pool_countries(records: Sequence[TradeRecord], threshold: float = 0.99) -> CountryIndex:
    """Smallest volume-ranked set of countries covering ``threshold`` of the
    combined import+export volume over the whole panel period."""
    if len(records) == 0:
        raise ValueError("cannot pool an empty record set")
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    volumes = combined_volumes(records)
    return CountryIndex(_select_retained(volumes, threshold), threshold)


@dataclass(frozen=True)
class DualReport:
    """Exporter- and importer-reported plans for one year."""

    exporter_plan: TransportPlan
    importer_plan: TransportPlan
    year: int

    def __post_init__(self):
        if self.exporter_plan.shape != self.importer_plan.shape:
            raise ValueError("exporter and importer plans must share dimensions")

    @property
    def shape(self) -> tuple[int, int]:
        return self.exporter_plan.shape

    def views(self) -> dict[str, TransportPlan]:
        return {"exporter": self.exporter_plan, "importer": self.importer_plan}

    def averaged(self) -> TransportPlan:
        """Reporter-averaged plan; single-reporter entries keep their value."""
        e, i = self.exporter_plan, self.importer_plan
        both = e.mask & i.mask
        vals = np.where(both, 0.5 * (e.filled() + i.filled()), np.where(e.mask, e.filled(), i.filled()))
        return TransportPlan(vals, e.mask | i.mask)


@dataclass
class TradePanel:
    country_index: CountryIndex
    years: list[int]
    reports: list[DualReport]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if list(self.years) != sorted(set(self.years)):
            raise ValueError("years must be strictly increasing")
        if len(self.years) != len(self.reports):
            raise ValueError("one report per year required")
        k = len(self.country_index)
        for rep in self.reports:
            if rep.shape != (k, k):
                raise ValueError(f"report for {rep.year} has shape {rep.shape}, index needs {(k, k)}")

    def __len__(self) -> int:
        return len(self.years)

    def report(self, year: int) -> DualReport:
        return self.reports[self.years.index(year)]

    def grand_total(self) -> float:
        vals = []
        for rep in self.reports:
            for plan in (rep.exporter_plan, rep.importer_plan):
                vals.extend(plan.values[plan.mask].tolist())
        return math.fsum(vals)

    def save(self, directory) -> Path:
        """Write per-year CSV matrices and ``index.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        labels = self.country_index.labels
        digests = {}
        for rep in self.reports:
            for tag, plan in (("E", rep.exporter_plan), ("I", rep.importer_plan)):
                name = f"T{tag}_{rep.year}.csv"
                write_matrix_csv(out / name, plan.values, plan.mask, labels)
                digests[name] = file_digest(out / name)
        index = {
            "countries": list(labels),
            "other": OTHER,
            "years": list(self.years),
            "threshold": self.country_index.threshold,
            "digests": digests,
            "provenance": self.provenance,
        }
        write_json(out / "index.json", index)
        return out

    @classmethod
    def load(cls, directory) -> "TradePanel":
        src = Path(directory)
        index_path = src / "index.json"
        if not index_path.exists():
            raise MissingInput(f"panel index not found: {index_path}")
        meta = json.loads(index_path.read_text(encoding="utf-8"))
        labels = meta["countries"]
        if not labels or labels[-1] != OTHER:
            raise SchemaMismatch(f"{index_path}: country list must end with {OTHER!r}")
        index = CountryIndex(tuple(labels[:-1]), meta.get("threshold", 0.99))
        reports = []
        for year in meta["years"]:
            plans = []
            for tag in ("E", "I"):
                path = src / f"T{tag}_{year}.csv"
                values, mask, row_labels = read_matrix_csv(path)
                if list(row_labels) != list(labels):
                    raise SchemaMismatch(f"{path}: labels do not match index")
                plans.append(TransportPlan(values, mask))
            reports.append(DualReport(plans[0], plans[1], int(year)))
        return cls(index, [int(y) for y in meta["years"]], reports, meta.get("provenance", {}))


def convert_units(value: float, unit: str, conversions: Mapping[str, float] | None) -> float:
    key = unit.strip().lower()
    if key in TONNE_UNITS:
        return value
    if conversions:
        for name, factor in conversions.items():
            if name.strip().lower() == key:
                return value * float(factor)
    raise InconsistentUnits(f"unit {unit!r} is not tonnes and has no conversion factor")


def build_panel(
    records: Sequence[TradeRecord],
    index: CountryIndex,
    conversions: Mapping[str, float] | None = None,
    provenance: dict | None = None,
) -> TradePanel:
    """Aggregate records onto the index, one dual report per year.

    Duplicate records and records of pooled countries are summed; a cell
    with no report in a view stays masked in that view.
    """
    k = len(index)
    cells: dict[tuple[int, str], dict[tuple[int, int], list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        value = convert_units(r.value, r.unit, conversions)
        i, j = index.position(r.exporter), index.position(r.importer)
        cells[(r.year, r.element)][(i, j)].append(value)
    years = sorted({y for y, _ in cells})
    reports = []
    for year in years:
        plans = []
        for element in (EXPORT, IMPORT):
            values = np.full((k, k), np.nan)
            mask = np.zeros((k, k), dtype=bool)
            for (i, j), parts in cells.get((year, element), {}).items():
                values[i, j] = math.fsum(parts)
                mask[i, j] = True
            plans.append(TransportPlan(values, mask))
        reports.append(DualReport(plans[0], plans[1], year))
    return TradePanel(index, years, reports, dict(provenance or {}, threshold=index.threshold))


def pool_panel(panel: TradePanel, threshold: float) -> TradePanel:
    """Re-pool an assembled panel; ``Other`` is kept and never ranked."""
    labels = panel.country_index.labels
    parts: dict[str, list[float]] = defaultdict(list)
    for rep in panel.reports:
        for plan in (rep.exporter_plan, rep.importer_plan):
            vals = plan.filled(0.0)
            for a, lab in enumerate(labels):
                parts[lab].extend(vals[a, :].tolist())
                parts[lab].extend(vals[:, a].tolist())
    volumes = {c: math.fsum(v) for c, v in parts.items()}
    kept = _select_retained(volumes, threshold)
    new_index = CountryIndex(tuple(kept), threshold)
    k = len(new_index)
    reports = []
    for rep in panel.reports:
        plans = []
        for plan in (rep.exporter_plan, rep.importer_plan):
            acc: dict[tuple[int, int], list[float]] = defaultdict(list)
            for a, la in enumerate(labels):
                for b, lb in enumerate(labels):
                    if plan.mask[a, b]:
                        acc[(new_index.position(la), new_index.position(lb))].append(plan.values[a, b])
            values = np.full((k, k), np.nan)
            mask = np.zeros((k, k), dtype=bool)
            for (i, j), v in acc.items():
                values[i, j] = math.fsum(v)
                mask[i, j] = True
            plans.append(TransportPlan(values, mask))
        reports.append(DualReport(plans[0], plans[1], rep.year))
    return TradePanel(new_index, list(panel.years), reports, dict(panel.provenance, threshold=threshold))


def marginals_from_plan(plan: TransportPlan) -> Marginals:
    """Row and column sums with masked entries counted as zero.

    Fully masked rows or columns get zero mass (the country drops out of
    the solve) and trigger a warning.
    """
    if not plan.mask.any():
        raise DegenerateRow("plan has no observed entries")
    t = plan.filled(0.0)
    if t.sum() <= 0:
        raise DegenerateRow("plan carries no positive flow")
    dead_rows = np.flatnonzero(~plan.mask.any(axis=1))
    dead_cols = np.flatnonzero(~plan.mask.any(axis=0))
    if dead_rows.size or dead_cols.size:
        warnings.warn(
            f"fully masked rows {dead_rows.tolist()} / columns {dead_cols.tolist()} get zero mass",
            stacklevel=2,
        )
    mu = t.sum(axis=1)
    nu = t.sum(axis=0)
    # make totals agree bitwise before Marginals checks balance
    nu = nu * (mu.sum() / nu.sum())
    return Marginals(mu, nu)


# --- serialisation helpers -------------------------------------------------

def format_float(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path, values, mask, labels, corner: str = "exporter") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *labels])
        for a, lab in enumerate(labels):
            w.writerow([lab, *(format_float(values[a, b]) if mask[a, b] else NA for b in range(len(labels)))])


def read_matrix_csv(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"matrix file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaMismatch(f"{path}: empty matrix file")
    col_labels = rows[0][1:]
    row_labels = [r[0] for r in rows[1:]]
    if col_labels != row_labels:
        raise SchemaMismatch(f"{path}: row and column labels differ")
    k = len(col_labels)
    values = np.full((k, k), np.nan)
    mask = np.zeros((k, k), dtype=bool)
    for a, row in enumerate(rows[1:]):
        if len(row) != k + 1:
            raise SchemaMismatch(f"{path}: row {a + 2} has {len(row)} fields, expected {k + 1}")
        for b, cell in enumerate(row[1:]):
            if cell != NA:
                values[a, b] = float(cell)
                mask[a, b] = True
    return values, mask, row_labels


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
