"""``tradecost`` command line: ingest, generate, train, infer, ensemble, gravity, compare.

Settings come from a TOML file (``--config``) with top-level defaults and
one table per command; ``--seed``, ``--epsilon``, ``--threads``, ``--out``
and repeated ``--set section.key=value`` override it. Every run writes the
resolved settings and a ``<command>_manifest.json`` next to its outputs. Wall time
goes to ``timing.txt`` so JSON and CSV outputs stay byte-identical across
reruns.

Exit codes: 1 configuration, 2 input/output, 3 numerical, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import platform
import sys
import time
from collections import defaultdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from . import __version__
from .data_ingest import (
    OTHER,
    SchemaOptions,
    TradePanel,
    build_panel,
    combined_volumes,
    convert_units,
    format_float,
    parse_trade_csv,
    pool_countries,
    write_json,
)
from .errors import ConfigError, IoFailure, MissingInput, SchemaMismatch, TradeCostError
from .evaluation import compare_models
from .gravity import (
    PpmlOptions,
    build_design,
    first_order_conditions,
    gravity_predict,
    ppml_fit,
    read_bilateral_csv,
    read_country_csv,
    write_coefficients_csv,
    write_predictions_csv,
)
from .inverse_model import MlpParameters, NetworkConfig, TrainingConfig, train, train_per_year
from .ot_core import SolverOptions
from .synthetic import GeneratorConfig, generate, write_synthetic
from .uncertainty import build_ensemble, sample_plan, sample_rng, solve_plans, summarize, write_ensemble_csv

log = logging.getLogger("tradecost")

COMMANDS = ("ingest", "generate", "train", "infer", "ensemble", "gravity", "compare")

TOP_LEVEL = {"seed": 0, "epsilon": 0.1, "threads": 1, "out": "out", "panel": None, "params": None}

SECTIONS = {
    "ingest": {"input": None, "threshold": 0.99, "conversions": {}, "schema": {}},
    "generate": {f.name: f.default for f in dataclasses.fields(GeneratorConfig) if f.name not in ("seed", "epsilon")},
    "solver": {"max_iterations": 10000, "tolerance": 1e-9},
    "network": {"layers": 5, "width": 60},
    "training": {
        **{f.name: f.default for f in dataclasses.fields(TrainingConfig) if f.name != "epsilon"},
        "init": None,
        "panel": None,
        "per_year": False,
    },
    "infer": {"view": "averaged", "panel": None, "params": None},
    "ensemble": {
        "n": 1000, "fix_marginals": False, "write_samples": False,
        "quantiles": [0.05, 0.95], "panel": None, "params": None,
    },
    "gravity": {
        "bilateral": None, "countries": None, "fe_scheme": "reference", "positive_only": False,
        "commodity": "commodity", "tolerance": 1e-8, "max_iterations": 200, "panel": None,
    },
    "compare": {
        "ot": None, "gravity": None, "positive_only": True, "pooled": False,
        "commodity": "commodity", "panel": None,
    },
}

INFER_VIEWS = ("exporter", "importer", "averaged", "sample")


# ---------------------------------------------------------------- settings


class Settings:
    """Resolved configuration: defaults < file < command-line overrides."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def resolve(cls, config_path: str | None, overrides: dict) -> "Settings":
        data = {k: v for k, v in TOP_LEVEL.items()}
        data.update({name: dict(defaults) for name, defaults in SECTIONS.items()})
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise MissingInput(f"config file not found: {path}")
            try:
                loaded = tomllib.loads(path.read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            _merge(data, loaded, str(path))
        _merge(data, overrides, "command line")
        return cls(data)

    def get(self, section: str, key: str):
        """Section value, falling back to the top-level key of the same name."""
        value = self.data[section].get(key)
        if value is None and key in TOP_LEVEL:
            value = self.data[key]
        return value

    def __getitem__(self, key):
        return self.data[key]


def _merge(data: dict, new: dict, origin: str) -> None:
    for key, value in new.items():
        if key in TOP_LEVEL:
            data[key] = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{origin}: [{key}] must be a table")
            for k, v in value.items():
                if k not in SECTIONS[key]:
                    raise ConfigError(f"{origin}: unknown key {key}.{k}")
                data[key][k] = v
        else:
            raise ConfigError(f"{origin}: unknown key {key!r}")


def _parse_set(items: list[str]) -> dict:
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare strings
        parts = key.strip().split(".")
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"--set key too deep: {key!r}")
    return out


def _require_path(value, what: str) -> Path:
    if value is None:
        raise ConfigError(f"missing setting: {what}")
    path = Path(value)
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _build(factory, what: str, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _solver(s: Settings) -> SolverOptions:
    return _build(SolverOptions, "solver options", **s["solver"])


def _load_panel(s: Settings, section: str) -> TradePanel:
    path = _require_path(s.get(section, "panel"), f"{section}.panel")
    return TradePanel.load(path)


def _load_params(s: Settings, section: str):
    """Callable ``year -> MlpParameters``.

    A file serves every year; a directory holds ``params_<year>.json`` from
    per-year training.
    """
    path = _require_path(s.get(section, "params"), f"{section}.params")

    def load(p: Path) -> MlpParameters:
        if not p.exists():
            raise MissingInput(f"parameter file not found: {p}")
        try:
            return MlpParameters.load(p)
        except (KeyError, ValueError) as exc:
            raise SchemaMismatch(f"{p}: not a parameter file ({exc})") from exc

    if path.is_dir():
        return lambda year: load(path / f"params_{year}.json")
    single = load(path)
    return lambda year: single


# ---------------------------------------------------------------- commands


def cmd_ingest(s: Settings, out: Path) -> dict:
    """Parse a trade CSV, pool countries and write a panel directory."""
    cfg = s["ingest"]
    src = _require_path(cfg["input"], "ingest.input")
    schema_kw = dict(cfg["schema"])
    for key in ("export_labels", "import_labels"):
        if key in schema_kw:
            schema_kw[key] = tuple(schema_kw[key])
    schema = _build(SchemaOptions, "ingest.schema", **schema_kw)
    records = parse_trade_csv(src, schema)
    if not records:
        raise SchemaMismatch(f"{src}: no usable trade records")
    index = _build(pool_countries, "ingest.threshold", records=records, threshold=float(cfg["threshold"]))
    panel = build_panel(records, index, cfg["conversions"], provenance={"source": src.name})
    panel.save(out / "panel")

    volumes = combined_volumes(records)
    total = math.fsum(volumes.values())
    retained = math.fsum(volumes[c] for c in index.countries)
    pooled = sorted(c for c in volumes if c not in index.countries and c != OTHER)
    # conservation: every parsed (converted) tonne lands somewhere in the panel
    parsed_total = math.fsum(convert_units(r.value, r.unit, cfg["conversions"]) for r in records)
    report = {
        "parse": records.report.to_dict(),
        "retained": list(index.countries),
        "pooled_into_other": pooled,
        "other_label": OTHER,
        "threshold": index.threshold,
        "coverage": retained / total if total > 0 else None,
        "conservation": {
            "records_total": parsed_total,
            "panel_total": panel.grand_total(),
            "exact": parsed_total == panel.grand_total(),
        },
    }
    write_json(out / "ingest_report.json", report)
    return {"panel": "panel", "ingest_report": "ingest_report.json"}


def cmd_generate(s: Settings, out: Path) -> dict:
    """Write a synthetic panel with its ground-truth costs and covariates."""
    cfg = _build(GeneratorConfig, "generate settings", seed=int(s["seed"]), epsilon=float(s["epsilon"]), **s["generate"])
    data = generate(cfg)
    write_synthetic(data, out)
    return {"panel": "panel", "truth": "truth", "records": "records.csv",
            "bilateral": "bilateral.csv", "countries": "countries.csv"}


def cmd_train(s: Settings, out: Path) -> dict:
    """Train the inverse network on a panel."""
    panel = _load_panel(s, "training")
    k = len(panel.country_index)
    nc = _build(NetworkConfig, "network settings", input_dim=k * k, output_dim=k * k, seed=int(s["seed"]), **s["network"])
    tkw = {key: v for key, v in s["training"].items() if key not in ("init", "panel", "per_year")}
    tc = _build(TrainingConfig, "training settings", epsilon=float(s["epsilon"]), **tkw)
    if s["training"]["per_year"]:
        (out / "params").mkdir(exist_ok=True)
        runs = {}
        for year, (params, history) in train_per_year(panel, nc, tc).items():
            params.save(out / "params" / f"params_{year}.json")
            _write_history(out / f"history_{year}.csv", history)
            runs[str(year)] = _history_summary(history)
        write_json(out / "training_summary.json", {"per_year": runs})
        return {"params": "params", "summary": "training_summary.json"}
    init = None
    if s["training"]["init"] is not None:
        init = MlpParameters.load(_require_path(s["training"]["init"], "training.init"))
    params, history = train(panel, nc, tc, params=init)
    params.save(out / "params.json")
    _write_history(out / "history.csv", history)
    write_json(out / "training_summary.json", _history_summary(history))
    return {"params": "params.json", "history": "history.csv", "summary": "training_summary.json"}


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "data_term", "penalty_term", "total"])
        for epoch, d, p, t in history.rows():
            w.writerow([epoch, format_float(d), format_float(p), format_float(t)])


def _history_summary(history) -> dict:
    return {
        "epochs_run": len(history.epochs),
        "stopped_early": history.stopped_early,
        "flow_scale": history.flow_scale,
        "final": {"data_term": history.data_term[-1], "penalty_term": history.penalty_term[-1],
                  "total": history.total[-1]},
    }


def _write_plan_rows(w, year, tag, labels, costs, plans, observed):
    k = len(labels)
    for a in range(k):
        for b in range(k):
            w.writerow([year, tag, labels[a], labels[b], int(observed[a, b]),
                        format_float(costs[a, b]), format_float(plans[a, b])])


PLAN_HEADER = ["year", "view", "i", "j", "observed", "cost", "flow"]


def cmd_infer(s: Settings, out: Path) -> dict:
    """Infer costs and re-solved plans for one view of every year."""
    view = s["infer"]["view"]
    if view not in INFER_VIEWS:
        raise ConfigError(f"infer.view must be one of {INFER_VIEWS}, got {view!r}")
    panel = _load_panel(s, "infer")
    params = _load_params(s, "infer")
    eps, solver, seed = float(s["epsilon"]), _solver(s), int(s["seed"])
    labels = panel.country_index.labels
    failed = []
    with open(out / "inferred.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_HEADER)
        for rep in panel.reports:
            if view == "sample":
                plan = sample_plan(rep, sample_rng(seed, rep.year, 0))
            elif view == "averaged":
                plan = rep.averaged()
            else:
                plan = rep.views()[view]
            costs, plans, bad = solve_plans(params(rep.year), plan.values[None], eps, solver)
            if bad[0]:
                failed.append(rep.year)
            _write_plan_rows(w, rep.year, view, labels, costs[0], plans[0], plan.mask)
    write_json(out / "infer_summary.json", {"view": view, "unconverged_years": failed})
    return {"inferred": "inferred.csv", "summary": "infer_summary.json"}


def cmd_ensemble(s: Settings, out: Path) -> dict:
    """Resample dual reports and summarise the cost and flow spread."""
    panel = _load_panel(s, "ensemble")
    params = _load_params(s, "ensemble")
    cfg = s["ensemble"]
    n = int(cfg["n"])
    if n < 1:
        raise ConfigError("ensemble.n must be >= 1")
    eps, solver, seed = float(s["epsilon"]), _solver(s), int(s["seed"])
    labels = panel.country_index.labels
    summaries, failed = {}, {}
    outputs = {}
    samples_fh = None
    if cfg["write_samples"] or n == 1:
        samples_fh = open(out / "ensemble_samples.csv", "w", newline="", encoding="utf-8")
        sw = csv.writer(samples_fh, lineterminator="\n")
        sw.writerow(PLAN_HEADER)
        outputs["samples"] = "ensemble_samples.csv"
    try:
        for rep in panel.reports:
            ens = build_ensemble(params(rep.year), rep, n=n, epsilon=eps, seed=seed, solver=solver,
                                 fix_marginals=bool(cfg["fix_marginals"]))
            failed[str(rep.year)] = ens.failed
            if samples_fh is not None:
                for k in range(ens.n):
                    _write_plan_rows(sw, rep.year, f"sample{k}", labels, ens.costs[k], ens.plans[k], ens.observed)
            if n >= 2:
                summaries[rep.year] = summarize(ens, tuple(cfg["quantiles"]))
    finally:
        if samples_fh is not None:
            samples_fh.close()
    if summaries:
        write_ensemble_csv(out / "ensemble.csv", summaries, labels)
        outputs["ensemble"] = "ensemble.csv"
    write_json(out / "ensemble_summary.json", {
        "n": n, "failed": failed,
        "n_used": {str(y): v["n_used"] for y, v in summaries.items()},
    })
    outputs["summary"] = "ensemble_summary.json"
    return outputs


def cmd_gravity(s: Settings, out: Path) -> dict:
    """Fit the PPML gravity baseline."""
    panel = _load_panel(s, "gravity")
    cfg = s["gravity"]
    bilateral = read_bilateral_csv(_require_path(cfg["bilateral"], "gravity.bilateral"))
    countries = None
    if cfg["countries"] is not None:
        countries = read_country_csv(_require_path(cfg["countries"], "gravity.countries"))
    design = _build(build_design, "gravity settings", panel=panel, bilateral=bilateral, countries=countries,
                    positive_only=bool(cfg["positive_only"]), fe_scheme=cfg["fe_scheme"])
    fit = ppml_fit(design, PpmlOptions(tolerance=float(cfg["tolerance"]), max_iterations=int(cfg["max_iterations"])))
    pred = gravity_predict(fit, design)
    write_coefficients_csv(out / "gravity_coefficients.csv", {cfg["commodity"]: fit})
    write_predictions_csv(out / "gravity_predictions.csv", design, pred)
    write_json(out / "gravity_fit.json", {
        "commodity": cfg["commodity"],
        "coefficients": {n: float(c) for n, c in zip(fit.names, fit.coef)},
        "standard_errors": {n: float(e) for n, e in zip(fit.names, fit.standard_errors)},
        "absorbed": list(design.absorbed),
        "references": {str(y): r for y, r in design.references.items()},
        "iterations": fit.iterations,
        "score_norm": fit.score_norm,
        "max_abs_score": float(np.max(np.abs(first_order_conditions(fit, design)))),
        "n_obs": int(design.y.size),
        "meta": design.meta,
    })
    return {"coefficients": "gravity_coefficients.csv", "predictions": "gravity_predictions.csv",
            "fit": "gravity_fit.json"}


def _read_estimates(path: Path, labels, value_col: str, key_cols=("i", "j")) -> dict[int, np.ndarray]:
    pos = {c: n for n, c in enumerate(labels)}
    k = len(labels)
    out: dict[int, np.ndarray] = defaultdict(lambda: np.full((k, k), np.nan))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"year", value_col, *key_cols}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaMismatch(f"{path}: expected columns {sorted(need)}")
        for row in reader:
            a, b = row[key_cols[0]], row[key_cols[1]]
            if a not in pos or b not in pos:
                raise SchemaMismatch(f"{path}: unknown country in row {row}")
            out[int(row["year"])][pos[a], pos[b]] = float(row[value_col])
    return dict(out)


def cmd_compare(s: Settings, out: Path) -> dict:
    """Score OT and gravity flows against the reporter-averaged data."""
    panel = _load_panel(s, "compare")
    cfg = s["compare"]
    labels = panel.country_index.labels
    ot = _read_estimates(_require_path(cfg["ot"], "compare.ot"), labels, "flow")
    grav = _read_estimates(_require_path(cfg["gravity"], "compare.gravity"), labels, "predicted",
                           ("exporter", "importer"))
    report = compare_models(ot, grav, panel, commodity=cfg["commodity"],
                            positive_only=bool(cfg["positive_only"]), pooled=bool(cfg["pooled"]))
    report.write_csv(out / "comparison.csv")
    report.write_json(out / "comparison.json")
    report.write_scatter(out / "scatter.csv")
    return {"report": "comparison.csv", "detail": "comparison.json", "scatter": "scatter.csv"}


HANDLERS = {
    "ingest": cmd_ingest,
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "gravity": cmd_gravity,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="tradecost", description="Trade-cost inference by inverse optimal transport.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
    return parser


def _versions() -> dict:
    import torch

    return {"tradecost": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "torch": torch.__version__}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = _parse_set(args.set)
    for key in ("seed", "epsilon", "threads", "out"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.verbose:
        logging.getLogger().setLevel(logging.INFO)
    s = Settings.resolve(args.config, overrides)
    if not (isinstance(s["epsilon"], (int, float)) and s["epsilon"] > 0):
        raise ConfigError("epsilon must be a positive number")
    threads = int(s["threads"])
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    import torch

    torch.set_num_threads(threads)
    out = Path(s["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    start = time.perf_counter()
    outputs = HANDLERS[args.command](s, out)
    elapsed = time.perf_counter() - start
    write_json(out / f"{args.command}_config.json", s.data)
    write_json(out / f"{args.command}_manifest.json", {
        "command": args.command,
        "config": s.data,
        "seed": s["seed"],
        "versions": _versions(),
        "outputs": outputs,
        "timing_file": "timing.txt",
    })
    with open(out / "timing.txt", "a", encoding="utf-8") as fh:
        fh.write(f"{args.command} wall_time_seconds {elapsed:.3f}\n")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except TradeCostError as exc:
        print(f"tradecost: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tradecost: {type(exc).__name__}: {exc}", file=sys.stderr)
        return IoFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
