"""Command-line entry point.

Exit codes: 0 success, 1 input or execution error, 2 (audit-dag only)
biasing paths found.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .bias_audit import EstimatorConfig, ScenarioSpec, run_scenario
from .dag import DagError, PathMode, bias_audit_report, expand_with_cohort_indicator, load_dag
from .estimators import (InsufficientData, estimate_from_interval, heterogeneity_interaction,
                         meta_fixed_random, pooled_analysis, replication_analysis)
from .fixtures import fixture_dir
from .protocol import ProtocolError, emulation_report, load_bundle, render_report
from .scenarios import get_scenario, scenario_library
from .scm import MultiCohortDataset, ModelError, cohort_from_dict, model_from_dict, simulate

PROFILES = {
    "smoke": {"replications": 20, "n_per_cohort": 2000, "n_boot": 100, "mi_m": 5},
    "acceptance": {"replications": 200, "n_per_cohort": 20000, "n_boot": 200, "mi_m": 20},
}
OVERRIDE_KEYS = {"replications": int, "n_per_cohort": int, "n_boot": int, "workers": int, "mi_m": int}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1, keeping 2 for "biases found"
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def _require_seed(args) -> int:
    if args.seed is None:
        raise CliError(f"{args.command} is stochastic and needs --seed")
    return int(args.seed)


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"override {item!r} is not key=value")
        if key not in OVERRIDE_KEYS:
            raise CliError(f"unknown override key {key!r}; allowed: {sorted(OVERRIDE_KEYS)}")
        try:
            out[key] = OVERRIDE_KEYS[key](value)
        except ValueError:
            raise CliError(f"override {key} needs an integer, got {value!r}") from None
    return out


# ---------------------------------------------------------------------------
# audit-dag
# ---------------------------------------------------------------------------

def _resolve_dag_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = fixture_dir() / "dags" / f"{name}.json"
    if bundled.exists():
        return bundled
    raise CliError(f"no DAG file {name!r} (and no bundled fixture of that name)")


def cmd_audit_dag(args) -> int:
    dag = load_dag(_resolve_dag_path(args.dag))
    if args.expand:
        dag = expand_with_cohort_indicator(dag, [t.strip() for t in args.expand.split(",") if t.strip()])
    mode = {"true": PathMode.TRUE_EXPOSURE, "proxy": PathMode.PROXY_EXPOSURE, None: None}[args.mode]
    report = bias_audit_report(dag, mode)
    fmt = args.format or "text"
    if fmt == "json":
        text = report.to_json()
    elif fmt == "markdown":
        text = _audit_markdown(report)
    elif fmt == "text":
        text = report.to_text()
    else:
        raise CliError("audit-dag supports text, json or markdown output")
    _emit(text, args.out)
    return 2 if report.biased else 0


def _audit_markdown(report) -> str:
    lines = [f"# Bias audit: {report.dag_name}", "", f"Mode: {report.mode.value}", ""]
    rows = [(g, p) for g, paths in report.groups.items() for p in paths]
    if not rows:
        lines.append("no open biasing paths")
    else:
        lines += ["| Group | Status | Path | Openers |", "|---|---|---|---|"]
        lines += [f"| {g} | {p.status.value} | {p.render()} | {', '.join(sorted(p.openers)) or '-'} |"
                  for g, p in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# emulation-report
# ---------------------------------------------------------------------------

def _resolve_fixture(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    for candidate in (fixture_dir() / name, fixture_dir() / f"{name}.json"):
        if candidate.exists():
            return candidate
    raise CliError(f"no protocol/plan file {name!r}")


def cmd_emulation_report(args) -> int:
    protocol, plans = None, []
    for f in args.files:
        p, ps = load_bundle(_resolve_fixture(f))
        if p is not None:
            if protocol is not None:
                raise CliError("more than one protocol supplied")
            protocol = p
        plans += ps
    if protocol is None:
        raise CliError("no target-trial protocol among the inputs")
    if not plans:
        raise CliError("no emulation plans among the inputs")
    fmt = args.format or "markdown"
    if fmt not in ("text", "json", "markdown"):
        raise CliError("emulation-report supports text, json or markdown output")
    _emit(render_report(emulation_report(protocol, plans), fmt), args.out)
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = _require_seed(args)
    if Path(args.scenario).exists():
        spec = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        model = model_from_dict(spec["model"])
        cohorts = [cohort_from_dict(c) for c in spec["cohorts"]]
        if args.n:
            cohorts = [replace(c, n=args.n) for c in cohorts]
        scenario_id = spec.get("id", Path(args.scenario).stem)
    else:
        sc = get_scenario(args.scenario)
        if args.n:
            sc = sc.with_n(args.n)
        model, cohorts, scenario_id = sc.model, list(sc.cohorts), sc.scenario_id
    ds = simulate(model, cohorts, seed, replication=args.replication)
    ds.metadata.update({"scenario": scenario_id, "parameter_set": "P1" if scenario_id.startswith("S-") else "custom"})
    fmt = args.format or "csv"
    if fmt != "csv":
        raise CliError("simulate writes CSV only")
    if args.out:
        ds.to_csv(args.out)
    else:
        out = ds.frame.copy()
        out["selected"] = out["selected"].astype(int)
        sys.stdout.write(out.to_csv(index=False, na_rep="", lineterminator="\n"))
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _records_out(records: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(records, indent=2, default=_json_default) + "\n"
    fields = sorted({k for r in records for k in r}, key=lambda k: (_FIELD_ORDER.get(k, 99), k))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: _cell(r.get(k)) for k in fields})
        return buf.getvalue()
    rows = [fields] + [[_cell(r.get(k)) for k in fields] for r in records]
    widths = [max(len(row[i]) for row in rows) for i in range(len(fields))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    if fmt == "markdown":
        lines = ["| " + " | ".join(row) + " |" for row in rows]
        lines.insert(1, "|" + "---|" * len(fields))
    return "\n".join(lines) + "\n"


_FIELD_ORDER = {k: i for i, k in enumerate(
    ["analysis", "method", "estimand", "scope", "cohort", "arm", "point", "ci_low", "ci_high", "se_log", "n_used",
     "warnings", "insufficient_data"])}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    if isinstance(v, list):
        return "; ".join(map(str, v))
    return str(v)


def _json_default(v):
    if hasattr(v, "item"):
        return v.item()
    return str(v)


def _reported(path: Path) -> dict:
    data = json.loads(path.read_text(encoding="utf-8"))
    out = {}
    for cohort, arms in data["replication"].items():
        out[cohort] = [estimate_from_interval(pt, lo, hi, arm, cohort, data.get("comparator", 0))
                       for arm, (pt, lo, hi) in arms.items()]
    return out


def _meta_records(per_cohort: dict) -> list[dict]:
    by_arm: dict = {}
    for res in per_cohort.values():
        if isinstance(res, InsufficientData):
            continue
        for e in res:
            by_arm.setdefault(e.arm, []).append(e)
    records = []
    for arm in sorted(by_arm, key=str):
        ests = by_arm[arm]
        if len(ests) < 2:
            continue
        m = meta_fixed_random(ests)
        for label, theta, se in (("fixed", m.fixed, m.fixed_se), ("random", m.random, m.random_se)):
            records.append({"analysis": f"meta-{label}", "arm": arm, "point": math.exp(theta),
                            "ci_low": math.exp(theta - 1.959963984540054 * se),
                            "ci_high": math.exp(theta + 1.959963984540054 * se), "se_log": se,
                            "Q": m.q, "I2": m.i2, "tau2": m.tau2})
    return records


def cmd_estimate(args) -> int:
    fmt = args.format or "text"
    if args.reported:
        per_cohort = _reported(_resolve_fixture(args.reported))
        records = [dict(e.to_record(), analysis="reported") for res in per_cohort.values() for e in res]
        _emit(_records_out(records + _meta_records(per_cohort), fmt), args.out)
        return 0
    if not args.data:
        raise CliError("estimate needs a data file or --reported")
    seed = _require_seed(args)
    ds = MultiCohortDataset.read_csv(args.data)
    df = ds.frame
    if args.selected_only:
        df = df[df["selected"]]
    covs = [c for c in (args.covariates or "").split(",") if c]
    needed = [args.exposure, args.outcome, *covs]
    missing_cols = [c for c in needed if c not in df.columns]
    if missing_cols:
        raise CliError(f"columns not in data: {missing_cols}")
    df = df[df[needed].notna().all(axis=1)]
    kw = {"n_boot": args.n_boot, "seed": seed}
    if args.method == "conditional":
        kw = {}
    records = []
    if args.analysis in ("pooled", "all"):
        ests = pooled_analysis(df, args.exposure, args.outcome, covs, method=args.method,
                               include_cohort_indicator=args.cohort_indicator, **kw)
        records += [dict(e.to_record(), analysis="pooled") for e in ests]
    if args.analysis in ("replication", "meta", "all"):
        per = replication_analysis(df, args.exposure, args.outcome, covs, method=args.method, **kw)
        if args.analysis != "meta":
            for res in per.values():
                if isinstance(res, InsufficientData):
                    records.append(dict(res.to_record(), analysis="replication"))
                else:
                    records += [dict(e.to_record(), analysis="replication") for e in res]
        if args.analysis in ("meta", "all"):
            records += _meta_records(per)
    if args.analysis in ("interaction", "all") and df["cohort"].nunique() == 2:
        for t in heterogeneity_interaction(df, args.exposure, args.outcome, covs):
            records.append({"analysis": "interaction", "arm": t.arm, "point": math.exp(t.log_or),
                            "se_log": t.se, "z": t.z, "p_value": t.p_value})
    _emit(_records_out(records, fmt), args.out)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def default_estimators(scenario_id: str, mi_m: int = 20) -> tuple[EstimatorConfig, ...]:
    E = EstimatorConfig
    base = scenario_id.split("/")[0]
    if base == "S-1A":
        return (E("crude"), E("conditional", ("C",)), E("gcomp", ("C",)), E("ipw", ("C",)), E("aipw", ("C",)),
                E("gcomp", ("C", "U"), label="gcomp{C,U} (oracle)"))
    if base in ("S-1B", "S-1B-cancel"):
        return (E("gcomp", ("C",)), E("gcomp", ("C",), cohort_indicator=True),
                E("gcomp", ("C", "U"), label="gcomp{C,U} (oracle)"),
                E("gcomp", ("C", "U"), cohort_indicator=True, label="gcomp{C,U}+cohort (oracle)"))
    if base == "S-2A":
        return (E("crude", missing_data="complete_case"), E("crude", missing_data="ipw_participation"),
                E("crude", ("A",), missing_data="mi", mi_m=mi_m), E("crude", missing_data="full",
                                                                      label="crude (full cohort, oracle)"))
    if base == "S-2B":
        return (E("crude", missing_data="complete_case"), E("crude", missing_data="ipw_participation"),
                E("crude", ("A",), missing_data="mi", mi_m=mi_m),
                E("crude", ("A",), missing_data="mi", mi_m=mi_m, mi_scope="PerCohort"),
                E("crude", missing_data="full", label="crude (full cohort, oracle)"))
    if base == "S-3A":
        return (E("crude"), E("crude", exposure="X", label="crude on true X (oracle)"))
    if base == "S-3B":
        return (E("crude"), E("crude", cohort_indicator=True, label="crude+cohort"),
                E("crude", exposure="X", label="crude on true X (oracle)"))
    raise CliError(f"no default estimators for scenario {scenario_id!r}")


def _bench_specs(target: str, profile: dict, seed: int) -> list[ScenarioSpec]:
    common = {k: profile[k] for k in ("replications", "n_per_cohort", "n_boot", "workers") if k in profile}
    if Path(target).exists():
        raw = json.loads(Path(target).read_text(encoding="utf-8"))
        merged = {**common, **{k: v for k, v in raw.items() if k != "seed"}, "seed": raw.get("seed", seed)}
        try:
            return [ScenarioSpec.from_dict(merged)]
        except KeyError as exc:
            raise CliError(f"unknown scenario {exc.args[0]}") from None
    ids = list(scenario_library(n=1)) if target == "all" else [target]
    specs = []
    for sid in ids:
        try:
            get_scenario(sid, n=1)
        except KeyError as exc:
            raise CliError(str(exc.args[0])) from None
        specs.append(ScenarioSpec(sid, default_estimators(sid, profile.get("mi_m", 20)), seed=seed, **common))
    return specs


def cmd_bench(args) -> int:
    seed = _require_seed(args)
    profile = {**PROFILES[args.profile or "smoke"], **_parse_overrides(args.set)}
    specs = _bench_specs(args.scenario, profile, seed)
    outdir = Path(args.out or "bench-results")
    outdir.mkdir(parents=True, exist_ok=True)
    summary = []
    for spec in specs:
        report = run_scenario(spec, keep_raw=args.raw)
        stem = report.scenario_id.replace("/", "_")
        (outdir / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8", newline="\n")
        (outdir / f"{stem}.json").write_text(report.to_json(), encoding="utf-8", newline="\n")
        if args.raw:
            (outdir / f"{stem}.raw.csv").write_text(report.raw_csv(), encoding="utf-8", newline="\n")
        summary.append(report.to_text())
    sys.stdout.write("\n".join(summary))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="seed for every random draw (required when stochastic)")
    common.add_argument("--out", help="output file (bench: output directory)")
    common.add_argument("--format", choices=["text", "json", "markdown", "csv"])
    common.add_argument("--profile", choices=sorted(PROFILES))

    parser = _Parser(prog="cohortforge", description="Bias audits and simulations for multi-cohort causal studies.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("audit-dag", parents=[common], help="classify biasing paths in a DAG file")
    p.add_argument("dag", help="DAG JSON file or bundled fixture name (e.g. DAG-1A)")
    p.add_argument("--expand", help="comma-separated targets of an added cohort indicator S")
    p.add_argument("--mode", choices=["true", "proxy"])
    p.set_defaults(func=cmd_audit_dag)

    p = sub.add_parser("emulation-report", parents=[common], help="target-trial emulation gap report")
    p.add_argument("files", nargs="+", help="protocol/plan JSON files or bundled fixture names (spry2020)")
    p.set_defaults(func=cmd_emulation_report)

    p = sub.add_parser("simulate", parents=[common], help="simulate a scenario to CSV")
    p.add_argument("scenario", help="built-in scenario id (S-1A..S-3B) or model spec JSON")
    p.add_argument("--n", type=int, help="rows per cohort")
    p.add_argument("--replication", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="estimate effects from a dataset")
    p.add_argument("data", nargs="?", help="CSV produced by simulate (or with the same layout)")
    p.add_argument("--exposure", default="X")
    p.add_argument("--outcome", default="Y")
    p.add_argument("--covariates", default="")
    p.add_argument("--method", default="gcomp", choices=["crude", "conditional", "ipw", "gcomp", "aipw"])
    p.add_argument("--analysis", default="pooled", choices=["pooled", "replication", "meta", "interaction", "all"])
    p.add_argument("--cohort-indicator", action="store_true")
    p.add_argument("--selected-only", action="store_true", help="restrict to selected rows")
    p.add_argument("--n-boot", type=int, default=200)
    p.add_argument("--reported", help="JSON of published per-cohort ORs to meta-analyse (e.g. table2_spry)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", parents=[common], help="run scenario replication sweeps")
    p.add_argument("scenario", help="scenario id, 'all', or a scenario spec JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=f"override one of {sorted(OVERRIDE_KEYS)}")
    p.add_argument("--raw", action="store_true", help="also write per-replication estimates")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DagError, ProtocolError, ModelError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cohortforge {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
