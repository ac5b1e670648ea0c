"""Command-line entry point: run, baseline, compare, metrics.

Exit codes: 0 success, 1 configuration or input error, 2 optimizer
divergence (run/compare) or insufficient calibration data (baseline).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from .idt import Baseline, CalibrationError, IdtConfig, calibrate
from .info_metrics import (
    DiscretizationScheme,
    EntanglementMetrics,
    NotReadyError,
    SampleTriple,
    TripleHistogram,
    batch_recompute_oracle,
    compute_metrics,
    discretize,
)
from .mpc_core import ConfigError, MpcConfig
from .sim_harness import ScenarioSpec, compare, default_schemes, run_closed_loop, summarize

log = logging.getLogger("elmpc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
CSV_SCHEMA_VERSION = 1
ORACLE_TOL = 1e-9

# current-value fields that also set their nominal counterpart when overridden alone
_NOMINAL_ALIASES = {"Np": "Np_nominal", "Ts": "Ts_nominal", "u_bound": "u_bound_nominal", "C_drag": "C_drag_nominal"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(name: str, value, current):
    """Type-check an override against the field's current value."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} expects a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        return value
    if isinstance(current, float) or current is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, (tuple, list)):
        if not isinstance(value, list) or len(value) != len(current):
            raise ConfigError(f"{name} expects a list of {len(current)} numbers")
        return tuple(float(v) for v in value)
    return value


def apply_overrides(pairs: Sequence[str], mpc: dict, idt: dict, scenario: dict) -> None:
    """Apply ``section.key=value`` overrides in place."""
    sections = {"mpc": (mpc, MpcConfig), "idt": (idt, IdtConfig)}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        key, raw = pair.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} needs a section prefix (mpc., idt., scenario.)")
        section, name = key.split(".", 1)
        value = _parse_value(raw)
        if section == "scenario":
            if name not in {f.name for f in fields(ScenarioSpec)}:
                raise ConfigError(f"unknown scenario field {name!r}")
            scenario[name] = value
            continue
        if section not in sections:
            raise ConfigError(f"unknown override section {section!r}")
        target, cls = sections[section]
        defaults = cls()
        if name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown {section} parameter {name!r}")
        target[name] = _coerce(key, value, getattr(defaults, name))
        if section == "mpc" and name in _NOMINAL_ALIASES and _NOMINAL_ALIASES[name] not in target:
            target[_NOMINAL_ALIASES[name]] = target[name]


def _load_configs(args) -> tuple[ScenarioSpec, MpcConfig, IdtConfig]:
    path = Path(args.scenario)
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    mpc: dict = {}
    idt: dict = {}
    apply_overrides(args.set or [], mpc, idt, doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        scenario = ScenarioSpec.from_dict(doc)
        mpc_cfg = MpcConfig(**mpc).validate()
        idt_cfg = IdtConfig(**idt).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return scenario, mpc_cfg, idt_cfg


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("ELMPC_OUT") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(scenario, mpc_cfg, idt_cfg) -> dict:
    s, a = default_schemes()
    return {
        "seed": scenario.seed,
        "scenario": scenario.to_dict(),
        "mpc": mpc_cfg.to_dict(),
        "idt": idt_cfg.to_dict(),
        "schemes": {"s": s.to_dict(), "a": a.to_dict()},
    }


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def cmd_run(args) -> int:
    scenario, mpc_cfg, idt_cfg = _load_configs(args)
    baseline = Baseline.load(args.baseline) if args.baseline else None
    out = _out_dir(args)
    result = run_closed_loop(scenario, mpc_cfg, idt_cfg, el_enabled=args.el == "on", baseline=baseline)
    summary = summarize(result, rmse_window=args.rmse_window)
    summary["config"] = _resolved(scenario, mpc_cfg, idt_cfg)
    summary["el_enabled"] = args.el == "on"
    result.write_csv(out / "log.csv")
    _write_json(out / "summary.json", summary)
    _write_json(out / "timing.json", result.timing())
    for alert in result.alerts:
        log.warning(alert.message)
    if result.aborted:
        log.error("optimizer diverged: %s", result.abort_reason)
        return EXIT_RUNTIME
    print(f"wrote {out / 'log.csv'} and {out / 'summary.json'} (rmse {summary['rmse']:.4f} m)")
    return EXIT_OK


def cmd_baseline(args) -> int:
    scenario, mpc_cfg, idt_cfg = _load_configs(args)
    if scenario.events:
        raise ConfigError("baseline calibration needs an event-free scenario")
    out = _out_dir(args)
    result = run_closed_loop(scenario, mpc_cfg, idt_cfg, el_enabled=False)
    if result.aborted:
        log.error("optimizer diverged: %s", result.abort_reason)
        return EXIT_RUNTIME
    full = [r for r in result.rows if r["psi"] is not None and r["cycle"] >= idt_cfg.window]
    stream = [_MetricRow(r["psi"], r["asymmetry"], r["memory"]) for r in full]
    s, a = default_schemes()
    try:
        span = (full[0]["cycle"], full[-1]["cycle"]) if full else (0, 0)
        baseline = calibrate(
            stream, idt_cfg.calibration_length, idt_cfg.k, span, {"s": s.to_dict(), "a": a.to_dict()}, idt_cfg.std_floor
        )
    except CalibrationError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    path = Path(args.output) if args.output else out / "baseline.json"
    baseline.save(path)
    print(f"wrote {path}")
    return EXIT_OK


class _MetricRow:
    __slots__ = ("psi", "asymmetry", "memory")

    def __init__(self, psi, asymmetry, memory):
        self.psi, self.asymmetry, self.memory = psi, asymmetry, memory


def cmd_compare(args) -> int:
    scenario, mpc_cfg, idt_cfg = _load_configs(args)
    out = _out_dir(args)
    res = compare(scenario, mpc_cfg, idt_cfg, rmse_window=args.rmse_window)
    on, off = res["logs"]
    config = _resolved(scenario, mpc_cfg, idt_cfg)
    for tag, summ, lg in (("el_on", res["el_on"], on), ("el_off", res["el_off"], off)):
        summ["config"] = config
        _write_json(out / f"summary_{tag}.json", summ)
        lg.write_csv(out / f"log_{tag}.csv")
        _write_json(out / f"timing_{tag}.json", lg.timing())
    _write_json(out / "delta.json", res["delta"])
    with open(out / "delta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "el_on", "el_off", "delta"])
        for key, d in res["delta"].items():
            w.writerow([key, res["el_on"].get(key), res["el_off"].get(key), d])
    if on.aborted or off.aborted:
        log.error("optimizer diverged: %s", on.abort_reason or off.abort_reason)
        return EXIT_RUNTIME
    print(f"wrote paired summaries and delta table to {out}")
    return EXIT_OK


def read_triples_csv(path: Path, scheme_doc: Optional[dict]) -> list[SampleTriple]:
    """Read triples either as integer symbols (s, a, s_next) or as raw features.

    Raw feature columns are ``s.<i>``, ``a.<i>``, ``s_next.<i>`` and need a
    scheme document ``{"s": {...}, "a": {...}}``; without one the default
    harness schemes apply.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no rows")
    out = []
    if {"s", "a", "s_next"} <= set(cols):
        for i, r in enumerate(rows):
            if r.get("schema_version") not in (None, "", str(CSV_SCHEMA_VERSION)):
                raise ValueError(f"{path}: unsupported schema_version {r['schema_version']}")
            try:
                s, a, sn = int(r["s"]), int(r["a"]), int(r["s_next"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: row {i + 1}: {exc}") from exc
            if min(s, a, sn) < 0:
                raise ValueError(f"{path}: row {i + 1}: negative symbol")
            out.append(SampleTriple(s, a, sn, i))
        return out
    groups = {p: sorted((c for c in cols if c.startswith(p + ".")), key=lambda c: int(c.split(".")[1])) for p in ("s", "a", "s_next")}
    if not groups["s"] or not groups["a"] or len(groups["s"]) != len(groups["s_next"]):
        raise ValueError(f"{path}: expected columns s,a,s_next or s.<i>,a.<i>,s_next.<i>")
    if scheme_doc:
        ss, sa = DiscretizationScheme.from_dict(scheme_doc["s"]), DiscretizationScheme.from_dict(scheme_doc["a"])
    else:
        ss, sa = default_schemes()
    for i, r in enumerate(rows):
        vals = {p: [float(r[c]) for c in groups[p]] for p in groups}
        out.append(SampleTriple(discretize(vals["s"], ss), discretize(vals["a"], sa), discretize(vals["s_next"], ss), i))
    return out


def _fmt_metrics(m: EntanglementMetrics) -> str:
    lines = [
        f"psi        {m.psi:.9f} bits",
        f"asymmetry  {m.asymmetry:.9f} bits",
        f"memory     {m.memory:.9f} bits",
        f"H(S)       {m.h_s:.9f}",
        f"H(A)       {m.h_a:.9f}",
        f"H(S')      {m.h_s_next:.9f}",
        f"H(S,A)     {m.h_sa:.9f}",
        f"H(A,S')    {m.h_a_snext:.9f}",
        f"H(S,S')    {m.h_s_snext:.9f}",
        f"H(S,A,S')  {m.h_sas:.9f}",
        f"n          {m.n}",
    ]
    return "\n".join(lines)


def cmd_metrics(args) -> int:
    path = Path(args.csv)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    scheme_doc = json.loads(Path(args.scheme).read_text()) if args.scheme else None
    try:
        triples = read_triples_csv(path, scheme_doc)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    window = args.window or len(triples)
    n_s = max(max(t.s, t.s_next) for t in triples) + 1
    n_a = max(t.a for t in triples) + 1
    hist = TripleHistogram(n_s, n_a, window, min(args.n_min, window))
    for t in triples:
        hist.push(t)
    try:
        m = compute_metrics(hist)
    except NotReadyError as exc:
        raise ConfigError(str(exc)) from exc
    if args.json:
        print(json.dumps(m.as_dict(), indent=2))
    else:
        print(_fmt_metrics(m))
    if args.oracle:
        ref = batch_recompute_oracle(hist)
        worst = max(abs(getattr(m, k) - getattr(ref, k)) for k in m.as_dict() if k != "n")
        status = "match" if worst <= ORACLE_TOL else "MISMATCH"
        print(f"oracle: {status} (max abs difference {worst:.3e} bits)")
        if status != "match":
            return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elmpc", description="Entanglement-metric monitoring for a point-mass MPC")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--scenario", required=True, help="scenario JSON document")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--out", help="output directory (default: $ELMPC_OUT or ./out)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="parameter override, repeatable")

    r = sub.add_parser("run", help="run one closed-loop scenario")
    common(r)
    r.add_argument("--el", choices=("on", "off"), default="on")
    r.add_argument("--baseline", help="baseline JSON to use instead of in-run calibration")
    r.add_argument("--rmse-window", type=int, default=100)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("baseline", help="calibrate a baseline from an event-free scenario")
    common(b)
    b.add_argument("--output", help="baseline file (default: <out>/baseline.json)")
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("compare", help="paired EL-on / EL-off runs")
    common(c)
    c.add_argument("--rmse-window", type=int, default=100)
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("metrics", help="metrics over a CSV of triples")
    m.add_argument("csv")
    m.add_argument("--window", type=int, help="sliding window length (default: all rows)")
    m.add_argument("--n-min", type=int, default=1, help="minimum samples before metrics are reported")
    m.add_argument("--scheme", help="scheme JSON for raw feature columns")
    m.add_argument("--oracle", action="store_true", help="cross-check against batch recomputation")
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"elmpc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"elmpc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
