"""Command-line entry point: ``xchain-sim run | model | scenarios``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace

from .perf_model import CostParams, Role, Scenario, amortized_rate, round_half_up, tx_rate
from .sim_harness import SCENARIO_DESCRIPTIONS, ConfigError, SimConfig, emit_report, make_report, simulate


def _cmd_run(args) -> int:
    with open(args.config) as fh:
        try:
            cfg = SimConfig.from_json(json.load(fh))
        except (ConfigError, ValueError) as e:
            print(f"invalid config: {e}", file=sys.stderr)
            return 2
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    try:
        sim = simulate(cfg, record_trace=args.trace is not None)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    report = make_report(sim)
    data = emit_report(report, args.format)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
    if args.trace:
        with open(args.trace, "w") as fh:
            for event in sim.network.trace:
                fh.write(json.dumps(event) + "\n")
    agg = report.aggregate
    print(f"committed={agg['committed']} ignored={agg['ignored']} "
          f"atomicity_violations={agg['atomicity_violations']}", file=sys.stderr)
    return 1 if agg["atomicity_violations"] else 0


def _model_rows(scenarios, params: CostParams, instigators: int) -> list[dict]:
    rows = []
    for s in scenarios:
        for role in Role:
            rate = tx_rate(s, role, params)
            rows.append({"scenario": s.value, "role": role.value, "tps": rate,
                         "tps_rounded": round_half_up(rate) if rate != float("inf") else None})
        if instigators > 1:
            rate = amortized_rate(s, instigators, params)
            rows.append({"scenario": s.value, "role": f"RotatingOriginating(n={instigators})", "tps": rate,
                         "tps_rounded": round_half_up(rate)})
    return rows


def _cmd_model(args) -> int:
    params = CostParams(base_tx_rate=args.base_tps, bls_verify_time=args.verify_ms / 1000.0)
    scenarios = [Scenario(args.scenario)] if args.scenario else list(Scenario)
    rows = _model_rows(scenarios, params, args.instigators)
    if args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["scenario", "role", "tps", "tps_rounded"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    return 0


def _cmd_scenarios(args) -> int:
    for s, text in SCENARIO_DESCRIPTIONS.items():
        print(f"{s.value}: {text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xchain-sim", description="Atomic crosschain transaction simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a simulation from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--trace", help="write the event trace as JSON lines to this file")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("model", help="analytical transaction rates per role")
    p.add_argument("--scenario", choices=[s.value for s in Scenario])
    p.add_argument("--base-tps", type=float, default=375.0)
    p.add_argument("--verify-ms", type=float, default=5.0)
    p.add_argument("--instigators", type=int, default=1)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=_cmd_model)

    p = sub.add_parser("scenarios", help="list built-in scenarios")
    p.set_defaults(func=_cmd_scenarios)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
