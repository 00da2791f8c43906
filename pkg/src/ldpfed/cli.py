"""Command-line entry point.

Subcommands::

    ldpfed run                --config exp.cfg [--set key=value ...]
    ldpfed compare            --config exp.cfg [--sweep key=v1,v2,...] [--assert-ordering]
    ldpfed inspect-mechanism  --c 1 --rho 0 --alpha-p 2 --v 0
    ldpfed inspect-schedule   --config exp.cfg
    ldpfed selftest

Data goes to stdout, diagnostics to stderr.  Exit codes: 0 success,
1 failed check (selftest, --assert-ordering), 2 configuration error,
3 data error, 4 numeric or protocol error.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from pathlib import Path

import numpy as np

from ldpfed import __version__, nn_core
from ldpfed.config import ExperimentConfig, SCHEMA, from_entries, parse_config, parse_overrides
from ldpfed.errors import CapacityError, ConfigError, LdpFedError
from ldpfed.federation import (
    Comparison,
    experiment_schedule,
    ordering_violations,
    run_all_baselines,
    run_experiment,
)
from ldpfed.data_io import METRIC_FIELDS, write_metrics
from ldpfed.ldp_mechanism import (
    VERIFY_LIMIT,
    DiscretizationSpec,
    EmMechanism,
    discretize,
    em_pmf,
    em_prob,
    em_tail_mass,
    format_pmf_table,
    verify_cldp_bound,
)

OUT_ENV = "LDPFED_OUT"
TAIL_WINDOW = 10


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="experiment config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config key (repeatable)")
    parser.add_argument("--out", help=f"output directory (${OUT_ENV} takes precedence)")
    parser.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    parser.add_argument("--threads", type=int, help="worker threads (0 = all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldpfed", description="Federated learning with per-layer LDP budgets.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment arm and write its metrics")
    _common(p)

    p = sub.add_parser("compare", help="run every configured arm on shared shards and seeds")
    _common(p)
    p.add_argument("--sweep", metavar="K=V1,V2,...",
                   help="repeat the comparison once per value of one config key")
    p.add_argument("--assert-ordering", action="store_true",
                   help="exit 1 unless the toy-scale accuracy ordering holds")

    p = sub.add_parser("inspect-mechanism", help="print the output distribution for one input")
    p.add_argument("--c", default="1", help="clipping bound")
    p.add_argument("--rho", type=int, default=0, help="decimal digits kept")
    p.add_argument("--alpha-p", type=float, required=True, help="per-parameter budget")
    p.add_argument("--v", type=float, default=0.0, help="real-valued input")

    p = sub.add_parser("inspect-schedule", help="print the per-round layer and budget plan")
    _common(p)

    sub.add_parser("selftest", help="run the fast invariant checks")
    return parser


# -- config plumbing -----------------------------------------------------------


def load_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.threads is not None:
        overrides["run.threads"] = str(args.threads)
    if args.config is not None:
        return parse_config(args.config, overrides)
    if not overrides:
        raise ConfigError("no --config given and no --set overrides")
    return from_entries(overrides)


def output_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ENV) or args.out or cfg.out)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


# -- commands --------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    result = run_experiment(cfg)
    jsonl, csv_path = write_metrics(result.rows, out, result.label)
    print(f"arm\t{result.label}")
    print(f"final_accuracy\t{result.final_accuracy!r}")
    print(f"alpha_spent\t{result.alpha_spent!r}")
    print(f"metrics\t{jsonl}\t{csv_path}")
    return 0


def _sweep_settings(spec: str | None) -> list[tuple[str, str]]:
    if spec is None:
        return [("", "")]
    if "=" not in spec:
        raise ConfigError(f"--sweep {spec!r} is not key=v1,v2,...")
    key, values = (s.strip() for s in spec.split("=", 1))
    if key not in SCHEMA:
        raise ConfigError(f"--sweep: unknown config key {key!r}")
    parts = [v.strip() for v in values.split(",") if v.strip()]
    if not parts:
        raise ConfigError("--sweep needs at least one value")
    return [(key, v) for v in parts]


def run_compare(cfg: ExperimentConfig, sweep: str | None) -> list[tuple[str, str, Comparison]]:
    settings = _sweep_settings(sweep)
    # validate every setting before spending time on any of them
    configs = [cfg.with_overrides({k: v}) if k else cfg for k, v in settings]
    for c in configs:
        for arm in c.arms:
            c.for_arm(arm)
    return [(k, v, run_all_baselines(c)) for (k, v), c in zip(settings, configs)]


def comparison_tables(results) -> tuple[str, str]:
    """Merged per-round table and per-setting summary, both as CSV text."""
    round_rows, summary_rows = [], []
    for key, value, comp in results:
        for arm in comp.arms:
            for seed, run in zip(comp.seeds, comp.runs[arm]):
                for r in run.rows:
                    round_rows.append([key, value, seed] + [getattr(r, f) for f in METRIC_FIELDS])
        for row in comp.summary():
            summary_rows.append([key, value, row["arm"], row["final_accuracy"], row["std"],
                                 row["alpha_spent"], row["repeats"]])
    rounds = _csv_text(["sweep_key", "sweep_value", "seed", *METRIC_FIELDS], round_rows)
    summary = _csv_text(["sweep_key", "sweep_value", "arm", "final_accuracy", "std",
                         "alpha_spent", "repeats"], summary_rows)
    return rounds, summary


def cmd_compare(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    results = run_compare(cfg, args.sweep)
    rounds, summary = comparison_tables(results)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare_rounds.csv").write_text(rounds)
    (out / "compare_summary.csv").write_text(summary)
    sys.stdout.write(summary)
    if not args.assert_ordering:
        return 0
    failed = False
    for key, value, comp in results:
        where = f" [{key}={value}]" if key else ""
        for msg in ordering_violations(comp, 1.0 / cfg.layers[-1]):
            print(f"ordering violated{where}: {msg}", file=sys.stderr)
            failed = True
    if not failed:
        print("ordering holds", file=sys.stderr)
    return 1 if failed else 0


def cmd_inspect_mechanism(args) -> int:
    spec = DiscretizationSpec(args.c, args.rho)
    mech = EmMechanism(spec, args.alpha_p)
    v = discretize(args.v, spec)
    print(f"# universe [-{spec.bound}, {spec.bound}] ({spec.size} values), alpha_p={args.alpha_p!r}, v={v}")
    try:
        pmf = em_pmf(mech, v)
    except CapacityError:
        lo, hi = max(v - TAIL_WINDOW, -spec.bound), min(v + TAIL_WINDOW, spec.bound)
        print("# universe too large to tabulate; analytic summary follows")
        print(f"mode\t{v}")
        print(f"p_mode\t{float(em_prob(mech, v, np.array([v]))[0])!r}")
        print(f"tail_mass_beyond_{TAIL_WINDOW}\t{em_tail_mass(mech, v, TAIL_WINDOW)!r}")
        ys = np.arange(lo, hi + 1)
        print("value\tprobability")
        for y, p in zip(ys, em_prob(mech, v, ys)):
            print(f"{int(y)}\t{float(p)!r}")
        return 0
    sys.stdout.write(format_pmf_table(pmf))
    if spec.size <= VERIFY_LIMIT:
        report = verify_cldp_bound(mech)
        print(f"# max_ratio_slack\t{report.max_slack!r}\t({report.triples} triples, "
              f"{'holds' if report.holds else 'VIOLATED'})")
    else:
        print(f"# ratio bound not checked: universe above {VERIFY_LIMIT} values")
    return 0


def cmd_inspect_schedule(args) -> int:
    cfg = load_config(args)
    model = nn_core.init_model(nn_core.ArchSpec(cfg.layers), 0)
    sched = experiment_schedule(cfg, nn_core.layer_partition(model))
    print(f"# strategy={sched.strategy} q={cfg.q!r} amplified_total={sched.amplified_total!r}")
    print("round\tlayers\talpha_round\talpha_per_param")
    sys.stdout.write(sched.dump())
    return 0


def cmd_selftest(args) -> int:
    from ldpfed.selftest import run_selftest

    start = time.perf_counter()
    results = run_selftest()
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"# {len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "inspect-mechanism": cmd_inspect_mechanism,
    "inspect-schedule": cmd_inspect_schedule,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except LdpFedError as exc:
        print(f"ldpfed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
