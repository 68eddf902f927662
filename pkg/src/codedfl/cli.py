"""Command-line entry point: simulate, verify-code, sweep-alpha.

Exit codes: 0 success, 1 residual check failed, 2 configuration or usage
error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from .config import config_from_dict, load_config
from .errors import CodedFLError, ConfigError
from .fixedpoint import FixedSpec
from .gradcode import DEFAULT_TOL, build_code, verify_code
from .latency import write_timings_csv
from .protocol import (
    prepare_data,
    read_trajectory_csv,
    run_experiment,
    summarize,
    time_to_target,
    trajectory_csv,
)
from .rng import stream

EXIT_OK, EXIT_RESIDUAL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

SWEEP_HEADER = ("alpha", "target", "time_s", "sharing_s", "mean_epoch_s")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("<args>", message)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None


def _overrides(args) -> dict:
    out = {}
    for name, key in (("scheme", "scheme"), ("seed", "seed"), ("epochs", "epochs"),
                      ("workers", "workers")):
        val = getattr(args, name, None)
        if val is not None:
            out[key] = val
    if getattr(args, "latency_only", False):
        out["latency_only"] = True
    return out


def _output_paths(args, cfg) -> tuple[Path, Path]:
    csv_path = Path(args.out or cfg.output.csv or "trajectory.csv")
    summary = Path(cfg.output.summary) if cfg.output.summary and not args.out else \
        csv_path.with_suffix(".summary.txt")
    return csv_path, summary


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    baseline = read_trajectory_csv(args.baseline) if args.baseline else None
    result = run_experiment(cfg)
    csv_path, summary_path = _output_paths(args, cfg)
    csv_path.write_text(trajectory_csv(result.trajectory))
    text = summarize(result, cfg, baseline)
    summary_path.write_text(text)
    timings = args.timings or cfg.output.timings_csv
    if timings:
        write_timings_csv(timings, result.timings)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_code(args) -> int:
    if not 1 <= args.alpha <= args.D:
        raise ConfigError("--alpha", f"must satisfy 1 <= alpha <= D (got alpha={args.alpha}, D={args.D})")
    spec = FixedSpec(args.k, args.f)
    tol = args.tol if args.tol is not None else (1e-9 if args.real else DEFAULT_TOL)
    # same construction the simulator uses; --tol only sets what this check demands
    code = build_code(args.D, args.alpha, args.seed, spec)
    exhaustive = True if args.exhaustive else (False if args.samples is not None else None)
    report = verify_code(code, tol, real=args.real, exhaustive=exhaustive,
                         samples=args.samples or 10_000, rng=stream(args.seed, "verify"))
    mode = "exhaustive" if report.exhaustive else "sampled"
    domain = "real" if args.real else f"Q<{spec.k},{spec.f}>"
    print(f"D={report.D} alpha={report.alpha} {domain} {mode} sets={report.tested} "
          f"max_residual={report.max_residual:.3e} tol={tol:.1e} failures={len(report.failures)}")
    for s in report.failures[:10]:
        print(f"  failing set: {list(s)}")
    return EXIT_OK if report.ok else EXIT_RESIDUAL


def cmd_sweep_alpha(args) -> int:
    if not args.alphas:
        raise ConfigError("--alphas", "need at least one alpha")
    base = load_config(args.config, _overrides(args))
    targets = args.target_acc if args.target_acc is not None else base.targets
    if not targets:
        raise ConfigError("--target-acc", "need at least one target accuracy")
    prep = prepare_data(base.model_copy(update={"scheme": "coded"}))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for alpha in args.alphas:
        doc = base.model_dump(by_alias=True)
        doc["code"]["alpha"] = alpha
        doc["scheme"] = "coded"
        cfg = config_from_dict(doc)
        result = run_experiment(cfg, prep)
        mean_epoch = float(np.mean([t.epoch_time for t in result.timings]))
        for target in targets:
            t = time_to_target(result.trajectory, target)
            w.writerow([alpha, f"{target:g}", "DNF" if t is None else f"{t:.6f}",
                        f"{result.sharing_time:.6f}", f"{mean_epoch:.6f}"])
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="codedfl", description="Privacy-preserving coded federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run one experiment and write trajectory CSV + summary")
    s.add_argument("config", nargs="?", help="YAML/JSON run config (defaults if omitted)")
    s.add_argument("--scheme", choices=["coded", "conventional", "conventional-drop"])
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--workers", type=int, help="thread count for per-device work")
    s.add_argument("--latency-only", action="store_true", help="simulate timings only")
    s.add_argument("--out", help="trajectory CSV path (summary goes next to it)")
    s.add_argument("--baseline", help="trajectory CSV of a baseline run for speed-ups")
    s.add_argument("--timings", help="also write per-device timing CSV here")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify-code", help="check the decode identity of a gradient code")
    v.add_argument("--D", type=int, required=True)
    v.add_argument("--alpha", type=int, required=True)
    v.add_argument("--k", type=int, default=48)
    v.add_argument("--f", type=int, default=24)
    v.add_argument("--tol", type=float)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--real", action="store_true", help="check the unquantised code")
    g = v.add_mutually_exclusive_group()
    g.add_argument("--exhaustive", action="store_true")
    g.add_argument("--samples", type=int)
    v.set_defaults(func=cmd_verify_code)

    w = sub.add_parser("sweep-alpha", help="time-to-target for several alpha values")
    w.add_argument("config", nargs="?")
    w.add_argument("--alphas", type=_int_list, required=True)
    w.add_argument("--target-acc", type=_float_list)
    w.add_argument("--seed", type=int)
    w.add_argument("--epochs", type=int)
    w.add_argument("--workers", type=int)
    w.add_argument("--latency-only", action="store_true")
    w.add_argument("--out")
    w.add_argument("-q", "--quiet", action="store_true")
    w.set_defaults(func=cmd_sweep_alpha)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CodedFLError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
