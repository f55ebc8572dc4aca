"""Command-line entry points.

Subcommands:
  run              execute one scenario and write its outputs
  bench-coding     Monte Carlo the binned codec on a binary symmetric source
  report           merge per-run metrics into a comparison CSV
  validate-config  check a scenario config, printing every violation

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np


def _cmd_run(args: argparse.Namespace) -> int:
    from . import harness

    try:
        cfg = harness.load_config(args.config)
    except harness.ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        mode = None if args.mode == "config" else args.mode
        metrics = harness.run_scenario(cfg, args.seed, args.out, mode=mode)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    print(
        f"run complete: mode={metrics.mode} bytes={metrics.exchange_bytes} "
        f"psnr {metrics.psnr_before:.2f} -> {metrics.psnr_after:.2f} dB, "
        f"distortion {metrics.distortion_before:.3f} -> "
        f"{metrics.distortion_after:.3f}"
    )
    return 0


def _cmd_bench_coding(args: argparse.Namespace) -> int:
    from . import coding

    if args.source != "dsbs":
        print(f"unknown source {args.source!r}", file=sys.stderr)
        return 1
    try:
        joint = coding.dsbs_histogram(args.p)
        code = coding.BinningCode(
            rate=args.rate, block_len=args.block, seed=args.seed
        )
        rng = np.random.default_rng(args.seed)
        errors = 0
        for _ in range(args.trials):
            x = rng.integers(0, 2, args.block)
            noise = rng.random(args.block) < args.p
            y = x ^ noise
            dec = coding.wz_decode(coding.wz_encode(x, code), y, code, joint)
            if dec is None or not np.array_equal(dec, x):
                errors += 1
        rate_report = coding.empirical_entropies(joint)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        new_file = not out.exists()
        with open(out, "a", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            if new_file:
                w.writerow(
                    ["source", "p", "rate", "block", "trials",
                     "block_error_rate", "h_x_given_y"]
                )
            w.writerow(
                [args.source, args.p, args.rate, args.block, args.trials,
                 errors / args.trials, f"{rate_report.h_x_given_y:.6f}"]
            )
        print(
            f"block error rate {errors / args.trials:.4f} over "
            f"{args.trials} trials (H(X|Y) = {rate_report.h_x_given_y:.4f})"
        )
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def _cmd_report(args: argparse.Namespace) -> int:
    from . import harness

    rows = []
    try:
        for d in args.inputs:
            path = Path(d) / "metrics.jsonl"
            if not path.exists():
                print(f"missing metrics: {path}", file=sys.stderr)
                return 1
            rows.append(_metrics_from_stream(path))
        harness.emit_report(rows, args.out)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out} ({len(rows)} runs)")
    return 0


def _metrics_from_stream(path: Path):
    from .harness import RunMetrics

    run = {}
    exchange = {}
    summary = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            if row["event"] == "run":
                run = row
            elif row["event"] == "exchange":
                exchange = row
            elif row["event"] == "summary":
                summary = row
    return RunMetrics(
        config_hash=run.get("config_hash", ""),
        seed=run.get("seed", 0),
        mode=run.get("mode", ""),
        bytes_by_kind=exchange.get("bytes_by_kind", {}),
        exchange_bytes=exchange.get("total_bytes", 0),
        psnr_before=summary.get("psnr_before", 0.0),
        psnr_after=summary.get("psnr_after", 0.0),
        distortion_before=summary.get("distortion_before", 1.0),
        distortion_after=summary.get("distortion_after", 1.0),
        utility=summary.get("utility", 0.0),
    )


def _cmd_validate_config(args: argparse.Namespace) -> int:
    from . import harness

    try:
        harness.load_config(args.config)
    except harness.ConfigError as exc:
        for v in exc.violations:
            print(f"violation: {v}")
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    print("config valid")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmsynth",
        description="deterministic multi-drone cooperative-perception simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--config", default=None, help="scenario config JSON")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument(
        "--mode",
        choices=["config", "auto", "raw", "latent", "semantic", "detections"],
        default="config",
        help="override the config's cooperation mode",
    )
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=_cmd_run)

    p_bench = sub.add_parser("bench-coding", help="benchmark the binned codec")
    p_bench.add_argument("--source", default="dsbs")
    p_bench.add_argument("--p", type=float, default=0.11)
    p_bench.add_argument("--rate", type=float, default=0.75)
    p_bench.add_argument("--block", type=int, default=16)
    p_bench.add_argument("--trials", type=int, default=10_000)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", required=True, help="CSV output path")
    p_bench.set_defaults(func=_cmd_bench_coding)

    p_rep = sub.add_parser("report", help="merge run metrics into a CSV")
    p_rep.add_argument(
        "--in", dest="inputs", nargs="+", required=True,
        help="run output directories",
    )
    p_rep.add_argument("--out", required=True, help="CSV output path")
    p_rep.set_defaults(func=_cmd_report)

    p_val = sub.add_parser("validate-config", help="validate a scenario config")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(func=_cmd_validate_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
