"""Command line entry point: run, sweep, score, flow2frame."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import flow2frame as f2f
from .packets import read_trace
from .qoe import breakdown_row, composite, qoe_inputs, records_from_trace_rows, render_video, write_breakdown
from .ran import ConfigError
from .scenarios import ScenarioConfig, load_preset, run, sweep


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="scenario JSON file")
    src.add_argument("--preset", type=int, choices=range(1, 6), help="built-in scenario 1..5")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, help="seconds")
    p.add_argument("--baseline", help="DChannelStyle, TcRanStyle:<kbps>, Vanilla5G:<kbps> or QoeAware")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--out", default="out", help="output directory")


def _scenario(args) -> ScenarioConfig:
    cfg = load_preset(args.preset) if args.preset else ScenarioConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.baseline is not None:
        overrides["baseline"] = args.baseline
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.beta is not None:
        overrides["beta"] = args.beta
    return cfg.variant(**overrides) if overrides else cfg


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_run(args) -> int:
    cfg = _scenario(args)
    report = run(cfg, args.out)
    lat = report.solve_latency()
    print(f"{report.name} [{report.label}] QoE sum {report.qoe_sum:.2f}  background goodput {report.goodput_sum / 1e6:.3f} Mbit/s")
    for q in report.qoe.values():
        print(
            f"  {q.flow}: QoE {q.score.total:.2f} (audio {q.score.audio:.2f}, video {q.score.video:.2f}, "
            f"fps {q.score.fps:.2f}, res {q.score.resolution:.2f})"
        )
    print(f"  congested slots {100 * report.congested_fraction:.1f}%  solver p99 {lat['p99_ms']:.3f} ms")
    return 0


def cmd_sweep(args) -> int:
    cfg = _scenario(args)
    grid = []
    if args.grid:
        grid = json.loads(Path(args.grid).read_text()) if Path(args.grid).exists() else json.loads(args.grid)
    else:
        for b in _floats(args.betas or ""):
            for a in _floats(args.alphas or "") or [None]:
                point = {"beta": b}
                if a is not None:
                    point["alpha"] = a
                grid.append(point)
        for name in (args.baselines or "").split(","):
            if name.strip():
                grid.append({"baseline": name.strip()})
    result = sweep(cfg, grid, workers=args.workers)
    result.write(args.out)
    for row in result.rows:
        print(",".join(str(x) for x in row))
    for point, err in result.errors:
        print(f"error at {point}: {err}", file=sys.stderr)
    return 0


def cmd_score(args) -> int:
    rows = read_trace(args.trace)
    flows = sorted({r["flow"] for r in rows if r["kind"] in ("Audio", "Base") and (not args.flow or r["flow"] == args.flow)})
    out = []
    for flow in flows:
        sample = next(r for r in rows if r["flow"] == flow)
        inputs = qoe_inputs(records_from_trace_rows(rows, flow), args.duration * 1000.0)
        score = composite(inputs)
        out.append(breakdown_row(flow, int(sample["ue"]), sample["direction"], inputs, score))
        print(f"{flow}: {score.total:.2f}")
    if args.out:
        write_breakdown(args.out, out)
    return 0


def cmd_flow2frame(args) -> int:
    rows = read_trace(args.trace)
    with open(args.frames, newline="") as fh:
        frame_rows = list(csv.DictReader(fh))
    rendered = {f.frame_id for f in render_video(records_from_trace_rows(rows, args.flow))}
    trace = f2f.frame_trace_from_logs(frame_rows, rows, args.flow, rendered)
    result = f2f.align(trace.alignment_input)
    f2f.write_mapping(args.out, trace, result)
    agree = f2f.mapping_agreement(result, trace.true_mapping)
    fp = result.false_positives_by_delta[result.best_delta_ms]
    print(f"delta {result.best_delta_ms} ms, accuracy {result.accuracy:.4f}, false positives {fp}, agreement {agree:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subflowsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario and write CSV outputs")
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid and write frontier.csv")
    _add_scenario_flags(p)
    p.add_argument("--betas", help="comma separated beta values")
    p.add_argument("--alphas", help="comma separated alpha values")
    p.add_argument("--baselines", help="comma separated baseline modes to add")
    p.add_argument("--grid", help="JSON list of override objects, inline or as a file")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score", help="QoE breakdown from a packet trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--duration", type=float, required=True, help="session length in seconds")
    p.add_argument("--flow")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("flow2frame", help="align RTP timestamps with camera frames")
    p.add_argument("--trace", required=True)
    p.add_argument("--frames", required=True, help="frames.csv written by run")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", default="mapping.csv")
    p.set_defaults(func=cmd_flow2frame)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
