from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .bench import benchmark
from .errors import ConfigurationError, FrameProcessingError, StrataError
from .export import export_json, export_ply, load_ground_truth, load_predictions
from .metrics import evaluate_ap
from .models import DEFAULT_PROFILE, RunConfig
from .orchestrator import StreamingOrchestrator
from .sequence import read_sequence
from .synthetic import default_intrinsics, synthesize_sequence

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _parse_override(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=DEFAULT_PROFILE, help="JSON run profile")
    parser.add_argument("--set", dest="overrides", action="append", type=_parse_override, default=[], metavar="KEY=VALUE")


def _load_config(args: argparse.Namespace, **shortcuts: Any) -> RunConfig:
    """The profile, then ``--set`` pairs, then dedicated flags that were given."""
    overrides = dict(args.overrides)
    overrides.update({key: value for key, value in shortcuts.items() if value is not None})
    return RunConfig.from_file(args.config, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strata", description="Online 3D instance mapping from posed RGB-D sequences.")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="stream a sequence directory into an instance map")
    run.add_argument("sequence", type=Path)
    _add_config_options(run)
    run.add_argument("--weights", type=Path, help="weight container; absent sections fall back to weight-free paths")
    run.add_argument("--out", type=Path, default=Path("map.json"))
    run.add_argument("--ply", type=Path, help="also write a colored point cloud")
    run.add_argument("--ascii", action="store_true", help="write the PLY as ascii")
    run.add_argument("--timings", type=Path, help="per-frame timing log (JSON)")

    ev = commands.add_parser("eval", help="class-agnostic AP of a map export against ground truth")
    ev.add_argument("--pred", type=Path, required=True)
    ev.add_argument("--gt", type=Path, required=True, help="sequence directory with meta files, or a JSON file")
    ev.add_argument("--empty-ap", type=float, help="score for an empty ground truth; overrides the profile")
    _add_config_options(ev)
    ev.add_argument("--out", type=Path)

    bench = commands.add_parser("bench", help="merge-step latency on a synthetic workload")
    bench.add_argument("--prev", type=int, default=200)
    bench.add_argument("--cur", type=int, default=50)
    bench.add_argument("--channels", type=int, default=32)
    bench.add_argument("--repeats", type=int, default=10)
    bench.add_argument("--decoder-points", type=int, default=0, help="also time the decoder over this many points")
    bench.add_argument("--out", type=Path)

    synth = commands.add_parser("synth", help="generate and render a synthetic sequence")
    synth.add_argument("out", type=Path)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--objects", type=int, default=5)
    synth.add_argument("--frames", type=int, default=8)
    synth.add_argument("--noise", type=float, default=0.0)
    synth.add_argument("--channels", type=int)
    synth.add_argument("--num-classes", type=int)
    synth.add_argument("--width", type=int, default=160)
    synth.add_argument("--height", type=int, default=120)
    synth.add_argument("--depth-scale", type=float)
    _add_config_options(synth)

    serve = commands.add_parser("serve", help="start the HTTP run service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _run(args: argparse.Namespace) -> int:
    config = _load_config(args, weights_path=str(args.weights) if args.weights is not None else None)
    orchestrator = StreamingOrchestrator(config)
    result = orchestrator.run(read_sequence(args.sequence))
    export_json(result.export, args.out)
    if args.ply is not None:
        export_ply(result.instance_map, result.positions, args.ply, "ascii" if args.ascii else "binary")
    if args.timings is not None:
        args.timings.write_text(json.dumps([t.model_dump() for t in result.timings], indent=2) + "\n")
    print(f"{result.instance_map.frames} frames, {len(result.instance_map.records)} instances -> {args.out}")
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    config = _load_config(args, empty_ap=args.empty_ap)
    result = evaluate_ap(load_predictions(args.pred), load_ground_truth(args.gt), config.empty_ap)
    if args.out is not None:
        export_json(result, args.out)
    print(json.dumps({"ap": result.ap, "ap50": result.ap50, "ap25": result.ap25}))
    return EXIT_OK


def _bench(args: argparse.Namespace) -> int:
    if min(args.prev, args.cur, args.channels, args.repeats) < 0 or args.channels == 0:
        raise ConfigurationError("bench sizes must be non-negative and channels positive")
    report = benchmark(args.prev, args.cur, args.channels, args.repeats, decoder_points=args.decoder_points)
    if args.out is not None:
        export_json(report, args.out)
    line = {
        "similarity_ms": report.similarity_ms,
        "matching_ms": report.matching_ms,
        "updating_ms": report.updating_ms,
        "merging_ms": report.merging_ms,
    }
    if report.decoder_ms is not None:
        line["decoder_ms"] = report.decoder_ms
    print(json.dumps(line))
    return EXIT_OK


def _synth(args: argparse.Namespace) -> int:
    config = _load_config(args, channels=args.channels, num_classes=args.num_classes, depth_scale=args.depth_scale)
    try:
        intrinsics = default_intrinsics(args.width, args.height)
    except ValueError as exc:
        raise ConfigurationError(f"invalid image size: {exc}") from exc
    synthesize_sequence(
        args.out,
        seed=args.seed,
        n_objects=args.objects,
        n_frames=args.frames,
        noise_level=args.noise,
        channels=config.channels,
        num_classes=config.num_classes,
        intrinsics=intrinsics,
        depth_scale=config.depth_scale,
    )
    print(f"wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("app.main:create_app", factory=True, host=args.host, port=args.port)
    return EXIT_OK


HANDLERS = {"run": _run, "eval": _eval, "bench": _bench, "synth": _synth, "serve": _serve}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.getenv("STRATA_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FrameProcessingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, ConfigurationError) else EXIT_RUNTIME
    except StrataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
