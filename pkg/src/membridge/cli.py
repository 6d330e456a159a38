"""Command-line driver for the library.

Subcommands: generate, segment, stream, train, eval, needle, bench.
Exit codes: 0 success, 1 domain error, 2 usage/IO error. Every run
prints its resolved configuration and seed (JSON, stderr) so results can
be reproduced from the log alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from typing import List, Optional

import numpy as np

from .streams import (EmbeddingStream, SceneSpec, generate_scene_stream,
                      read_estream, read_jsonl, write_estream, write_jsonl)
from .tiling import (SegmentationConfig, StreamingBoundaryDetector,
                     StreamingConfig, segment)
from .bridge import BridgeConfig, load_checkpoint, save_checkpoint
from .probe import (TaskSpec, TrainConfig, VARIANTS, evaluate,
                    make_needle_dataset, train_probe)
from .needle import GridConfig, run_grid
from .bench import measure_memory, measure_time
from .bridge import BridgeParams


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x]


def _apply_config_file(args: argparse.Namespace,
                       argv: Optional[List[str]]) -> None:
    """key=value overrides from --config; explicitly passed flags win."""
    if not getattr(args, "config", None):
        return
    tokens = sys.argv[1:] if argv is None else argv
    explicit = {tok.lstrip("-").split("=")[0].replace("-", "_")
                for tok in tokens if tok.startswith("--")}
    with open(args.config) as fp:
        for line in fp:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not hasattr(args, key):
                raise ValueError(f"unknown config key: {key}")
            if key in explicit:
                continue
            current = getattr(args, key)
            cast = type(current) if current is not None else str
            setattr(args, key, cast(value.strip()) if cast is not bool
                    else value.strip().lower() in ("1", "true", "yes"))


def _read_stream(path: str) -> EmbeddingStream:
    if path.endswith(".jsonl"):
        with open(path) as fp:
            return read_jsonl(fp)
    with open(path, "rb") as fp:
        return read_estream(fp.read())


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w") as fp:
            fp.write(text)
    else:
        sys.stdout.write(text)


def _print_resolved(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps({"resolved_config": resolved}, default=str), file=sys.stderr)


# -- subcommand implementations ------------------------------------------------


def _cmd_generate(args) -> int:
    lo, _, hi = args.frames_per_scene.partition(":")
    spec = SceneSpec(scene_count=args.scenes,
                     frames_per_scene=(int(lo), int(hi or lo)),
                     dim=args.dim, noise_sigma=args.noise_sigma,
                     min_center_separation=args.separation, seed=args.seed)
    stream = generate_scene_stream(spec)
    if args.format == "jsonl":
        with open(args.out, "w") as fp:
            write_jsonl(stream, fp)
    else:
        with open(args.out, "wb") as fp:
            write_estream(stream, fp)
    print(json.dumps({"frames": stream.n, "dim": stream.dim,
                      "boundaries": stream.boundaries or []}))
    return 0


def _cmd_segment(args) -> int:
    stream = _read_stream(args.input)
    if args.fixed_count:
        config = SegmentationConfig(mode="fixed_count", fixed_count=args.fixed_count,
                                    min_segment_len=args.min_segment_len)
    else:
        config = SegmentationConfig(mode="threshold", alpha=args.alpha,
                                    min_segment_len=args.min_segment_len)
    result = segment(stream, config)
    payload = {
        "cuts": result.cuts,
        "depths": [] if result.depth is None else [float(x) for x in result.depth.depths],
        "mu": None if result.depth is None else result.depth.mu,
        "sigma": None if result.depth is None else result.depth.sigma,
        "threshold": result.threshold,
    }
    _emit(json.dumps(payload) + "\n", args.out)
    return 0


def _cmd_stream(args) -> int:
    detector = StreamingBoundaryDetector(StreamingConfig(
        alpha=args.alpha, min_segment_len=args.min_segment_len, warmup=args.warmup))
    header_seen = False
    for lineno, line in enumerate(sys.stdin, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            print(f"malformed line {lineno}", file=sys.stderr)
            return 2
        if not header_seen:
            if "dim" not in obj:
                print(f"malformed line {lineno}: missing header", file=sys.stderr)
                return 2
            header_seen = True
            continue
        if "v" not in obj:
            print(f"malformed line {lineno}", file=sys.stderr)
            return 2
        event = detector.push(np.asarray(obj["v"], dtype=np.float64))
        if event is not None:
            sys.stdout.write(json.dumps({"boundary_at": event.index,
                                         "depth": event.depth}) + "\n")
            sys.stdout.flush()
    return 0


def _cmd_train(args) -> int:
    task = TaskSpec(n_classes=args.classes, dim=args.dim)
    train = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                        epochs=args.epochs, seed=args.seed,
                        train_frames=args.frames, train_segments=args.segments,
                        train_streams=args.train_streams)
    bridge = BridgeConfig(hidden_size=args.dim, memory_tokens=args.memory_tokens,
                          heads=args.heads)
    params, losses = train_probe(args.variant, train, task, bridge=bridge)
    with open(args.out, "wb") as fp:
        save_checkpoint(params, fp, meta={"variant": args.variant,
                                          "task": asdict(task),
                                          "train": asdict(train)})
    print(json.dumps({"steps": len(losses), "first_loss": losses[0],
                      "final_loss": losses[-1]}))
    return 0


def _cmd_eval(args) -> int:
    with open(args.ckpt, "rb") as fp:
        params, meta = load_checkpoint(fp)
    variant = args.variant or meta.get("variant", "full")
    task = TaskSpec(**meta["task"])
    dataset = make_needle_dataset(args.samples, args.length, task, args.seed)
    accuracy, mean_score = evaluate(params, variant, dataset,
                                    seg_mode=args.seg_mode)
    print(json.dumps({"variant": variant, "length": args.length,
                      "accuracy": accuracy, "mean_score": mean_score}))
    return 0


def _cmd_needle(args) -> int:
    with open(args.ckpt, "rb") as fp:
        params, meta = load_checkpoint(fp)
    variant = args.variant or meta.get("variant", "full")
    task = TaskSpec(**meta["task"])
    grid = GridConfig(length_levels=args.length_levels,
                      depth_levels=args.depth_levels,
                      max_length=args.max_length, min_length=args.min_length,
                      seeds_per_cell=args.seeds_per_cell,
                      needle_duration=args.duration)
    report = run_grid(params, variant, grid, task, seed=args.seed)
    if args.format == "json":
        _emit(json.dumps({"lengths": report.lengths, "depths": report.depths,
                          "scores": report.scores.tolist(),
                          "overall_mean": report.overall_mean}) + "\n", args.out)
    else:
        _emit(report.to_csv(), args.out)
    print(json.dumps({"overall_mean": report.overall_mean}), file=sys.stderr)
    return 0


def _cmd_bench(args) -> int:
    config = BridgeConfig(hidden_size=args.dim, memory_tokens=args.memory_tokens,
                          heads=args.heads)
    params = BridgeParams.init(config, seed=args.seed, probe_classes=4)
    if args.mode == "memory":
        report = measure_memory(params, _int_list(args.lengths),
                                segment_size=args.segment_size, seed=args.seed)
    else:
        report = measure_time(params, _int_list(args.segment_counts),
                              segment_size=args.segment_size,
                              repetitions=args.repetitions, seed=args.seed)
    _emit(report.to_json() + "\n" if args.format == "json" else report.to_csv(),
          args.out)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="membridge",
        description="Segment embedding streams, train the recurrent memory "
                    "pipeline, and run needle/scaling evaluations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key=value config file; flags win")
        p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("generate", help="write a synthetic scene stream")
    common(p)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--frames-per-scene", default="4:8")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--separation", type=float, default=0.2)
    p.add_argument("--format", choices=("estream", "jsonl"), default="estream")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("segment", help="segment a stream file")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--fixed-count", type=int, default=0)
    p.add_argument("--min-segment-len", type=int, default=1)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("stream", help="streaming boundary detection over "
                                      "JSON-lines on stdin")
    common(p)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--min-segment-len", type=int, default=2)
    p.add_argument("--warmup", type=int, default=4)
    p.set_defaults(func=_cmd_stream)

    p = sub.add_parser("train", help="train a variant on the needle task")
    common(p)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--memory-tokens", type=int, default=8)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--segments", type=int, default=4)
    p.add_argument("--train-streams", type=int, default=200)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh data")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seg-mode", choices=("dynamic", "static"), default="dynamic")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("needle", help="depth x length needle grid")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--length-levels", type=int, default=40)
    p.add_argument("--depth-levels", type=int, default=12)
    p.add_argument("--max-length", type=int, default=320)
    p.add_argument("--min-length", type=int, default=16)
    p.add_argument("--seeds-per-cell", type=int, default=5)
    p.add_argument("--duration", type=int, default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=_cmd_needle)

    p = sub.add_parser("bench", help="memory/time scaling measurements")
    common(p)
    p.add_argument("--mode", choices=("memory", "time"), default="memory")
    p.add_argument("--lengths", default="32,64,128,256,512")
    p.add_argument("--segment-counts", default="4,8,16,32,64")
    p.add_argument("--segment-size", type=int, default=16)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--memory-tokens", type=int, default=8)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.set_defaults(func=_cmd_bench)

    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, argv)
        _print_resolved(args)
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"not found: {exc.filename}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
