"""Command-line entry point: simulate, train, eval, infer, inspect.

JSON goes to stdout and logs to stderr. Exit codes: 0 success, 1 usage error,
2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from .events import EventParseError, EventValidationError, ProtocolError, WindowSpec, count_events, load_sequence, slice_windows, window_bounds

log = logging.getLogger("seen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
WINDOW_GRAMMAR = "E<x>-S<y> with integers x >= 1 and y >= 0, e.g. E4-S3"
_WINDOW_RE = re.compile(r"E(\d+)-S(\d+)")


class UsageError(Exception):
    pass


def parse_window_spec(text: str) -> WindowSpec:
    m = _WINDOW_RE.fullmatch(text.strip())
    if not m:
        raise UsageError(f"bad window spec {text!r}; expected {WINDOW_GRAMMAR}")
    x, y = int(m.group(1)), int(m.group(2))
    if x < 1:
        raise UsageError(f"bad window spec {text!r}: x must be >= 1 ({WINDOW_GRAMMAR})")
    return WindowSpec(x, y)


def _window_arg(text: str) -> WindowSpec:
    try:
        return parse_window_spec(text)
    except UsageError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _resolution(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError("resolution must look like 64x64")
    return int(m.group(1)), int(m.group(2))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--window", type=_window_arg, default=WindowSpec(4, 0), help=WINDOW_GRAMMAR)
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--config", type=Path, help="JSON with model/optimizer fields (all optional)")
    shared.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="evaluation worker threads")

    p = _Parser(prog="seen", description="Event-based eye emotion recognition toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[shared], help="generate a synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--per-class", type=int, default=10)
    s.add_argument("--train-fraction", type=float, default=0.7)
    s.add_argument("--resolution", type=_resolution, default=(64, 64))
    s.add_argument("--duration", type=float, default=1.2, help="seconds per sequence")
    s.add_argument("--contrast", type=float, default=0.15)
    s.add_argument("--event-format", choices=("evt1", "csv"), default="evt1")
    s.add_argument("--force", action="store_true")

    t = sub.add_parser("train", parents=[shared], help="train a model from a manifest")
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--val-trials", type=int, default=20)
    t.add_argument("--val-every", type=int, default=1)
    t.add_argument("--no-figures", action="store_true")

    e = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--report", type=Path, help="also write the report JSON here (figure alongside)")
    e.add_argument("--no-figures", action="store_true")

    i = sub.add_parser("infer", parents=[shared], help="classify one window of one sequence")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--sequence", type=Path, required=True)
    i.add_argument("--start", default="0", help='start in microseconds, or "random:SEED"')

    n = sub.add_parser("inspect", parents=[shared], help="summarise the windows of one sequence")
    n.add_argument("--sequence", type=Path, required=True)
    n.add_argument("--start", default="0", help='start in microseconds, or "random:SEED"')
    return p


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _resolve_start(text: str, duration: int, window: WindowSpec) -> int:
    from .evaluation import random_start

    if text.startswith("random:"):
        try:
            seed = int(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad start {text!r}") from None
        return random_start(duration, window, np.random.default_rng(seed))
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"bad start {text!r}; give microseconds or random:SEED") from None


def cmd_simulate(args) -> dict:
    from .synth import DatasetSpec, SimulatorConfig, generate_dataset

    w, h = args.resolution
    sim = SimulatorConfig(contrast=args.contrast, width=w, height=h, duration=args.duration)
    spec = DatasetSpec(per_class=args.per_class, train_fraction=args.train_fraction, seed=args.seed, sim=sim)
    manifest = generate_dataset(args.out, spec, force=args.force, event_format=args.event_format)
    return {"manifest": str(manifest), "sequences": 7 * args.per_class}


def cmd_train(args) -> dict:
    from dataclasses import replace

    from .training import load_config, load_split, train

    model_cfg, opt_cfg = load_config(args.config)
    if args.epochs is not None:
        opt_cfg = replace(opt_cfg, epochs=args.epochs)
    result = train(load_split(args.manifest, "train"), model_cfg, opt_cfg, args.window, seed=args.seed,
                   val_set=load_split(args.manifest, "test"), out_dir=args.out, val_trials=args.val_trials,
                   val_every=args.val_every, jobs=args.jobs, figures=not args.no_figures)
    last = result.history[-1]
    return {"out": str(args.out), "epochs": len(result.history), "train_acc": last.train_acc,
            "train_loss": last.train_loss, "best_val_war": result.best_war, "excluded": result.excluded}


def cmd_eval(args) -> dict:
    from .evaluation import EvalProtocol, evaluate_sequences
    from .model import load_checkpoint
    from .training import load_split

    model = load_checkpoint(args.checkpoint)
    report = evaluate_sequences(model, load_split(args.manifest, args.split),
                                EvalProtocol(args.window, trials=args.trials, seed=args.seed), jobs=args.jobs)
    doc = report.to_dict()
    if args.report is not None:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(report.to_json())
        if not args.no_figures:
            from .plotting import plot_confusion

            fig = plot_confusion(report.confusion.counts, args.report.with_suffix(".confusion.png"),
                                 title=f"{args.window}: WAR {report.war:.3f}, UAR {report.uar:.3f}")
            log.info("wrote %s", fig)
    return doc


def cmd_infer(args) -> dict:
    from .evaluation import prepare_batch
    from .model import load_checkpoint

    model = load_checkpoint(args.checkpoint).eval()
    seq = load_sequence(args.sequence)
    start = _resolve_start(args.start, seq.duration, args.window)
    i1, in_, frames, _ = prepare_batch([seq], [start], args.window)
    scores = model.forward_sequence(i1, in_, frames)
    r = scores.R.data[0]
    return {"sequence": seq.name, "window": str(args.window), "start_us": start,
            "R": r.tolist(), "label": int(np.argmax(r)), "O_t": [o.data[0].tolist() for o in scores.O_t]}


def cmd_inspect(args) -> dict:
    seq = load_sequence(args.sequence)
    start = _resolve_start(args.start, seq.duration, args.window)
    windows, i1, in_ = slice_windows(seq, start, args.window)
    per_window = []
    for (t0, t1), w in zip(window_bounds(start, args.window), windows):
        c = count_events(w, seq.height, seq.width)
        per_window.append({"t0": t0, "t1": t1, "events": len(w), "positive": int(c[0].sum()),
                           "negative": int(c[1].sum()), "max_count": int(c.max()),
                           "active_pixels": int((c.sum(axis=0) > 0).sum())})
    return {"sequence": seq.name, "window": str(args.window), "start_us": start, "label": seq.label,
            "lighting": seq.lighting, "total_events": len(seq.events), "windows": per_window,
            "i1_timestamp": i1.timestamp, "in_timestamp": in_.timestamp,
            "frame_timestamps": seq.frame_timestamps.tolist()}


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "inspect": cmd_inspect}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SEEN_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE
    try:
        _emit(COMMANDS[args.command](args))
        return EXIT_OK
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (FileNotFoundError, FileExistsError, EventParseError, EventValidationError, ProtocolError,
            json.JSONDecodeError, ValueError, KeyError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
