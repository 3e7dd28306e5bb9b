"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flag, missing or corrupt
input), 2 runtime failure. Every run writes ``report.json`` and
``log.txt`` into ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import evaluate as ev
from . import pipeline as pl
from .errors import PuditError
from .gradcheck import format_table, run_suite
from .train import TrainConfig

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("gen-data", "pretrain", "train-edit", "sample", "eval", "gradcheck", "ablate")
log = logging.getLogger("pudit")

# Errors that mean "the inputs are wrong" rather than "the run broke".
_VALIDATION = (ValueError, FileNotFoundError, KeyError)
_RUNTIME_SUBCLASSES = (FloatingPointError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config overrides")
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("phase", "checkpoint", "seed"):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "frame_schedule":
            g.add_argument(flag, type=lambda s: tuple(int(v) for v in s.split(",")), default=None, metavar="1,2,4,8")
        elif f.name == "max_steps":
            g.add_argument(flag, type=int, default=None)
        else:
            g.add_argument(flag, type=type(f.default), default=None)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with config fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/latest", help="output directory (report.json, log.txt, artifacts)")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-pairs", type=int, default=50, help="held-out pairs to evaluate")
    p.add_argument("--n-temporal", type=int, default=16, help="static scenes for the multi-frame check")
    p.add_argument("--frames", default="2,4,8", help="frame counts for the multi-frame check ('' to skip)")
    p.add_argument("--sampler-steps", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pudit", description="Predict-update video editing adapter, desk-scale toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--kind", default="pairs", choices=["pairs", "heldout", "clips", "heldout-clips"])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--frames", type=int, default=8, help="frames per clip")

    p = sub.add_parser("pretrain", help="phase 1: train the backbone on clips")
    _common(p)
    p.add_argument("--data", help="clip dataset dir (generated from --seed when omitted)")
    p.add_argument("--heldout", help="held-out clip dataset dir")
    p.add_argument("--n-clips", type=int, default=1000)
    p.add_argument("--resume", help="phase-1 checkpoint to continue from")
    _add_train_overrides(p)

    p = sub.add_parser("train-edit", help="phase 2: train adapters on edit pairs")
    _common(p)
    p.add_argument("--backbone", help="phase-1 checkpoint")
    p.add_argument("--data", help="pair dataset dir (generated from --seed when omitted)")
    p.add_argument("--n-pairs-train", type=int, default=2000)
    p.add_argument("--resume", help="phase-2 checkpoint to continue from")
    _add_train_overrides(p)

    p = sub.add_parser("sample", help="edit held-out sources and dump PPM images")
    _common(p)
    p.add_argument("--checkpoint", help="phase-2 checkpoint")
    p.add_argument("--data", help="pair dataset dir (held-out pairs generated from --seed when omitted)")
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--sampler-steps", type=int, default=32)

    p = sub.add_parser("eval", help="edit fidelity, preservation and multi-frame consistency")
    _common(p)
    p.add_argument("--checkpoint", help="phase-2 checkpoint")
    p.add_argument("--data", help="held-out pair dataset dir (generated from --seed when omitted)")
    p.add_argument("--csv", action="store_true", help="also write per_task.csv")
    p.add_argument("--ppm", action="store_true", help="also write an image grid")
    _eval_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--skip-end-to-end", action="store_true")

    p = sub.add_parser("ablate", help="train and evaluate all four adapter modes")
    _common(p)
    p.add_argument("--backbone", help="phase-1 checkpoint")
    p.add_argument("--data", help="pair dataset dir (generated from --seed when omitted)")
    p.add_argument("--n-pairs-train", type=int, default=2000)
    p.add_argument("--modes", default="Full,NoTextGate,NoUpdate,NaiveParallel2D")
    _eval_flags(p)
    _add_train_overrides(p)
    return parser


def _train_config(args, phase: str) -> TrainConfig:
    base = TrainConfig.pretrain if phase == "pretrain" else TrainConfig.edit
    fields = {}
    if args.config:
        fields.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name not in ("phase", "checkpoint", "seed"):
            fields[f.name] = v
    fields["seed"] = args.seed
    fields.pop("phase", None)
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(fields) - names
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return base(**fields)


def _settings(args) -> pl.EvalSettings:
    frames = tuple(int(f) for f in args.frames.split(",") if f.strip())
    return pl.EvalSettings(n_pairs=args.n_pairs, n_temporal=args.n_temporal, frames=frames,
                           sampler_steps=args.sampler_steps, seed=args.seed)


def _require(path, flag: str, what: str) -> str:
    if not path:
        raise ValueError(f"{flag} is required: pass the {what}")
    if not Path(path).exists():
        raise FileNotFoundError(f"{flag} {path}: no such file")
    return str(path)


def _dispatch(args) -> dict:
    out = Path(args.out)
    cmd = args.command
    if cmd == "gen-data":
        return pl.run_gen_data(out, args.kind, args.n, args.seed, args.frames)
    if cmd == "pretrain":
        cfg = _train_config(args, "pretrain")
        clips, _ = pl.load_or_generate(args.data, "clips", args.n_clips, args.seed)
        held, _ = pl.load_or_generate(args.heldout, "heldout-clips", 64, args.seed)
        return pl.run_pretrain(out, cfg, clips, held, resume=args.resume)
    if cmd == "train-edit":
        cfg = _train_config(args, "edit")
        if not args.resume:
            _require(args.backbone, "--backbone", "phase-1 checkpoint written by `pudit pretrain`")
        pairs, _ = pl.load_or_generate(args.data, "pairs", args.n_pairs_train, args.seed)
        return pl.run_train_edit(out, cfg, pairs, args.backbone, resume=args.resume)
    if cmd == "sample":
        ckpt = _require(args.checkpoint, "--checkpoint", "phase-2 checkpoint written by `pudit train-edit`")
        pairs, _ = pl.load_or_generate(args.data, "heldout", args.limit, args.seed)
        return pl.run_sample(out, ckpt, pairs, args.seed, args.frames, args.sampler_steps, args.limit)
    if cmd == "eval":
        ckpt = _require(args.checkpoint, "--checkpoint", "phase-2 checkpoint written by `pudit train-edit`")
        pairs, digest = pl.load_or_generate(args.data, "heldout", args.n_pairs, args.seed)
        return pl.run_eval(out, ckpt, pairs, _settings(args), digest, csv=args.csv, ppm=args.ppm)
    if cmd == "gradcheck":
        results = run_suite(args.seed, end_to_end=not args.skip_end_to_end)
        table = format_table(results)
        print(table)
        log.info("\n%s", table)
        metrics = {"checks": [{"name": r.name, "rel_error": r.rel_error, "tol": r.tol, "passed": r.passed,
                               "probes": r.probes} for r in results],
                   "all_passed": all(r.passed for r in results)}
        report = ev.build_report("gradcheck", {"seed": args.seed}, None, metrics, seed=args.seed)
        if not metrics["all_passed"]:
            report["failed"] = True
        return report
    if cmd == "ablate":
        backbone = _require(args.backbone, "--backbone", "phase-1 checkpoint written by `pudit pretrain`")
        cfg = _train_config(args, "edit")
        pairs, _ = pl.load_or_generate(args.data, "pairs", args.n_pairs_train, args.seed)
        held, _ = pl.load_or_generate(None, "heldout", args.n_pairs, args.seed)
        return pl.run_ablation(out, backbone, cfg, pairs, held, _settings(args), args.modes.split(","))
    raise UsageError(f"unknown subcommand {cmd!r}")


def _setup_logging(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "log.txt", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("pudit: a subcommand is required", file=sys.stderr)
        return EXIT_VALIDATION

    out = Path(args.out)
    handler = _setup_logging(out)
    started = time.perf_counter()
    code = EXIT_OK
    try:
        report = _dispatch(args)
        if report.get("failed"):
            code = EXIT_RUNTIME
    except UsageError as exc:
        print(exc, file=sys.stderr)
        report, code = {"command": args.command, "error": str(exc)}, EXIT_VALIDATION
    except PuditError as exc:
        code = EXIT_RUNTIME if isinstance(exc, _RUNTIME_SUBCLASSES) else EXIT_VALIDATION
        report = {"command": args.command, "error": f"{type(exc).__name__}: {exc}"}
    except _VALIDATION as exc:
        code, report = EXIT_VALIDATION, {"command": args.command, "error": f"{type(exc).__name__}: {exc}"}
    except Exception as exc:  # noqa: BLE001 - the CLI must map every failure to an exit code
        log.exception("run failed")
        code, report = EXIT_RUNTIME, {"command": args.command, "error": f"{type(exc).__name__}: {exc}"}
    if code != EXIT_OK and "error" in report:
        print(f"pudit {args.command}: {report['error']}", file=sys.stderr)
        log.error(report["error"])
    report["exit_code"] = code
    log.info("%s finished with exit code %d in %.1fs", args.command, code, time.perf_counter() - started)
    ev.write_report(out / "report.json", report)
    logging.getLogger().removeHandler(handler)
    handler.close()
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
