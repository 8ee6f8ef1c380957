"""``polyloop`` command line.

Machine-readable JSON goes to ``--out``; human-readable tables go to stdout.
Settings resolve as: command-line flag, then ``LOOPER_*`` environment
variable, then the built-in default.

Exit codes: 0 success, 2 parse/validation/usage error, 3 weights error,
4 search or evaluation failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import __version__
from .candidates import GenConfig as SearchGenConfig
from .cost_model import (
    DEFAULT_DIMS,
    DataFormatError,
    DivergenceDetected,
    TrainConfig,
    WeightsError,
    evaluate,
    init_weights,
    load_weights,
    save_weights,
    train,
)
from .datagen import GenConfig, SearchSettings, build_dataset, gen_programs, read_dataset, read_programs, write_programs
from .executor import ABSTRACT, WALLCLOCK, ExecConfig
from .ir import ParseError, ValidationError, load_program
from .pipeline import autoschedule, compare_programs, compare_summary
from .search import EvaluatorFailure

EXIT_OK, EXIT_INPUT, EXIT_WEIGHTS, EXIT_SEARCH = 0, 2, 3, 4

log = logging.getLogger("polyloop")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{name}={raw!r} is not an integer", EXIT_INPUT) from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1), got {text}")
    return v


def _common() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=None, help="random seed (default: LOOPER_SEED or 0)")
    g.add_argument("--threads", type=_positive, default=None,
                   help="upper bound on worker threads and processes (default: LOOPER_THREADS or 4)")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity on stderr (default: WARNING)")
    g.add_argument("--out", default=None, help="path of the machine-readable output file")
    return g


def _search_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--beam", type=_positive, default=3, help="beam width K (default: 3)")
    sp.add_argument("--affine-depth", type=_positive, default=2,
                    help="number of affine transformation levels n (default: 2)")
    sp.add_argument("--exec-mode", choices=[ABSTRACT, WALLCLOCK], default=ABSTRACT,
                    help="interpreter cost mode used for measurements (default: abstract)")
    sp.add_argument("--repetitions", type=_positive, default=5,
                    help="timed runs per measurement in wallclock mode, median taken (default: 5)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="polyloop", description="Polyhedral autoscheduler with a learned cost model.")
    ap.add_argument("--version", action="version", version=f"polyloop {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sp = sub.add_parser("autoschedule", parents=[common], help="search a schedule for one program",
                        description="Run the beam search on one program and report the best schedule.")
    sp.add_argument("--program", required=True, help="program JSON file")
    sp.add_argument("--evaluator", choices=["model", "exec"], default="exec",
                    help="score candidates with the cost model or the interpreter (default: exec)")
    sp.add_argument("--weights", default=None, help="weights file (required with --evaluator model)")
    _search_flags(sp)

    sp = sub.add_parser("datagen", parents=[common], help="generate a labelled dataset",
                        description="Generate random programs and label search-visited schedules.")
    sp.add_argument("--programs", type=_nonneg, default=10, help="number of programs to generate (default: 10)")
    sp.add_argument("--schedules-per-program", type=_positive, default=60,
                    help="target number of labelled schedules per program (default: 60)")
    sp.add_argument("--max-instances", type=_positive, default=16_384,
                    help="cap on statement instances per program (default: 16384)")
    sp.add_argument("--workers", type=_positive, default=1,
                    help="worker processes, capped by --threads (default: 1)")
    sp.add_argument("--programs-out", default=None,
                    help="where to write the generated programs as JSONL (default: OUT with .programs.jsonl)")
    _search_flags(sp)

    sp = sub.add_parser("train", parents=[common], help="train the cost model",
                        description="Train the cost model on a dataset; writes weights and a history CSV.")
    sp.add_argument("--data", required=True, help="dataset JSONL produced by datagen")
    sp.add_argument("--epochs", type=_nonneg, default=200, help="training epochs (default: 200)")
    sp.add_argument("--batch-size", type=_positive, default=128, help="mini-batch size (default: 128)")
    sp.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: 0.001)")
    sp.add_argument("--val-fraction", type=_fraction, default=0.1,
                    help="fraction of programs held out for validation (default: 0.1)")
    sp.add_argument("--hidden", type=_positive, default=DEFAULT_DIMS["hidden"],
                    help=f"recurrent state size (default: {DEFAULT_DIMS['hidden']})")
    sp.add_argument("--embed", type=_positive, default=DEFAULT_DIMS["embed"],
                    help=f"embedding size (default: {DEFAULT_DIMS['embed']})")
    sp.add_argument("--fc", type=_positive, default=DEFAULT_DIMS["fc"],
                    help=f"fully connected layer width (default: {DEFAULT_DIMS['fc']})")
    sp.add_argument("--history", default=None, help="history CSV path (default: OUT with .history.csv)")

    sp = sub.add_parser("eval", parents=[common], help="evaluate the cost model on a dataset",
                        description="Report MAPE, Spearman correlation and mean per-program nDCG.")
    sp.add_argument("--data", required=True, help="dataset JSONL produced by datagen")
    sp.add_argument("--weights", required=True, help="weights file")

    sp = sub.add_parser("compare", parents=[common], help="model-guided versus execution-guided search",
                        description="Compare model-guided and execution-guided search program by program.")
    sp.add_argument("--programs", required=True, help="programs JSONL (from datagen) or a single program JSON")
    sp.add_argument("--weights", required=True, help="weights file")
    sp.add_argument("--include-timing", action="store_true",
                    help="also write search times to the JSON output (makes it run-dependent)")
    _search_flags(sp)
    return ap


# -- helpers -------------------------------------------------------------------

def _settings(args) -> tuple[int, int]:
    seed = args.seed if args.seed is not None else _env_int("LOOPER_SEED", 0)
    threads = args.threads if args.threads is not None else _env_int("LOOPER_THREADS", 4)
    if threads < 1:
        raise CliError("thread count must be positive", EXIT_INPUT)
    return seed, threads


def _exec_cfg(args, seed: int, threads: int) -> ExecConfig:
    reps = args.repetitions
    if args.exec_mode == WALLCLOCK and reps % 2 == 0:
        raise CliError("--repetitions must be odd in wallclock mode", EXIT_INPUT)
    return ExecConfig(mode=args.exec_mode, repetitions=reps, threads=threads, seed=seed)


def _weights(path):
    if path is None:
        raise CliError("--weights is required with --evaluator model", EXIT_WEIGHTS)
    try:
        return load_weights(path)
    except FileNotFoundError:
        raise CliError(f"weights file not found: {path}", EXIT_WEIGHTS) from None
    except (WeightsError, OSError) as e:
        raise CliError(str(e), EXIT_WEIGHTS) from None


def _load_program(path):
    try:
        return load_program(path)
    except FileNotFoundError:
        raise CliError(f"program file not found: {path}", EXIT_INPUT) from None
    except (ParseError, ValidationError) as e:
        raise CliError(f"{path}: {e}", EXIT_INPUT) from None


def _dataset(path):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise CliError(f"dataset not found: {path}", EXIT_INPUT) from None
    except DataFormatError as e:
        raise CliError(str(e), EXIT_INPUT) from None


def _write_json(path, doc) -> None:
    if path is None:
        return
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _derived(out, suffix: str, fallback: str) -> str:
    if out is None:
        return fallback
    root, _ = os.path.splitext(out)
    return root + suffix


# -- subcommands -----------------------------------------------------------------

def cmd_autoschedule(args) -> int:
    seed, threads = _settings(args)
    weights = _weights(args.weights) if args.evaluator == "model" else None
    p = _load_program(args.program)
    cfg = _exec_cfg(args, seed, threads)
    try:
        r = autoschedule(p, evaluator=args.evaluator, weights=weights, beam=args.beam,
                         affine_depth=args.affine_depth, exec_cfg=cfg)
    except EvaluatorFailure as e:
        raise CliError(str(e), EXIT_SEARCH) from None
    _write_json(args.out, r.to_json())
    print(f"program            {p.name}")
    print(f"evaluator          {args.evaluator} (beam {args.beam}, affine depth {args.affine_depth})")
    print(f"best schedule      {json.dumps(r.result.best_schedule.to_json(), sort_keys=True)}")
    if r.predicted is not None:
        print(f"predicted speedup  {r.predicted:.4f}")
    print(f"measured speedup   {r.measured:.4f} ({args.exec_mode})")
    print(f"evaluated          {r.result.stats.get('evaluated')} schedules")
    print(f"search wall time   {r.wall_time_s:.3f} s")
    return EXIT_OK


def cmd_datagen(args) -> int:
    seed, threads = _settings(args)
    if args.out is None:
        raise CliError("datagen needs --out", EXIT_INPUT)
    cfg = GenConfig(program_count=args.programs, seed=seed, max_instances=args.max_instances,
                    schedules_per_program=args.schedules_per_program)
    search = SearchSettings(beam=args.beam, affine_depth=args.affine_depth, gen=SearchGenConfig())
    programs = gen_programs(cfg)
    recs = build_dataset(cfg, args.out, search=search, exec_cfg=_exec_cfg(args, seed, threads),
                         workers=min(args.workers, threads), programs=programs)
    write_programs(args.programs_out or _derived(args.out, ".programs.jsonl", "programs.jsonl"), programs)
    pids = sorted({r.pid for r in recs})
    print(f"programs   {len(programs)} generated, {len(pids)} labelled")
    print(f"datapoints {len(recs)} ({len(recs) / max(len(pids), 1):.1f} per program)")
    print(f"written    {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    seed, _ = _settings(args)
    if args.out is None:
        raise CliError("train needs --out for the weights file", EXIT_INPUT)
    _, recs = _dataset(args.data)
    dims = {"embed": args.embed, "hidden": args.hidden, "fc": args.fc}
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, dims=dims,
                      val_fraction=args.val_fraction, seed=seed)
    try:
        w, hist = train(cfg, [r.triple() for r in recs]) if recs else (init_weights(seed, dims), [])
    except DataFormatError as e:
        raise CliError(str(e), EXIT_INPUT) from None
    except DivergenceDetected as e:
        save_weights(e.last_good, args.out)
        raise CliError(f"{e}; last good weights written to {args.out}", EXIT_SEARCH) from None
    save_weights(w, args.out)
    hist_path = args.history or _derived(args.out, ".history.csv", "history.csv")
    with open(hist_path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["epoch", "train_mape", "val_mape"])
        for h in hist:
            wr.writerow([h["epoch"], f"{h['train_mape']:.6f}", f"{h['val_mape']:.6f}" if "val_mape" in h else ""])
    last = hist[-1] if hist else {}
    print(f"epochs      {len(hist)}")
    if last:
        print(f"train MAPE  {last['train_mape']:.4f}")
        if "val_mape" in last:
            print(f"val MAPE    {last['val_mape']:.4f}")
    print(f"weights     {args.out}")
    print(f"history     {hist_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _settings(args)
    w = _weights(args.weights)
    _, recs = _dataset(args.data)
    if not recs:
        raise CliError("dataset holds no datapoints", EXIT_INPUT)
    m = evaluate(w, [r.triple() for r in recs])
    _write_json(args.out, m)
    print(f"datapoints  {len(recs)}")
    print(f"MAPE        {m['mape']:.4f}")
    print(f"Spearman    {m['spearman']:.4f}")
    print(f"nDCG        {m['ndcg']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    seed, threads = _settings(args)
    w = _weights(args.weights)
    path = args.programs
    try:
        programs = read_programs(path) if path.endswith(".jsonl") else [load_program(path)]
    except FileNotFoundError:
        raise CliError(f"programs file not found: {path}", EXIT_INPUT) from None
    except (ParseError, ValidationError, ValueError) as e:
        raise CliError(f"{path}: {e}", EXIT_INPUT) from None
    try:
        rows = compare_programs(programs, w, beam=args.beam, affine_depth=args.affine_depth,
                                exec_cfg=_exec_cfg(args, seed, threads))
    except EvaluatorFailure as e:
        raise CliError(str(e), EXIT_SEARCH) from None
    summary = compare_summary(rows)
    doc = {"rows": [], "summary": {k: v for k, v in summary.items() if args.include_timing or "time" not in k}}
    for r in rows:
        row = {"program": r.program, "model_speedup": r.model_speedup, "exec_speedup": r.exec_speedup, "ratio": r.ratio}
        if args.include_timing:
            row["search_time_ratio"] = r.time_ratio
        doc["rows"].append(row)
    _write_json(args.out, doc)
    print(f"{'program':<16} {'model':>9} {'exec':>9} {'ratio':>7} {'time x':>8}")
    for r in rows:
        print(f"{r.program:<16} {r.model_speedup:>9.3f} {r.exec_speedup:>9.3f} {r.ratio:>7.3f} {r.time_ratio:>8.1f}")
    print(f"geomean ratio {summary['geomean_ratio']:.4f}  median ratio {summary['median_ratio']:.4f}  "
          f"geomean search-time ratio {summary['geomean_time_ratio']:.1f}")
    return EXIT_OK


COMMANDS = {"autoschedule": cmd_autoschedule, "datagen": cmd_datagen, "train": cmd_train,
            "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"polyloop: error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
