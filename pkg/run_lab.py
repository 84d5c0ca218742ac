from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from satlab.checkpoint import load_checkpoint, restore_model
from satlab.cnf import ingest_dimacs_dir, load_dataset, read_cnf
from satlab.errors import SatLabError, exit_code_for
from satlab.generators import TASKS, GenSpec, gen_dataset
from satlab.harness import (
    BENCH_SOLVERS,
    TIME_AXES,
    BenchConfig,
    ProbeConfig,
    checkpoint_trail,
    read_external_records,
    run_bench,
    run_probe,
    write_bench_outputs,
    write_probe_csv,
)
from satlab.models import ARCHITECTURES, ModelConfig, build_model
from satlab.solvers import SOLVERS, DpllOracle, SearchBudget, format_witness, solve
from satlab.theorem import DEFAULT_GAP, demo_report, theorem1_sweep
from satlab.training import TrainConfig, evaluate_runs, summarize_runs, train
from satlab.utils import write_stamp

DEFAULT_DATA_DIR = Path("data")
DEFAULT_RUNS_DIR = Path("runs")
SOLUTION_LINES = {"sat": "SATISFIABLE", "unsat": "UNSATISFIABLE", "unknown": "UNKNOWN"}

logger = logging.getLogger("run_lab")


def parse_int_list(raw: str) -> List[int]:
    try:
        values = [int(item) for item in raw.split(",") if item.strip()]
    except ValueError as error:
        raise ValueError(f"expected comma-separated integers, got {raw!r}") from error
    if not values or any(value < 1 for value in values):
        raise ValueError(f"expected positive integers, got {raw!r}")
    return values


def _dataset(path: Path):
    loaded = load_dataset(path)
    return [formula for _, formula in loaded]


def _budget(args: argparse.Namespace) -> SearchBudget:
    return SearchBudget(
        max_flips=args.max_flips,
        max_tries=args.max_tries,
        max_decisions=args.max_decisions,
        time_limit=args.time_limit,
    )


def cmd_generate(args: argparse.Namespace) -> Path:
    out = args.out or DEFAULT_DATA_DIR / args.task
    if args.from_dimacs is not None:
        manifest = ingest_dimacs_dir(args.from_dimacs, out, task_label=args.task)
        write_stamp(out, command="generate", arguments=vars(args), seed=args.seed)
        return manifest
    spec = GenSpec(args.task, args.min_size, args.max_size, args.count, args.seed)
    manifest = gen_dataset(
        spec,
        out,
        oracle=DpllOracle(args.max_decisions),
        workers=args.workers,
        progress=not args.quiet,
    )
    write_stamp(out, command="generate", arguments=vars(args), seed=args.seed, config=spec.to_dict())
    return manifest


def cmd_train(args: argparse.Namespace) -> Path:
    model_overrides: Dict[str, object] = {"architecture": args.architecture}
    for key in ("feature_maps", "assignments", "noise_dims"):
        if getattr(args, key) is not None:
            model_overrides[key] = getattr(args, key)
    model_config = ModelConfig.preset(args.preset, **model_overrides)

    train_overrides: Dict[str, object] = {"seed": args.seed}
    for key in (
        "learning_rate",
        "train_steps",
        "iterations",
        "node_budget",
        "checkpoint_interval",
        "validation_interval",
        "validation_steps",
    ):
        if getattr(args, key) is not None:
            train_overrides[key] = getattr(args, key)
    train_config = TrainConfig.preset(args.preset, **train_overrides)

    resume = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
        model_config = resume.model_config
    model = build_model(model_config, args.seed)
    validation = _dataset(args.val_dataset) if args.val_dataset else None
    out = args.out or DEFAULT_RUNS_DIR / "train"
    write_stamp(
        out,
        command="train",
        arguments=vars(args),
        seed=args.seed,
        config={"model": model_config.to_dict(), "train": train_config.to_dict()},
    )
    result = train(
        model,
        _dataset(args.dataset),
        train_config,
        validation=validation,
        out_dir=out,
        resume=resume,
        progress=not args.quiet,
    )
    return result.checkpoint_path


def cmd_eval(args: argparse.Namespace) -> Path:
    steps_list = parse_int_list(args.steps)
    if args.repeats < 1:
        raise ValueError("--repeats must be >= 1")
    checkpoints = [load_checkpoint(path) for path in args.checkpoint]
    formulas = _dataset(args.dataset)
    runs = evaluate_runs(
        [restore_model(checkpoint) for checkpoint in checkpoints],
        formulas,
        steps_list,
        repeats=args.repeats,
        seed=args.seed,
        labels=[str(path) for path in args.checkpoint],
        node_budget=args.node_budget,
        progress=not args.quiet,
    )
    out = args.out or DEFAULT_RUNS_DIR / "eval"
    out.mkdir(parents=True, exist_ok=True)

    def keys(run):
        return {"run": run.run, "checkpoint": run.label, "seed": run.seed}

    summary = pd.DataFrame([{**keys(run), **report.to_row()} for run in runs for report in run.reports])
    instances = pd.DataFrame(
        [
            {**keys(run), "steps": report.steps, **record.to_row()}
            for run in runs
            for report in run.reports
            for record in report.records
        ]
    )
    summary.to_csv(out / "eval_summary.csv", index=False, lineterminator="\n")
    instances.to_csv(out / "eval_instances.csv", index=False, lineterminator="\n")
    summarize_runs(runs).to_csv(out / "eval_aggregate.csv", index=False, lineterminator="\n")
    write_stamp(
        out,
        command="eval",
        arguments=vars(args),
        seed=args.seed,
        config={"models": [checkpoint.model_config.to_dict() for checkpoint in checkpoints]},
    )
    return out / "eval_aggregate.csv"


def cmd_solve(args: argparse.Namespace) -> Optional[Path]:
    formula = read_cnf(args.file)
    result = solve(formula, args.solver, _budget(args), seed=args.seed, debug=args.debug)
    print(f"s {SOLUTION_LINES[result.status]}")
    if result.assignment is not None:
        print(format_witness(result.assignment))
    print(
        f"c solver={args.solver} flips={result.flips} decisions={result.decisions} "
        f"tries={result.tries} seconds={result.seconds:.4f}"
    )
    if args.out is not None:
        return write_stamp(args.out, command="solve", arguments=vars(args), seed=args.seed)
    return None


def cmd_bench(args: argparse.Namespace) -> Path:
    solvers = tuple(name.strip() for name in args.solvers.split(",") if name.strip())
    config = BenchConfig(
        solvers=solvers,
        checkpoint=args.checkpoint,
        querysat_steps=args.steps,
        budget=_budget(args),
        workers=args.workers,
        time_axis=args.time_axis,
        seed=args.seed,
    )
    formulas = _dataset(args.dataset)
    records = run_bench(config, formulas, progress=not args.quiet)
    for spec in args.external:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise ValueError(f"--external expects NAME=CSV, got {spec!r}")
        records.extend(read_external_records(name, Path(path)))
    out = args.out or DEFAULT_RUNS_DIR / "bench"
    outputs = write_bench_outputs(records, out, config.time_axis, args.plot_json)
    write_stamp(out, command="bench", arguments=vars(args), seed=args.seed, config=config.to_dict())
    return outputs.cactus


def cmd_probe(args: argparse.Namespace) -> Path:
    if args.run is None and not args.checkpoint:
        raise ValueError("probe needs --run or at least one --checkpoint")
    checkpoints = list(args.checkpoint) if args.checkpoint else checkpoint_trail(args.run)
    config = ProbeConfig(steps=args.steps, node_budget=args.node_budget, seed=args.seed)
    records = run_probe(checkpoints, _dataset(args.dataset), config, progress=not args.quiet)
    out = args.out or DEFAULT_RUNS_DIR / "probe"
    path = write_probe_csv(records, out / "probe.csv")
    write_stamp(out, command="probe", arguments=vars(args), seed=args.seed, config=config.to_dict())
    return path


def cmd_theorem(args: argparse.Namespace) -> Optional[Path]:
    if args.action == "demo":
        text = demo_report(read_cnf(args.formula), args.n, args.gap)
        violations: List[str] = []
    else:
        report = theorem1_sweep(_dataset(args.dir), max_vars=args.max_vars)
        violations = report.violations
        lines = [f"Checked {report.assignments_checked} assignments: {len(violations)} violations"]
        lines.extend(f"  {line}" for line in violations[:20])
        text = "\n".join(lines)
    print(text)
    output = None
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        output = args.out / f"theorem_{args.action}.txt"
        output.write_text(text + "\n", encoding="utf-8")
        write_stamp(args.out, command="theorem", arguments=vars(args), seed=args.seed)
    if violations:
        raise SatLabError(f"{len(violations)} binary-point violations")
    return output


def _add_budget_flags(parser: argparse.ArgumentParser) -> None:
    defaults = SearchBudget()
    parser.add_argument("--max-flips", type=int, default=defaults.max_flips, help="GSAT flips per try.")
    parser.add_argument("--max-tries", type=int, default=defaults.max_tries, help="GSAT restarts.")
    parser.add_argument(
        "--max-decisions", type=int, default=defaults.max_decisions, help="DPLL decision budget."
    )
    parser.add_argument("--time-limit", type=float, default=None, help="Per-instance seconds.")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Seed for every random stream.")
    common.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    common.add_argument("--quiet", action="store_true", help="Disable progress bars.")

    parser = argparse.ArgumentParser(
        description="Generate SAT datasets, train and evaluate QuerySAT, benchmark solvers."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Write a satisfiable dataset.")
    gen.add_argument("--task", choices=TASKS + ("external",), default="3sat")
    gen.add_argument("--min-size", type=int, default=5)
    gen.add_argument("--max-size", type=int, default=20)
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--workers", type=int, default=1)
    gen.add_argument("--max-decisions", type=int, default=1_000_000, help="Oracle budget.")
    gen.add_argument("--from-dimacs", type=Path, default=None, help="Index existing .cnf files.")
    gen.add_argument("--out", type=Path, default=None)
    gen.set_defaults(handler=cmd_generate)

    tr = sub.add_parser("train", parents=[common], help="Train a model on a dataset.")
    tr.add_argument("--dataset", type=Path, required=True)
    tr.add_argument("--val-dataset", type=Path, default=None)
    tr.add_argument("--preset", choices=["desk", "full"], default="desk")
    tr.add_argument("--architecture", choices=ARCHITECTURES, default="querysat")
    tr.add_argument("--feature-maps", type=int, default=None)
    tr.add_argument("--assignments", type=int, default=None)
    tr.add_argument("--noise-dims", type=int, default=None)
    tr.add_argument("--learning-rate", type=float, default=None)
    tr.add_argument("--train-steps", type=int, default=None)
    tr.add_argument("--iterations", type=int, default=None)
    tr.add_argument("--node-budget", type=int, default=None)
    tr.add_argument("--checkpoint-interval", type=int, default=None)
    tr.add_argument("--validation-interval", type=int, default=None)
    tr.add_argument("--validation-steps", type=int, default=None)
    tr.add_argument("--resume", type=Path, default=None)
    tr.add_argument("--out", type=Path, default=None)
    tr.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="Solved fraction per step count.")
    ev.add_argument("--checkpoint", type=Path, action="append", required=True, help="Repeatable; one run set per checkpoint.")
    ev.add_argument("--repeats", type=int, default=1, help="Noise seeds per checkpoint, starting at --seed.")
    ev.add_argument("--dataset", type=Path, required=True)
    ev.add_argument("--steps", default="512", help="Comma-separated step counts, e.g. 32,512,4096.")
    ev.add_argument("--node-budget", type=int, default=20_000)
    ev.add_argument("--out", type=Path, default=None)
    ev.set_defaults(handler=cmd_eval)

    so = sub.add_parser("solve", parents=[common], help="Run GSAT or DPLL on one file.")
    so.add_argument("file", type=Path)
    so.add_argument("--solver", choices=SOLVERS, default="dpll")
    so.add_argument("--debug", action="store_true", help="Recount GSAT counters every 1000 flips.")
    so.add_argument("--out", type=Path, default=None)
    _add_budget_flags(so)
    so.set_defaults(handler=cmd_solve)

    be = sub.add_parser("bench", parents=[common], help="Benchmark solvers, write cactus CSV.")
    be.add_argument("--dataset", type=Path, required=True)
    be.add_argument("--solvers", default="gsat,dpll", help=f"Subset of {','.join(BENCH_SOLVERS)}.")
    be.add_argument("--checkpoint", type=Path, default=None)
    be.add_argument("--steps", type=int, default=1024, help="QuerySAT recurrent step limit.")
    be.add_argument("--workers", type=int, default=1)
    be.add_argument("--time-axis", choices=TIME_AXES, default="wall")
    be.add_argument("--plot-json", action="store_true")
    be.add_argument("--external", action="append", default=[], metavar="NAME=CSV")
    be.add_argument("--out", type=Path, default=None)
    _add_budget_flags(be)
    be.set_defaults(handler=cmd_bench)

    pr = sub.add_parser("probe", parents=[common], help="Query introspection over checkpoints.")
    pr.add_argument("--run", type=Path, default=None, help="Training output directory.")
    pr.add_argument("--checkpoint", type=Path, action="append", default=[])
    pr.add_argument("--dataset", type=Path, required=True)
    pr.add_argument("--steps", type=int, default=32)
    pr.add_argument("--node-budget", type=int, default=20_000)
    pr.add_argument("--out", type=Path, default=None)
    pr.set_defaults(handler=cmd_probe)

    th = sub.add_parser("theorem", parents=[common], help="Exact identification checks.")
    th.add_argument("action", choices=["demo", "verify1"])
    th.add_argument("--formula", type=Path, default=None)
    th.add_argument("--n", type=int, default=None, help="Query size (defaults to the formula's n).")
    th.add_argument("--gap", type=int, default=DEFAULT_GAP)
    th.add_argument("--dir", type=Path, default=None)
    th.add_argument("--max-vars", type=int, default=10)
    th.add_argument("--out", type=Path, default=None, help="Also write the report and a stamp here.")
    th.set_defaults(handler=cmd_theorem)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "theorem":
        needed = "formula" if args.action == "demo" else "dir"
        if getattr(args, needed) is None:
            parser.error(f"theorem {args.action} needs --{needed}")

    try:
        output = args.handler(args)
    except SatLabError as error:
        logger.error("%s: %s: %s", args.command, error.category, error)
        return exit_code_for(error)
    except ValueError as error:
        logger.error("%s: usage: %s", args.command, error)
        return 2
    if output is not None:
        print(f"{args.command} complete. Output saved to {output}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
