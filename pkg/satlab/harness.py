"""
Solver benchmarking with cactus series, and query-introspection probes over
a checkpoint trail.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .base import BenchRecord, ProbeRecord, write_records_csv
from .checkpoint import load_checkpoint, restore_model
from .cnf import CnfFormula, batch_formulas, check_assignment, discretize, make_batch
from .errors import DatasetError, ModelMismatchError
from .models import SatModel, forward
from .solvers import SearchBudget, dpll_solve, gsat_solve
from .utils import instance_rng

logger = logging.getLogger(__name__)

BENCH_SOLVERS = ("querysat", "gsat", "dpll")
TIME_AXES = ("wall", "work")
PROBE_AVERAGING = "per_instance_then_across_instances;query_column=0;consecutive=last_two_steps"


@dataclasses.dataclass
class BenchConfig:
    solvers: Tuple[str, ...] = ("querysat", "gsat", "dpll")
    checkpoint: Optional[Path] = None
    querysat_steps: int = 1024
    budget: SearchBudget = dataclasses.field(default_factory=SearchBudget)
    workers: int = 1
    time_axis: str = "wall"
    seed: int = 0

    def __post_init__(self) -> None:
        self.solvers = tuple(self.solvers)
        unknown = [name for name in self.solvers if name not in BENCH_SOLVERS]
        if unknown:
            raise ValueError(f"unknown solvers {unknown}; expected a subset of {BENCH_SOLVERS}")
        if "querysat" in self.solvers and self.checkpoint is None:
            raise ValueError("benchmarking querysat needs a checkpoint")
        if self.time_axis not in TIME_AXES:
            raise ValueError(f"time_axis must be one of {TIME_AXES}")
        if self.querysat_steps < 1 or self.workers < 1:
            raise ValueError("querysat_steps and workers must be >= 1")

    def to_dict(self) -> Dict[str, object]:
        raw = dataclasses.asdict(self)
        raw["checkpoint"] = None if self.checkpoint is None else str(self.checkpoint)
        raw["solvers"] = list(self.solvers)
        return raw


def _run_querysat(model: SatModel, formula: CnfFormula, iid: int, steps: int, seed: int) -> BenchRecord:
    result = forward(model, make_batch([formula], [iid]), steps, mode="eval", seed=seed)
    solved = bool(result.solved[0])
    return BenchRecord(
        instance_id=iid,
        solver="querysat",
        status="sat" if solved else "unknown",
        seconds=float(result.exit_seconds[0] if solved else result.seconds),
        work=result.exit_steps[0] or result.steps_run,
        exit_step=result.exit_steps[0],
    )


def _run_classical(
    solver: str, formula: CnfFormula, iid: int, budget: SearchBudget, seed: int
) -> BenchRecord:
    if solver == "gsat":
        result = gsat_solve(formula, budget, instance_rng(seed, iid))
    else:
        result = dpll_solve(formula, budget)
    status = result.status
    if status == "unknown" and budget.time_limit is not None and result.seconds >= budget.time_limit:
        status = "timeout"
    return BenchRecord(
        instance_id=iid, solver=solver, status=status, seconds=result.seconds, work=result.work
    )


def run_bench(
    config: BenchConfig,
    formulas: Sequence[CnfFormula],
    instance_ids: Optional[Sequence[int]] = None,
    progress: bool = False,
) -> List[BenchRecord]:
    """One record per (solver, instance), solvers in config order, instances in input order."""
    ids = list(range(len(formulas))) if instance_ids is None else list(instance_ids)
    model = None
    if "querysat" in config.solvers:
        model = restore_model(load_checkpoint(config.checkpoint))

    records: List[BenchRecord] = []
    for solver in config.solvers:

        def run(item: Tuple[int, CnfFormula]) -> BenchRecord:
            iid, formula = item
            if solver == "querysat":
                return _run_querysat(model, formula, iid, config.querysat_steps, config.seed)
            return _run_classical(solver, formula, iid, config.budget, config.seed)

        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            batch = list(
                tqdm(
                    executor.map(run, zip(ids, formulas)),
                    total=len(ids),
                    desc=f"bench {solver}",
                    disable=not progress,
                )
            )
        solved = sum(record.solved for record in batch)
        logger.info("%s solved %d/%d instances", solver, solved, len(batch))
        records.extend(batch)
    return records


def records_frame(records: Sequence[BenchRecord], time_axis: str = "wall") -> pd.DataFrame:
    frame = pd.DataFrame([record.to_row() for record in records])
    if time_axis == "work":
        frame = frame.drop(columns=["seconds"])
    return frame


def cactus_series(records: Sequence[BenchRecord], time_axis: str = "wall") -> pd.DataFrame:
    """Solved instances per solver sorted by cost, with running totals.

    Columns are solver, solved_count and cumulative_seconds (cumulative_work
    on the work axis).
    """
    if time_axis not in TIME_AXES:
        raise ValueError(f"time_axis must be one of {TIME_AXES}")
    cost = "seconds" if time_axis == "wall" else "work"
    total = "cumulative_seconds" if time_axis == "wall" else "cumulative_work"
    frame = pd.DataFrame([record.to_row() for record in records])
    if frame.empty:
        return pd.DataFrame(columns=["solver", "solved_count", total])
    frame = frame[frame["status"].isin(["sat", "unsat"])]
    order = list(dict.fromkeys(record.solver for record in records))
    parts = []
    for solver in order:
        solved = frame[frame["solver"] == solver].sort_values(
            [cost, "instance_id"], kind="mergesort"
        )
        parts.append(
            pd.DataFrame(
                {
                    "solver": solver,
                    "solved_count": np.arange(1, len(solved) + 1),
                    total: solved[cost].cumsum().to_numpy(),
                }
            )
        )
    return pd.concat(parts, ignore_index=True)


def read_external_records(name: str, path: Path) -> List[BenchRecord]:
    """Timing CSV with columns instance_id, status, seconds from another solver."""
    frame = pd.read_csv(path)
    missing = {"instance_id", "status", "seconds"} - set(frame.columns)
    if missing:
        raise DatasetError(f"{path}: missing columns {sorted(missing)}")
    try:
        return [
            BenchRecord(
                instance_id=int(row.instance_id),
                solver=name,
                status=str(row.status),
                seconds=float(row.seconds),
                work=0,
            )
            for row in frame.itertuples(index=False)
        ]
    except ValueError as error:
        raise DatasetError(f"{path}: {error}") from error


def plot_payload(cactus: pd.DataFrame, time_axis: str) -> Dict[str, object]:
    total = cactus.columns[-1]
    series = {}
    for solver, group in cactus.groupby("solver", sort=False):
        series[solver] = {
            "solved_count": group["solved_count"].astype(int).tolist(),
            total: group[total].tolist(),
        }
    return {"time_axis": time_axis, "x": total, "y": "solved_count", "series": series}


@dataclasses.dataclass
class BenchOutputs:
    records: Path
    cactus: Path
    plot: Optional[Path] = None


def write_bench_outputs(
    records: Sequence[BenchRecord],
    out_dir: Path,
    time_axis: str = "wall",
    plot_json: bool = False,
) -> BenchOutputs:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = BenchOutputs(records=out_dir / "bench_records.csv", cactus=out_dir / "cactus.csv")
    records_frame(records, time_axis).to_csv(outputs.records, index=False, lineterminator="\n")
    cactus = cactus_series(records, time_axis)
    cactus.to_csv(outputs.cactus, index=False, lineterminator="\n")
    if plot_json:
        outputs.plot = out_dir / "cactus.json"
        with outputs.plot.open("w", encoding="utf-8") as fh:
            json.dump(plot_payload(cactus, time_axis), fh, indent=2)
    return outputs


@dataclasses.dataclass
class ProbeConfig:
    steps: int = 32
    node_budget: int = 20_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("probe steps must be >= 1")

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


def _match(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(discretize(a) == discretize(b))) if a.size else 1.0


def _sat_fraction(formula: CnfFormula, values: np.ndarray) -> float:
    flags = check_assignment(formula, values).clauses
    return float(np.mean(flags)) if flags else 1.0


def probe_model(
    model: SatModel, formulas: Sequence[CnfFormula], config: ProbeConfig, iteration: int = 0
) -> ProbeRecord:
    """Query metrics per instance, averaged over instances.

    Queries and outputs are compared after rounding at 0.5. Logit match and
    query sat fraction average over the recorded steps; consecutive match
    compares the last two queries only. The headline numbers use query
    column 0, the ``_all_columns`` numbers average every query column.
    """
    if not model.config.has_query:
        raise ModelMismatchError(f"{model.config.architecture} has no query head to probe")
    per_instance: List[Tuple[float, float, float, float, float]] = []
    for batch in batch_formulas(formulas, config.node_budget):
        result = forward(model, batch, config.steps, mode="eval", seed=config.seed, record_trace=True)
        for i, formula in enumerate(batch.formulas):
            rows = batch.var_slice(i)
            queries = [np.clip(step.query[rows], 0.0, 1.0) for step in result.trace]
            logit_match, logit_match_all, sat, sat_all = [], [], [], []
            for step, query in zip(result.trace, queries):
                best = step.assignments[rows, step.best_columns[i]]
                columns = range(query.shape[1])
                logit_match.append(_match(query[:, 0], best))
                logit_match_all.append(np.mean([_match(query[:, j], best) for j in columns]))
                sat.append(_sat_fraction(formula, query[:, 0]))
                sat_all.append(np.mean([_sat_fraction(formula, query[:, j]) for j in columns]))
            # A single recorded step has no pair to compare.
            consecutive = _match(queries[-2][:, 0], queries[-1][:, 0]) if len(queries) > 1 else 1.0
            per_instance.append(
                (
                    float(np.mean(logit_match)),
                    float(np.mean(sat)),
                    consecutive,
                    float(np.mean(logit_match_all)),
                    float(np.mean(sat_all)),
                )
            )
    means = np.clip(100.0 * np.mean(np.array(per_instance), axis=0), 0.0, 100.0)
    return ProbeRecord(
        iteration=iteration,
        query_logit_match=float(means[0]),
        query_sat_clause_fraction=float(means[1]),
        consecutive_query_match=float(means[2]),
        query_logit_match_all_columns=float(means[3]),
        query_sat_clause_fraction_all_columns=float(means[4]),
        averaging=PROBE_AVERAGING,
    )


def checkpoint_trail(run_dir: Path) -> List[Path]:
    """Trail checkpoints in iteration order, final.qsat last."""
    run_dir = Path(run_dir)
    trail = sorted(run_dir.glob("ckpt_*.qsat"))
    final = run_dir / "final.qsat"
    if final.exists():
        trail.append(final)
    if not trail:
        raise DatasetError(f"no checkpoints under {run_dir}")
    return trail


def run_probe(
    checkpoints: Sequence[Path],
    formulas: Sequence[CnfFormula],
    config: ProbeConfig,
    progress: bool = False,
) -> List[ProbeRecord]:
    records = []
    for path in tqdm(checkpoints, desc="probe", disable=not progress):
        checkpoint = load_checkpoint(path)
        model = restore_model(checkpoint)
        record = probe_model(model, formulas, config, iteration=checkpoint.iteration)
        logger.info(
            "%s: query/logit match %.1f%%, query sat clauses %.1f%%",
            path.name,
            record.query_logit_match,
            record.query_sat_clause_fraction,
        )
        records.append(record)
    return records


def write_probe_csv(records: Sequence[ProbeRecord], path: Path) -> Path:
    write_records_csv(records, Path(path))
    return Path(path)
