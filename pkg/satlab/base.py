from __future__ import annotations

import csv
import dataclasses
import time
from pathlib import Path
from typing import Dict, Iterable, Optional, Protocol

BENCH_STATUSES = ("sat", "unsat", "unknown", "timeout")


class Row(Protocol):
    def to_row(self) -> Dict[str, object]: ...


@dataclasses.dataclass
class BenchRecord:
    """One (solver, instance) outcome of a benchmark run."""

    instance_id: int
    solver: str
    status: str
    seconds: float
    work: int
    exit_step: Optional[int] = None

    def __post_init__(self) -> None:
        if self.status not in BENCH_STATUSES:
            raise ValueError(f"unknown bench status {self.status!r}")
        if self.seconds < 0:
            raise ValueError("bench seconds must be nonnegative")

    @property
    def solved(self) -> bool:
        return self.status in ("sat", "unsat")

    def to_row(self) -> Dict[str, object]:
        return {
            "instance_id": self.instance_id,
            "solver": self.solver,
            "status": self.status,
            "seconds": self.seconds,
            "work": self.work,
            "exit_step": "" if self.exit_step is None else self.exit_step,
        }


@dataclasses.dataclass
class ProbeRecord:
    """Query introspection percentages for one checkpoint of a training run."""

    iteration: int
    query_logit_match: float
    query_sat_clause_fraction: float
    consecutive_query_match: float
    query_logit_match_all_columns: float = 0.0
    query_sat_clause_fraction_all_columns: float = 0.0
    averaging: str = "per_instance_then_across_instances"

    def __post_init__(self) -> None:
        for name in (
            "query_logit_match",
            "query_sat_clause_fraction",
            "consecutive_query_match",
            "query_logit_match_all_columns",
            "query_sat_clause_fraction_all_columns",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"{name}={value} outside [0, 100]")

    def to_row(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class MetricsRow:
    """One line of the training metrics log."""

    iteration: int
    loss: float
    val_solved_fraction: Optional[float]
    wall_ms: float

    def to_row(self) -> Dict[str, object]:
        return {
            "iteration": self.iteration,
            "loss": self.loss,
            "val_solved_fraction": ""
            if self.val_solved_fraction is None
            else self.val_solved_fraction,
            "wall_ms": self.wall_ms,
        }


def write_records_csv(records: Iterable[Row], path: Path, mode: str = "w") -> None:
    records = list(records)
    if not records:
        raise ValueError("No records to write.")
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = list(records[0].to_row().keys())
    with path.open(mode, newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        if mode == "w":
            writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())


class Timer:
    """Context manager measuring elapsed seconds; readable while running."""

    def __enter__(self) -> "Timer":
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        self._end = time.perf_counter()

    @property
    def elapsed(self) -> float:
        if not hasattr(self, "_end"):
            return time.perf_counter() - self._start
        return self._end - self._start
