"""
CNF formulas, DIMACS I/O, factor graphs, instance batching and assignment
checks. Literals are DIMACS signed integers (1-based); arrays inside the lab
are 0-based, and the conversion happens only here.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import (
    AssignmentLengthError,
    DatasetError,
    DimacsParseError,
    OversizedInstanceError,
)

logger = logging.getLogger(__name__)

Literal = int
Clause = Tuple[Literal, ...]
MANIFEST_NAME = "manifest.json"


@dataclasses.dataclass(frozen=True)
class CnfFormula:
    num_vars: int
    clauses: Tuple[Clause, ...]

    def __post_init__(self) -> None:
        clauses = tuple(tuple(int(lit) for lit in clause) for clause in self.clauses)
        object.__setattr__(self, "clauses", clauses)
        if self.num_vars < 1:
            raise ValueError(f"num_vars must be positive, got {self.num_vars}")
        for index, clause in enumerate(clauses):
            if not clause:
                raise ValueError(f"clause {index} is empty")
            if len(set(clause)) != len(clause):
                raise ValueError(f"clause {index} repeats a literal: {clause}")
            for lit in clause:
                if lit == 0 or abs(lit) > self.num_vars:
                    raise ValueError(
                        f"literal {lit} in clause {index} outside [1, {self.num_vars}]"
                    )

    @property
    def num_clauses(self) -> int:
        return len(self.clauses)

    @property
    def num_literals(self) -> int:
        return sum(len(clause) for clause in self.clauses)

    @property
    def node_count(self) -> int:
        return self.num_vars + self.num_clauses

    def evaluate(self, bits: Sequence[int]) -> List[bool]:
        """Boolean value of every clause under a 0/1 vector (index 0 = variable 1)."""
        return [
            any((bits[abs(lit) - 1] == 1) == (lit > 0) for lit in clause)
            for clause in self.clauses
        ]


def _dedupe(literals: Iterable[int]) -> Tuple[int, ...]:
    return tuple(dict.fromkeys(literals))


def parse_dimacs(text: Union[str, TextIO]) -> CnfFormula:
    """Parse DIMACS CNF; duplicate literals inside a clause are dropped."""
    stream = io.StringIO(text) if isinstance(text, str) else text
    num_vars: Optional[int] = None
    declared_clauses = 0
    clauses: List[Tuple[int, ...]] = []
    current: List[int] = []
    last_line = 0

    for line_number, raw in enumerate(stream, start=1):
        last_line = line_number
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        if line.startswith("%"):
            break
        if line.startswith("p"):
            if num_vars is not None:
                raise DimacsParseError("duplicate problem header", line_number)
            parts = line.split()
            if len(parts) != 4 or parts[1] != "cnf":
                raise DimacsParseError(f"deformed header {line!r}", line_number)
            try:
                num_vars, declared_clauses = int(parts[2]), int(parts[3])
            except ValueError:
                raise DimacsParseError(f"deformed header {line!r}", line_number) from None
            if num_vars < 1 or declared_clauses < 0:
                raise DimacsParseError(f"deformed header {line!r}", line_number)
            continue
        if num_vars is None:
            raise DimacsParseError("clause data before 'p cnf' header", line_number)
        for token in line.split():
            try:
                lit = int(token)
            except ValueError:
                raise DimacsParseError(f"non-integer token {token!r}", line_number) from None
            if lit == 0:
                if not current:
                    raise DimacsParseError("empty clause", line_number)
                clauses.append(_dedupe(current))
                current = []
                continue
            if abs(lit) > num_vars:
                raise DimacsParseError(
                    f"literal {lit} exceeds declared variable count {num_vars}",
                    line_number,
                )
            current.append(lit)

    if num_vars is None:
        raise DimacsParseError("missing 'p cnf' header", last_line or None)
    if current:
        raise DimacsParseError("last clause is not terminated by 0", last_line)
    if len(clauses) != declared_clauses:
        raise DimacsParseError(
            f"header declares {declared_clauses} clauses but {len(clauses)} were read",
            last_line,
        )
    return CnfFormula(num_vars=num_vars, clauses=tuple(clauses))


def write_dimacs(formula: CnfFormula) -> str:
    lines = [f"p cnf {formula.num_vars} {formula.num_clauses}"]
    lines.extend(" ".join(str(lit) for lit in clause) + " 0" for clause in formula.clauses)
    return "\n".join(lines) + "\n"


def read_cnf(path: Path) -> CnfFormula:
    with Path(path).open("r", encoding="utf-8") as fh:
        try:
            return parse_dimacs(fh)
        except DimacsParseError as error:
            raise DimacsParseError(f"{path}: {error.reason}", error.line_number) from error


def write_cnf(path: Path, formula: CnfFormula) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(write_dimacs(formula))


@dataclasses.dataclass(frozen=True, eq=False)
class FactorGraph:
    """Sparse variable-clause incidence: a_pos/a_neg are n x m 0/1 matrices."""

    n: int
    m: int
    a_pos: sp.csr_matrix
    a_neg: sp.csr_matrix
    clause_vars: Tuple[Tuple[int, ...], ...]
    clause_negated: Tuple[Tuple[bool, ...], ...]

    @property
    def num_edges(self) -> int:
        return int(self.a_pos.nnz + self.a_neg.nnz)

    @cached_property
    def literal_incidence(self) -> sp.csr_matrix:
        """2n x m incidence: positive literal rows, then negated literal rows."""
        return sp.vstack([self.a_pos, self.a_neg], format="csr")

    @cached_property
    def clause_table(self) -> Tuple[np.ndarray, np.ndarray]:
        """Padded m x K literal table.

        Padding slots point at the extra row ``n`` and count as positive
        literals, so evaluating them against a zero row yields a factor of
        exactly 1.
        """
        width = max((len(vars_) for vars_ in self.clause_vars), default=1)
        var_idx = np.full((self.m, width), self.n, dtype=np.int64)
        negated = np.zeros((self.m, width), dtype=bool)
        for c, (vars_, signs) in enumerate(zip(self.clause_vars, self.clause_negated)):
            var_idx[c, : len(vars_)] = vars_
            negated[c, : len(signs)] = signs
        var_idx.setflags(write=False)
        negated.setflags(write=False)
        return var_idx, negated


def build_factor_graph(formula: CnfFormula) -> FactorGraph:
    rows_pos: List[int] = []
    cols_pos: List[int] = []
    rows_neg: List[int] = []
    cols_neg: List[int] = []
    clause_vars = []
    clause_negated = []
    for c, clause in enumerate(formula.clauses):
        for lit in clause:
            if lit > 0:
                rows_pos.append(lit - 1)
                cols_pos.append(c)
            else:
                rows_neg.append(-lit - 1)
                cols_neg.append(c)
        clause_vars.append(tuple(abs(lit) - 1 for lit in clause))
        clause_negated.append(tuple(lit < 0 for lit in clause))

    shape = (formula.num_vars, formula.num_clauses)
    a_pos = sp.csr_matrix(
        (np.ones(len(rows_pos), dtype=np.float32), (rows_pos, cols_pos)), shape=shape
    )
    a_neg = sp.csr_matrix(
        (np.ones(len(rows_neg), dtype=np.float32), (rows_neg, cols_neg)), shape=shape
    )
    return FactorGraph(
        n=formula.num_vars,
        m=formula.num_clauses,
        a_pos=a_pos,
        a_neg=a_neg,
        clause_vars=tuple(clause_vars),
        clause_negated=tuple(clause_negated),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class Batch:
    """Disjoint union of several formulas packed into one factor graph."""

    graph: FactorGraph
    var_offsets: Tuple[int, ...]
    clause_offsets: Tuple[int, ...]
    instance_ids: Tuple[int, ...]
    formulas: Tuple[CnfFormula, ...]

    @property
    def size(self) -> int:
        return len(self.formulas)

    @property
    def node_count(self) -> int:
        return self.graph.n + self.graph.m

    def var_slice(self, i: int) -> slice:
        return slice(self.var_offsets[i], self.var_offsets[i + 1])

    def clause_slice(self, i: int) -> slice:
        return slice(self.clause_offsets[i], self.clause_offsets[i + 1])


def make_batch(formulas: Sequence[CnfFormula], instance_ids: Sequence[int]) -> Batch:
    if not formulas:
        raise ValueError("cannot batch an empty formula list")
    var_offsets = [0]
    clause_offsets = [0]
    shifted: List[Tuple[int, ...]] = []
    for formula in formulas:
        shift = var_offsets[-1]
        shifted.extend(
            tuple(lit + shift if lit > 0 else lit - shift for lit in clause)
            for clause in formula.clauses
        )
        var_offsets.append(shift + formula.num_vars)
        clause_offsets.append(clause_offsets[-1] + formula.num_clauses)
    union = CnfFormula(num_vars=var_offsets[-1], clauses=tuple(shifted))
    return Batch(
        graph=build_factor_graph(union),
        var_offsets=tuple(var_offsets),
        clause_offsets=tuple(clause_offsets),
        instance_ids=tuple(int(i) for i in instance_ids),
        formulas=tuple(formulas),
    )


def batch_formulas(
    formulas: Sequence[CnfFormula],
    node_budget: int,
    instance_ids: Optional[Sequence[int]] = None,
) -> List[Batch]:
    """Greedy first-fit packing in input order under an n+m node budget."""
    if node_budget < 1:
        raise ValueError("node_budget must be positive")
    ids = list(range(len(formulas))) if instance_ids is None else list(instance_ids)
    if len(ids) != len(formulas):
        raise ValueError("instance_ids and formulas differ in length")

    bins: List[List[int]] = []
    loads: List[int] = []
    for position, formula in enumerate(formulas):
        size = formula.node_count
        if size > node_budget:
            raise OversizedInstanceError(
                f"instance {ids[position]} has n+m={size} > node budget {node_budget}"
            )
        for b, load in enumerate(loads):
            if load + size <= node_budget:
                bins[b].append(position)
                loads[b] += size
                break
        else:
            bins.append([position])
            loads.append(size)

    return [
        make_batch([formulas[p] for p in members], [ids[p] for p in members])
        for members in bins
    ]


def discretize(values: np.ndarray) -> np.ndarray:
    """Round [0,1] values to 0/1; exactly 0.5 goes to 1."""
    return (np.asarray(values) >= 0.5).astype(np.int8)


@dataclasses.dataclass(frozen=True, eq=False)
class Assignment:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("assignment values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def bits(self) -> np.ndarray:
        return discretize(self.values)


@dataclasses.dataclass(frozen=True)
class AssignmentCheck:
    clauses: Tuple[bool, ...]
    satisfied: bool


def check_assignment(
    formula: CnfFormula, assignment: Union[Assignment, Sequence[float], np.ndarray]
) -> AssignmentCheck:
    if not isinstance(assignment, Assignment):
        assignment = Assignment(np.asarray(assignment, dtype=np.float64))
    if len(assignment) != formula.num_vars:
        raise AssignmentLengthError(
            f"assignment has {len(assignment)} values for {formula.num_vars} variables"
        )
    flags = tuple(formula.evaluate(assignment.bits()))
    return AssignmentCheck(clauses=flags, satisfied=all(flags))


@dataclasses.dataclass
class DatasetEntry:
    file: str
    n: int
    m: int
    task: str
    seed: List[int]
    rejections: int = 0
    params: Dict[str, object] = dataclasses.field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


def write_manifest(
    out_dir: Path, entries: Sequence[DatasetEntry], header: Dict[str, object]
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dict(header)
    manifest["instances"] = [entry.to_dict() for entry in entries]
    path = out_dir / MANIFEST_NAME
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(dataset_dir: Path) -> Dict[str, object]:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"{path} not found")
    with path.open("r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as error:
            raise DatasetError(f"{path}: {error}") from error


def load_dataset(dataset_dir: Path) -> List[Tuple[DatasetEntry, CnfFormula]]:
    """Entries paired with parsed formulas, in manifest order."""
    dataset_dir = Path(dataset_dir)
    manifest = read_manifest(dataset_dir)
    loaded = []
    for raw in manifest.get("instances", []):
        entry = DatasetEntry(**raw)
        formula = read_cnf(dataset_dir / entry.file)
        if (formula.num_vars, formula.num_clauses) != (entry.n, entry.m):
            raise DatasetError(
                f"{entry.file}: manifest says n={entry.n} m={entry.m}, "
                f"file has n={formula.num_vars} m={formula.num_clauses}"
            )
        loaded.append((entry, formula))
    if not loaded:
        raise DatasetError(f"{dataset_dir} lists no instances")
    logger.info("Loaded %d instances from %s", len(loaded), dataset_dir)
    return loaded


def ingest_dimacs_dir(src: Path, out: Path, task_label: str = "external") -> Path:
    """Index externally produced .cnf files into the manifest layout."""
    src, out = Path(src), Path(out)
    files = sorted(src.glob("*.cnf"))
    if not files:
        raise DatasetError(f"no .cnf files under {src}")
    entries = []
    for index, path in enumerate(files):
        formula = read_cnf(path)
        name = f"{index:05d}_{task_label}.cnf"
        write_cnf(out / name, formula)
        entries.append(
            DatasetEntry(
                file=name,
                n=formula.num_vars,
                m=formula.num_clauses,
                task=task_label,
                seed=[],
                params={"source": path.name},
            )
        )
    logger.info("Ingested %d DIMACS files from %s into %s", len(entries), src, out)
    return write_manifest(
        out, entries, {"task": task_label, "count": len(entries), "source": str(src)}
    )
