"""
Random instance generators for k-SAT, phase-transition 3-SAT, 3-Clique and
k-Coloring. Datasets keep only formulas the DPLL oracle proves satisfiable.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .cnf import CnfFormula, DatasetEntry, write_cnf, write_manifest
from .errors import DatasetGenerationStalled
from .solvers import DpllOracle, SolveResult
from .utils import instance_rng, round_half_up

logger = logging.getLogger(__name__)

TASKS = ("ksat", "3sat", "3clique", "kcoloring")
COLORING_CHOICES = (3, 4, 5)
STALL_FRACTION = 0.95
STALL_MIN_CANDIDATES = 20
MAX_CANDIDATES = 10_000

Oracle = Callable[[CnfFormula], SolveResult]


@dataclasses.dataclass
class GenSpec:
    task: str
    min_size: int
    max_size: int
    count: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError(f"empty size range [{self.min_size}, {self.max_size}]")
        floor = {"ksat": 3, "3sat": 5, "3clique": 3, "kcoloring": 3}[self.task]
        if self.min_size < floor:
            raise ValueError(f"{self.task} needs sizes >= {floor}")

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, object]) -> "GenSpec":
        return cls(**raw)


@dataclasses.dataclass(frozen=True)
class Graph:
    v: int
    edges: FrozenSet[Tuple[int, int]]

    def __post_init__(self) -> None:
        normalized = set()
        for u, w in self.edges:
            if u == w:
                raise ValueError(f"self-loop on vertex {u}")
            if not (0 <= u < self.v and 0 <= w < self.v):
                raise ValueError(f"edge ({u}, {w}) outside [0, {self.v})")
            normalized.add((min(u, w), max(u, w)))
        object.__setattr__(self, "edges", frozenset(normalized))

    def adjacent(self, u: int, w: int) -> bool:
        return (min(u, w), max(u, w)) in self.edges

    def neighbors(self) -> List[List[int]]:
        adj: List[List[int]] = [[] for _ in range(self.v)]
        for u, w in sorted(self.edges):
            adj[u].append(w)
            adj[w].append(u)
        return adj


def phase_transition_clauses(n: int) -> int:
    return round_half_up(4.258 * n + 58.26 * n ** (-2.0 / 3.0))


def clique_edge_probability(v: int) -> float:
    """Edge probability making about one triangle expected in G(v, p)."""
    return 3 ** (1.0 / 3.0) / (v * (2 - 3 * v + v * v)) ** (1.0 / 3.0)


def coloring_edge_probability(v: int) -> float:
    return (1 + 0.2) * math.log(v) / v + 0.05


def _sample_clause(num_vars: int, rng) -> Tuple[int, ...]:
    k = 1 + int(rng.binomial(1, 0.7)) + int(rng.geometric(0.4))
    k = min(k, num_vars)
    variables = np.asarray(rng.choice(num_vars, size=k, replace=False)) + 1
    negate = np.asarray(rng.random(k)) < 0.5
    return tuple(int(-v if neg else v) for v, neg in zip(variables, negate))


def gen_ksat(num_vars: int, rng: np.random.Generator, oracle: Optional[Oracle] = None) -> CnfFormula:
    """Add random clauses until the formula turns unsatisfiable, then drop the last.

    The oracle only runs when the new clause is falsified by the current
    witness; otherwise the witness still satisfies the longer formula.
    """
    if num_vars < 3:
        raise ValueError("k-SAT needs num_vars >= 3")
    oracle = oracle or DpllOracle()
    clauses: List[Tuple[int, ...]] = []
    witness: Optional[np.ndarray] = None
    while True:
        clause = _sample_clause(num_vars, rng)
        if witness is not None and any(
            (witness[abs(lit) - 1] == 1) == (lit > 0) for lit in clause
        ):
            clauses.append(clause)
            continue
        result = oracle(CnfFormula(num_vars, tuple(clauses + [clause])))
        if result.status != "sat":
            break
        clauses.append(clause)
        witness = result.assignment
    return CnfFormula(num_vars, tuple(clauses))


def gen_3sat_phase(num_vars: int, rng: np.random.Generator) -> CnfFormula:
    if num_vars < 5:
        raise ValueError("phase-transition 3-SAT needs num_vars >= 5")
    clauses = []
    for _ in range(phase_transition_clauses(num_vars)):
        variables = rng.choice(num_vars, size=3, replace=False) + 1
        negate = rng.random(3) < 0.5
        clauses.append(tuple(int(-v if neg else v) for v, neg in zip(variables, negate)))
    return CnfFormula(num_vars, tuple(clauses))


def gen_er_graph(v: int, p: float, rng: np.random.Generator) -> Graph:
    if v < 3:
        raise ValueError("graphs need v >= 3")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability {p} outside [0, 1]")
    pairs = list(itertools.combinations(range(v), 2))
    draws = rng.random(len(pairs))
    return Graph(v, frozenset(pair for pair, draw in zip(pairs, draws) if draw < p))


def _at_most_one(literals: Sequence[int]) -> List[Tuple[int, ...]]:
    return [(-a, -b) for a, b in itertools.combinations(literals, 2)]


def encode_kclique(graph: Graph, k: int) -> CnfFormula:
    """Slot s holds vertex u when x_{s,u} (variable s*v + u + 1) is true."""
    if k < 2 or graph.v < k:
        raise ValueError(f"need 2 <= k <= v, got k={k}, v={graph.v}")
    v = graph.v

    def x(s: int, u: int) -> int:
        return s * v + u + 1

    clauses: List[Tuple[int, ...]] = []
    for s in range(k):
        clauses.append(tuple(x(s, u) for u in range(v)))
        clauses.extend(_at_most_one([x(s, u) for u in range(v)]))
    for u, w in itertools.combinations(range(v), 2):
        if graph.adjacent(u, w):
            continue
        for s, t in itertools.combinations(range(k), 2):
            clauses.append((-x(s, u), -x(t, w)))
            clauses.append((-x(s, w), -x(t, u)))
    for u in range(v):
        for s, t in itertools.combinations(range(k), 2):
            clauses.append((-x(s, u), -x(t, u)))
    return CnfFormula(k * v, tuple(clauses))


def encode_kcoloring(graph: Graph, k: int) -> CnfFormula:
    """Vertex u takes color c when x_{u,c} (variable u*k + c + 1) is true."""
    if k < 2:
        raise ValueError("need k >= 2 colors")

    def x(u: int, c: int) -> int:
        return u * k + c + 1

    clauses: List[Tuple[int, ...]] = []
    for u in range(graph.v):
        clauses.append(tuple(x(u, c) for c in range(k)))
        clauses.extend(_at_most_one([x(u, c) for c in range(k)]))
    for u, w in sorted(graph.edges):
        for c in range(k):
            clauses.append((-x(u, c), -x(w, c)))
    return CnfFormula(graph.v * k, tuple(clauses))


def has_triangle(graph: Graph) -> bool:
    return any(
        graph.adjacent(a, b) and graph.adjacent(b, c) and graph.adjacent(a, c)
        for a, b, c in itertools.combinations(range(graph.v), 3)
    )


def is_k_colorable(graph: Graph, k: int) -> bool:
    """Exhaustive backtracking over vertex colors."""
    adj = graph.neighbors()
    colors = [-1] * graph.v

    def place(u: int) -> bool:
        if u == graph.v:
            return True
        used = {colors[w] for w in adj[u] if colors[w] >= 0}
        for c in range(k):
            if c not in used:
                colors[u] = c
                if place(u + 1):
                    return True
        colors[u] = -1
        return False

    return place(0)


def is_connected(graph: Graph) -> bool:
    adj = graph.neighbors()
    seen = {0}
    queue = deque([0])
    while queue:
        for w in adj[queue.popleft()]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == graph.v


@dataclasses.dataclass
class _Generated:
    formula: CnfFormula
    rejections: int
    params: Dict[str, object]


def _candidate(task: str, size: int, rng: np.random.Generator) -> Tuple[Optional[CnfFormula], Dict[str, object]]:
    if task == "3sat":
        return gen_3sat_phase(size, rng), {"n": size}
    if task == "3clique":
        p = clique_edge_probability(size)
        graph = gen_er_graph(size, p, rng)
        return encode_kclique(graph, 3), {"v": size, "k": 3, "p": p, "edges": len(graph.edges)}
    k = int(rng.choice(COLORING_CHOICES))
    p = coloring_edge_probability(size)
    graph = gen_er_graph(size, p, rng)
    params = {"v": size, "k": k, "p": p, "edges": len(graph.edges)}
    if not is_connected(graph):
        return None, params
    return encode_kcoloring(graph, k), params


def _generate_one(spec: GenSpec, index: int, oracle: Oracle) -> _Generated:
    rng = instance_rng(spec.seed, index)
    size = int(rng.integers(spec.min_size, spec.max_size + 1))
    if spec.task == "ksat":
        return _Generated(gen_ksat(size, rng, oracle), 0, {"n": size})

    rejections = exhausted = 0
    for candidates in range(1, MAX_CANDIDATES + 1):
        formula, params = _candidate(spec.task, size, rng)
        if formula is not None:
            result = oracle(formula)
            if result.status == "sat":
                return _Generated(formula, rejections, params)
            exhausted += result.status == "unknown"
        rejections += 1
        logger.debug("instance %d: rejected candidate %d (%s)", index, candidates, params)
        if candidates >= STALL_MIN_CANDIDATES and exhausted > STALL_FRACTION * candidates:
            raise DatasetGenerationStalled(
                f"instance {index}: oracle budget exhausted on {exhausted}/{candidates} candidates"
            )
    raise DatasetGenerationStalled(
        f"instance {index}: no satisfiable candidate in {MAX_CANDIDATES} draws"
    )


def gen_dataset(
    spec: GenSpec,
    out_dir: Path,
    oracle: Optional[Oracle] = None,
    workers: int = 1,
    progress: bool = False,
) -> Path:
    """Write spec.count satisfiable instances plus manifest.json; returns the manifest path.

    Instance i draws from its own stream (seed, i), so any worker count
    produces the same files.
    """
    out_dir = Path(out_dir)
    oracle = oracle or DpllOracle()

    def build(index: int) -> _Generated:
        return _generate_one(spec, index, oracle)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
        generated = list(
            tqdm(
                executor.map(build, range(spec.count)),
                total=spec.count,
                desc=f"generate {spec.task}",
                disable=not progress,
            )
        )

    entries = []
    for index, item in enumerate(generated):
        name = f"{index:05d}_{spec.task}.cnf"
        write_cnf(out_dir / name, item.formula)
        entries.append(
            DatasetEntry(
                file=name,
                n=item.formula.num_vars,
                m=item.formula.num_clauses,
                task=spec.task,
                seed=[spec.seed, index],
                rejections=item.rejections,
                params=item.params,
            )
        )
    total_rejections = sum(entry.rejections for entry in entries)
    logger.info(
        "Wrote %d %s instances to %s (%d rejected candidates)",
        len(entries),
        spec.task,
        out_dir,
        total_rejections,
    )
    return write_manifest(
        out_dir,
        entries,
        {"task": spec.task, "count": spec.count, "spec": spec.to_dict(), "rejections": total_rejections},
    )
