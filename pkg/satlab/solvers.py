from __future__ import annotations

import dataclasses
import logging
from collections import Counter, defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .base import Timer
from .cnf import CnfFormula, check_assignment

logger = logging.getLogger(__name__)

SOLVERS = ("gsat", "dpll")
STATUSES = ("sat", "unsat", "unknown")
RECOUNT_EVERY = 1000


@dataclasses.dataclass
class SearchBudget:
    """Flip budget for GSAT, decision budget for DPLL, optional wall-clock cap."""

    max_flips: int = 50_000
    max_tries: int = 10
    max_decisions: int = 1_000_000
    time_limit: Optional[float] = None

    def __post_init__(self) -> None:
        if self.max_flips < 1 or self.max_tries < 1 or self.max_decisions < 1:
            raise ValueError("search budgets must be positive")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError("time_limit must be positive")

    @property
    def total_flips(self) -> int:
        return self.max_flips * self.max_tries

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, object]) -> "SearchBudget":
        return cls(**raw)


@dataclasses.dataclass
class SolveResult:
    status: str
    assignment: Optional[np.ndarray] = None
    flips: int = 0
    decisions: int = 0
    tries: int = 0
    seconds: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown solve status {self.status!r}")
        if self.status == "sat" and self.assignment is None:
            raise ValueError("sat result needs a witness")

    @property
    def work(self) -> int:
        return self.flips or self.decisions


class _GsatState:
    """Per-clause true-literal counts with incremental make/break tables."""

    def __init__(self, formula: CnfFormula, bits: np.ndarray) -> None:
        # Tautologies are always satisfied and would double-count one variable.
        self.clauses = [
            [(abs(lit) - 1, lit > 0) for lit in clause]
            for clause in formula.clauses
            if not any(-lit in clause for lit in clause)
        ]
        self.occurrences: List[List[Tuple[int, bool]]] = [[] for _ in range(formula.num_vars)]
        for c, clause in enumerate(self.clauses):
            for var, positive in clause:
                self.occurrences[var].append((c, positive))
        self.bits = bits
        self.recount()

    def _true(self, var: int, positive: bool) -> bool:
        return bool(self.bits[var]) == positive

    def recount(self) -> None:
        n = self.bits.size
        self.true_count = np.zeros(len(self.clauses), dtype=np.int64)
        self.make = np.zeros(n, dtype=np.int64)
        self.breaks = np.zeros(n, dtype=np.int64)
        for c, clause in enumerate(self.clauses):
            true_vars = [var for var, positive in clause if self._true(var, positive)]
            self.true_count[c] = len(true_vars)
            if not true_vars:
                for var, _ in clause:
                    self.make[var] += 1
            elif len(true_vars) == 1:
                self.breaks[true_vars[0]] += 1
        self.unsat = int(np.count_nonzero(self.true_count == 0))

    def _sole_true(self, c: int) -> int:
        for var, positive in self.clauses[c]:
            if self._true(var, positive):
                return var
        raise RuntimeError(f"clause {c} has no true literal")

    def flip(self, var: int) -> None:
        self.bits[var] ^= 1
        for c, positive in self.occurrences[var]:
            if self._true(var, positive):
                self.true_count[c] += 1
                if self.true_count[c] == 1:
                    self.unsat -= 1
                    for other, _ in self.clauses[c]:
                        self.make[other] -= 1
                    self.breaks[var] += 1
                elif self.true_count[c] == 2:
                    for other, other_positive in self.clauses[c]:
                        if other != var and self._true(other, other_positive):
                            self.breaks[other] -= 1
                            break
            else:
                self.true_count[c] -= 1
                if self.true_count[c] == 0:
                    self.unsat += 1
                    self.breaks[var] -= 1
                    for other, _ in self.clauses[c]:
                        self.make[other] += 1
                elif self.true_count[c] == 1:
                    self.breaks[self._sole_true(c)] += 1

    def check(self) -> None:
        make, breaks, unsat = self.make.copy(), self.breaks.copy(), self.unsat
        self.recount()
        if unsat != self.unsat or not (
            np.array_equal(make, self.make) and np.array_equal(breaks, self.breaks)
        ):
            raise RuntimeError("GSAT incremental counters drifted from a full recount")


def gsat_solve(
    formula: CnfFormula,
    budget: Optional[SearchBudget] = None,
    rng: Optional[np.random.Generator] = None,
    debug: bool = False,
) -> SolveResult:
    """Pure GSAT: greedy best flip, uniform tie-break, random restarts."""
    budget = budget or SearchBudget()
    rng = rng if rng is not None else np.random.default_rng(0)
    flips = 0
    with Timer() as timer:
        for attempt in range(1, budget.max_tries + 1):
            state = _GsatState(formula, rng.integers(0, 2, formula.num_vars).astype(np.int8))
            for _ in range(budget.max_flips):
                if state.unsat == 0:
                    break
                if budget.time_limit is not None and timer.elapsed > budget.time_limit:
                    return SolveResult("unknown", flips=flips, tries=attempt, seconds=timer.elapsed)
                score = state.make - state.breaks
                candidates = np.flatnonzero(score == score.max())
                state.flip(int(rng.choice(candidates)))
                flips += 1
                if debug and flips % RECOUNT_EVERY == 0:
                    state.check()
            if state.unsat == 0:
                bits = state.bits.copy()
                if not check_assignment(formula, bits).satisfied:
                    raise RuntimeError("GSAT produced a witness that fails the check")
                return SolveResult("sat", bits, flips=flips, tries=attempt, seconds=timer.elapsed)
            logger.debug("GSAT restart %d after %d flips (%d unsat)", attempt, flips, state.unsat)
    return SolveResult("unknown", flips=flips, tries=budget.max_tries, seconds=timer.elapsed)


class _WatchedClauses:
    """Clause database with two watched literals per clause and an assignment trail.

    Positions 0 and 1 of every stored clause are its watches. A watch only
    moves when its literal becomes false, so backtracking never touches the
    watch lists.
    """

    def __init__(self, formula: CnfFormula) -> None:
        self.scan = [c for c in formula.clauses if not any(-lit in c for lit in c)]
        self.values: Dict[int, bool] = {}
        self.trail: List[int] = []
        self.head = 0
        self.units: List[int] = []
        self.clauses: List[List[int]] = []
        self.watches: Dict[int, List[int]] = defaultdict(list)
        for clause in self.scan:
            if len(clause) == 1:
                self.units.append(clause[0])
                continue
            self.watches[clause[0]].append(len(self.clauses))
            self.watches[clause[1]].append(len(self.clauses))
            self.clauses.append(list(clause))

    def literal_value(self, lit: int) -> Optional[bool]:
        value = self.values.get(abs(lit))
        return None if value is None else value == (lit > 0)

    def enqueue(self, lit: int) -> bool:
        """Make ``lit`` true; False when it is already false."""
        current = self.literal_value(lit)
        if current is not None:
            return current
        self.values[abs(lit)] = lit > 0
        self.trail.append(lit)
        return True

    def propagate(self) -> bool:
        """Unit propagation over the unprocessed trail; False on conflict."""
        while self.head < len(self.trail):
            false_lit = -self.trail[self.head]
            self.head += 1
            watching = self.watches[false_lit]
            kept: List[int] = []
            for position, index in enumerate(watching):
                lits = self.clauses[index]
                if lits[0] == false_lit:
                    lits[0], lits[1] = lits[1], lits[0]
                if self.literal_value(lits[0]) is True:
                    kept.append(index)
                    continue
                for k in range(2, len(lits)):
                    if self.literal_value(lits[k]) is not False:
                        lits[1], lits[k] = lits[k], lits[1]
                        self.watches[lits[1]].append(index)
                        break
                else:
                    kept.append(index)
                    if not self.enqueue(lits[0]):
                        kept.extend(watching[position + 1 :])
                        self.watches[false_lit] = kept
                        return False
            self.watches[false_lit] = kept
        return True

    def undo(self, length: int) -> None:
        while len(self.trail) > length:
            del self.values[abs(self.trail.pop())]
        self.head = min(self.head, length)

    def open_literals(self) -> Tuple[bool, Counter]:
        """Whether any clause is still open, and free-literal counts over open clauses.

        Counts follow clause order, so ``most_common`` ties go to the first-seen literal.
        """
        counts: Counter = Counter()
        pending = False
        for clause in self.scan:
            free = []
            for lit in clause:
                value = self.literal_value(lit)
                if value is True:
                    break
                if value is None:
                    free.append(lit)
            else:
                pending = True
                counts.update(free)
        return pending, counts


def dpll_solve(formula: CnfFormula, budget: Optional[SearchBudget] = None) -> SolveResult:
    """DPLL with watched-literal unit propagation and pure literals.

    Iterative with chronological backtracking over a decision stack; branches
    on the most frequent unassigned variable, positive polarity first.
    """
    budget = budget or SearchBudget()
    state = _WatchedClauses(formula)
    # (trail length before the decision, variable, negative branch taken)
    levels: List[Tuple[int, int, bool]] = []
    decisions = 0
    with Timer() as timer:
        ok = all(state.enqueue(lit) for lit in state.units)
        while True:
            if ok and state.propagate():
                pending, counts = state.open_literals()
                if not pending:
                    bits = np.array(
                        [1 if state.values.get(v, False) else 0 for v in range(1, formula.num_vars + 1)],
                        dtype=np.int8,
                    )
                    if not check_assignment(formula, bits).satisfied:
                        raise RuntimeError("DPLL produced a witness that fails the check")
                    return SolveResult("sat", bits, decisions=decisions, seconds=timer.elapsed)
                pure = [lit for lit in counts if -lit not in counts]
                if pure:
                    for lit in pure:
                        state.enqueue(lit)
                    continue
                over_time = budget.time_limit is not None and timer.elapsed > budget.time_limit
                if decisions >= budget.max_decisions or over_time:
                    logger.debug("DPLL budget exhausted after %d decisions", decisions)
                    return SolveResult("unknown", decisions=decisions, seconds=timer.elapsed)
                variables: Counter = Counter()
                for lit, count in counts.items():
                    variables[abs(lit)] += count
                var = variables.most_common(1)[0][0]
                decisions += 1
                levels.append((len(state.trail), var, False))
                ok = state.enqueue(var)
                continue
            while levels and levels[-1][2]:
                levels.pop()
            if not levels:
                return SolveResult("unsat", decisions=decisions, seconds=timer.elapsed)
            length, var, _ = levels.pop()
            state.undo(length)
            levels.append((length, var, True))
            ok = state.enqueue(-var)


class DpllOracle:
    """Satisfiability oracle for generators: DPLL under a decision budget."""

    def __init__(self, max_decisions: int = 1_000_000) -> None:
        self.budget = SearchBudget(max_decisions=max_decisions)

    def __call__(self, formula: CnfFormula) -> SolveResult:
        return dpll_solve(formula, self.budget)


def solve(
    formula: CnfFormula,
    solver: str = "dpll",
    budget: Optional[SearchBudget] = None,
    seed: int = 0,
    debug: bool = False,
) -> SolveResult:
    if solver == "gsat":
        return gsat_solve(formula, budget, np.random.default_rng(seed), debug=debug)
    if solver == "dpll":
        return dpll_solve(formula, budget)
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def format_witness(bits: Sequence[int], per_line: int = 10) -> str:
    """DIMACS ``v`` lines terminated by 0."""
    literals = [str(i + 1) if bit else str(-(i + 1)) for i, bit in enumerate(bits)]
    literals.append("0")
    return "\n".join(
        "v " + " ".join(literals[i : i + per_line]) for i in range(0, len(literals), per_line)
    )
