"""
Exact-arithmetic checks of the two identification results behind the query
mechanism.

* At binary points every clause value is exactly 0 or 1 and the formula
  value equals Boolean satisfaction.
* At the fractional point x_i = H / b_i, built from prime pairs (a_i, b_i)
  with b_i - a_i = H, each clause value V_c gives 1 - V_c as an irreducible
  fraction whose denominator lists the clause's variables and whose numerator
  separates positive literals (factors a_i) from negated ones (powers of H).
  The clause is recovered from its loss alone.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
from fractions import Fraction
from math import gcd, isqrt
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import loss as sat_loss
from .cnf import CnfFormula
from .errors import DecodeError

logger = logging.getLogger(__name__)

DEFAULT_GAP = 2


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    for d in range(3, isqrt(n) + 1, 2):
        if n % d == 0:
            return False
    return True


def primes_from(start: int = 2) -> Iterator[int]:
    """Unbounded incremental sieve; yields primes >= start in order."""
    composites: Dict[int, List[int]] = {}
    candidate = 2
    while True:
        if candidate not in composites:
            if candidate >= start:
                yield candidate
            composites[candidate * candidate] = [candidate]
        else:
            for prime in composites.pop(candidate):
                composites.setdefault(candidate + prime, []).append(prime)
        candidate += 1


@dataclasses.dataclass(frozen=True)
class PrimePair:
    a: int
    b: int

    def __post_init__(self) -> None:
        if not (is_prime(self.a) and is_prime(self.b)):
            raise ValueError(f"({self.a}, {self.b}) is not a pair of primes")

    @property
    def gap(self) -> int:
        return self.b - self.a


def gen_prime_pairs(n: int, gap: int = DEFAULT_GAP) -> List[PrimePair]:
    """First n pairs (a, a+gap), a > gap, greedily skipping a/b collisions."""
    if gap < 2 or gap % 2:
        raise ValueError("gap must be an even integer >= 2")
    if n < 0:
        raise ValueError("n must be nonnegative")
    pairs: List[PrimePair] = []
    chosen_a: set = set()
    chosen_b: set = set()
    for a in primes_from(gap + 1):
        if len(pairs) == n:
            break
        b = a + gap
        if not is_prime(b):
            continue
        if a in chosen_b or b in chosen_a:
            continue
        pairs.append(PrimePair(a, b))
        chosen_a.add(a)
        chosen_b.add(b)
    return pairs


@dataclasses.dataclass(frozen=True)
class RationalQuery:
    pairs: Tuple[PrimePair, ...]
    gap: int
    x: Tuple[Fraction, ...]

    @property
    def n(self) -> int:
        return len(self.pairs)

    def as_floats(self) -> np.ndarray:
        return np.array([float(value) for value in self.x], dtype=np.float64)


def build_identifying_query(n: int, gap: int = DEFAULT_GAP) -> RationalQuery:
    pairs = tuple(gen_prime_pairs(n, gap))
    return RationalQuery(pairs=pairs, gap=gap, x=tuple(Fraction(gap, p.b) for p in pairs))


@dataclasses.dataclass(frozen=True)
class RationalClauseLoss:
    clause: int
    value: Fraction

    @property
    def complement(self) -> Fraction:
        return 1 - self.value


def rational_clause_loss(formula: CnfFormula, query: RationalQuery, c: int) -> RationalClauseLoss:
    clause = formula.clauses[c]
    falsity = Fraction(1)
    for lit in clause:
        index = abs(lit) - 1
        if index >= query.n:
            raise ValueError(f"clause {c} uses variable {abs(lit)} beyond query size {query.n}")
        value = query.x[index]
        falsity *= value if lit < 0 else 1 - value
    return RationalClauseLoss(clause=c, value=1 - falsity)


def rational_clause_losses(formula: CnfFormula, query: RationalQuery) -> List[RationalClauseLoss]:
    return [rational_clause_loss(formula, query, c) for c in range(formula.num_clauses)]


def decode_clause(loss: RationalClauseLoss, query: RationalQuery) -> Tuple[int, ...]:
    """Recover the clause's literals, sorted by variable, from 1 - V_c."""
    rest = loss.complement
    numerator, denominator = rest.numerator, rest.denominator
    if numerator <= 0:
        raise DecodeError(f"clause {loss.clause}: 1 - V = {rest} is not positive")

    variables = []
    for index, pair in enumerate(query.pairs):
        if denominator % pair.b == 0:
            denominator //= pair.b
            if denominator % pair.b == 0:
                raise DecodeError(f"clause {loss.clause}: denominator repeats prime {pair.b}")
            variables.append(index)
    if denominator != 1:
        raise DecodeError(
            f"clause {loss.clause}: denominator has factor {denominator} outside the query primes"
        )

    chosen = set(variables)
    positive = set()
    for index, pair in enumerate(query.pairs):
        if numerator % pair.a:
            continue
        if index not in chosen:
            raise DecodeError(
                f"clause {loss.clause}: numerator factor {pair.a} names variable {index + 1} "
                "absent from the denominator"
            )
        numerator //= pair.a
        positive.add(index)

    negatives = len(variables) - len(positive)
    if numerator != query.gap**negatives:
        raise DecodeError(
            f"clause {loss.clause}: residual {numerator} is not {query.gap}^{negatives}"
        )
    return tuple(index + 1 if index in positive else -(index + 1) for index in variables)


def decode_formula(losses: Sequence[RationalClauseLoss], query: RationalQuery) -> CnfFormula:
    clauses = tuple(decode_clause(loss, query) for loss in losses)
    return CnfFormula(num_vars=max(query.n, 1), clauses=clauses)


def is_irreducible(loss: RationalClauseLoss) -> bool:
    """Fraction reduces on construction, so this recomputes the gcd explicitly."""
    rest = loss.complement
    return gcd(rest.numerator, rest.denominator) == 1


@dataclasses.dataclass
class Theorem1Report:
    assignments_checked: int = 0
    violations: List[str] = dataclasses.field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _boolean_clauses(formula: CnfFormula, bits: np.ndarray) -> np.ndarray:
    """m x d Boolean clause values computed without the loss kernels."""
    out = np.zeros((formula.num_clauses, bits.shape[1]), dtype=bool)
    for c, clause in enumerate(formula.clauses):
        for lit in clause:
            row = bits[abs(lit) - 1] == 1
            out[c] |= row if lit > 0 else ~row
    return out


def verify_theorem1(
    formula: CnfFormula, bits: np.ndarray, report: Optional[Theorem1Report] = None
) -> Theorem1Report:
    """Compare clause and formula values with Boolean evaluation at binary points.

    ``bits`` is a length-n vector or an n x d matrix of 0/1 columns.
    """
    if report is None:
        report = Theorem1Report()
    bits = np.asarray(bits, dtype=np.int8)
    if bits.ndim == 1:
        bits = bits[:, None]
    values = sat_loss.per_clause_losses(formula, bits.astype(np.float64))
    expected = _boolean_clauses(formula, bits)
    off_grid = (values != 0.0) & (values != 1.0)
    mismatch = (values == 1.0) != expected
    for c, j in zip(*np.nonzero(off_grid | mismatch)):
        report.violations.append(
            f"clause {c} at assignment {bits[:, j].tolist()}: V={values[c, j]!r}, "
            f"satisfied={bool(expected[c, j])}"
        )
    formula_values = np.prod(values, axis=0)
    satisfied = expected.all(axis=0)
    for j in np.flatnonzero(formula_values != satisfied.astype(np.float64)):
        report.violations.append(
            f"formula at assignment {bits[:, j].tolist()}: L={formula_values[j]!r}, "
            f"satisfied={bool(satisfied[j])}"
        )
    report.assignments_checked += bits.shape[1]
    return report


def all_assignments(n: int) -> np.ndarray:
    """n x 2^n matrix of every 0/1 assignment."""
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8).T


def theorem1_sweep(formulas: Sequence[CnfFormula], max_vars: int = 10) -> Theorem1Report:
    """Exhaustive check for every formula with at most ``max_vars`` variables."""
    report = Theorem1Report()
    skipped = 0
    for formula in formulas:
        if formula.num_vars > max_vars:
            skipped += 1
            continue
        verify_theorem1(formula, all_assignments(formula.num_vars), report)
    if skipped:
        logger.info("Skipped %d formulas with more than %d variables", skipped, max_vars)
    logger.info(
        "Checked %d binary assignments, %d violations",
        report.assignments_checked,
        len(report.violations),
    )
    return report


def float_bridge_error(formula: CnfFormula, query: RationalQuery) -> float:
    """Largest gap between float64 clause values and their exact rationals."""
    exact = rational_clause_losses(formula, query)
    if not exact:
        return 0.0
    approx = sat_loss.per_clause_losses(formula, query.as_floats()[: formula.num_vars])
    return max(abs(float(loss.value) - approx[loss.clause]) for loss in exact)


def demo_report(formula: CnfFormula, n: Optional[int] = None, gap: int = DEFAULT_GAP) -> str:
    n = formula.num_vars if n is None else n
    if n < formula.num_vars:
        raise ValueError(f"query size {n} smaller than the formula's {formula.num_vars} variables")
    query = build_identifying_query(n, gap)
    losses = rational_clause_losses(formula, query)
    decoded = decode_formula(losses, query)
    matches = all(
        set(original) == set(recovered)
        for original, recovered in zip(formula.clauses, decoded.clauses)
    )

    lines = [
        f"Prime pairs (gap {gap}, chosen greedily, skipping a/b collisions):",
        "  " + ", ".join(f"({p.a},{p.b})" for p in query.pairs),
        "Query: " + ", ".join(str(value) for value in query.x),
        "",
        "Clause losses:",
    ]
    for loss, original, recovered in zip(losses, formula.clauses, decoded.clauses):
        lines.append(
            f"  c{loss.clause}: {list(original)}  V = {loss.value}  "
            f"1-V = {loss.complement}  decoded {list(recovered)}"
        )
    lines.append("")
    lines.append(f"Round trip: {'exact' if matches else 'MISMATCH'} ({formula.num_clauses} clauses)")
    return "\n".join(lines)
