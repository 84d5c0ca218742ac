from __future__ import annotations

import numpy as np
import pytest

from satlab.cnf import CnfFormula


def random_formula(
    rng: np.random.Generator, n: int, m: int, max_width: int = 3
) -> CnfFormula:
    clauses = []
    for _ in range(m):
        width = int(rng.integers(1, min(max_width, n) + 1))
        variables = rng.choice(n, size=width, replace=False) + 1
        signs = np.where(rng.random(width) < 0.5, -1, 1)
        clauses.append(tuple(int(v * s) for v, s in zip(variables, signs)))
    return CnfFormula(n, tuple(clauses))


def brute_force_sat(formula: CnfFormula) -> bool:
    n = formula.num_vars
    for code in range(2**n):
        bits = [(code >> i) & 1 for i in range(n)]
        if all(formula.evaluate(bits)):
            return True
    return False


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def two_clause() -> CnfFormula:
    """(x1 or not x2) and (x2)."""
    return CnfFormula(2, ((1, -2), (2,)))


@pytest.fixture
def tiny_formulas(rng) -> list:
    return [random_formula(rng, int(rng.integers(3, 7)), int(rng.integers(2, 8))) for _ in range(6)]
