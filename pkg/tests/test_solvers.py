import numpy as np
import pytest

from satlab import loss
from satlab.cnf import CnfFormula, check_assignment
from satlab.generators import gen_3sat_phase
from satlab.solvers import (
    DpllOracle,
    SearchBudget,
    SolveResult,
    _GsatState,
    _WatchedClauses,
    dpll_solve,
    format_witness,
    gsat_solve,
    solve,
)
from satlab.theorem import all_assignments

from .conftest import random_formula


def exhaustive_sat(formula: CnfFormula) -> bool:
    values = loss.per_clause_losses(formula, all_assignments(formula.num_vars).astype(float))
    return bool(np.any(np.all(values == 1.0, axis=0)))


def test_gsat_solves_units():
    result = gsat_solve(CnfFormula(2, ((1,), (2,))), rng=np.random.default_rng(0))
    assert result.status == "sat"
    np.testing.assert_array_equal(result.assignment, [1, 1])
    assert result.tries == 1
    assert result.flips <= 2


def test_gsat_gives_up_on_unsat():
    budget = SearchBudget(max_flips=50, max_tries=3)
    result = gsat_solve(CnfFormula(1, ((1,), (-1,))), budget, np.random.default_rng(0))
    assert result.status == "unknown"
    assert result.flips == 150
    assert result.tries == 3
    assert result.work == 150


def test_gsat_debug_recount_keeps_counters_consistent(rng):
    formula = random_formula(rng, 12, 80)
    result = gsat_solve(formula, SearchBudget(max_flips=2500, max_tries=2), rng, debug=True)
    assert result.status in ("sat", "unknown")


def test_gsat_incremental_state_matches_recount(rng):
    formula = random_formula(rng, 10, 40)
    state = _GsatState(formula, rng.integers(0, 2, 10).astype(np.int8))
    for var in rng.integers(0, 10, 300):
        state.flip(int(var))
        state.check()


def test_gsat_ignores_tautologies():
    formula = CnfFormula(2, ((1, -1), (2,)))
    result = gsat_solve(formula, rng=np.random.default_rng(1))
    assert result.status == "sat"
    assert result.assignment[1] == 1


def test_dpll_examples():
    assert dpll_solve(CnfFormula(1, ((1,), (-1,)))).status == "unsat"
    assert dpll_solve(CnfFormula(2, ((1, 2), (-1,), (-2,)))).status == "unsat"
    witness = dpll_solve(CnfFormula(2, ((1, -2),))).assignment
    assert check_assignment(CnfFormula(2, ((1, -2),)), witness).satisfied
    result = dpll_solve(CnfFormula(2, ((1, 2), (-1,))))
    assert result.status == "sat"
    np.testing.assert_array_equal(result.assignment, [0, 1])
    empty = dpll_solve(CnfFormula(3, ()))
    assert empty.status == "sat" and empty.decisions == 0


def test_dpll_budget():
    # four pigeons, three holes: x_{p,h} = 3p + h + 1
    clauses = [tuple(3 * p + h + 1 for h in range(3)) for p in range(4)]
    for h in range(3):
        for p in range(4):
            for q in range(p + 1, 4):
                clauses.append((-(3 * p + h + 1), -(3 * q + h + 1)))
    formula = CnfFormula(12, tuple(clauses))
    assert dpll_solve(formula).status == "unsat"
    assert dpll_solve(formula, SearchBudget(max_decisions=1)).status == "unknown"


def scan_propagate(formula: CnfFormula, assumptions):
    """Unit propagation by rescanning every clause until nothing changes; None on conflict."""
    values = {}
    for lit in assumptions:
        if values.get(abs(lit), lit > 0) != (lit > 0):
            return None
        values[abs(lit)] = lit > 0
    changed = True
    while changed:
        changed = False
        for clause in formula.clauses:
            if any(-lit in clause for lit in clause):
                continue
            if any(values.get(abs(lit)) == (lit > 0) for lit in clause):
                continue
            free = [lit for lit in clause if abs(lit) not in values]
            if not free:
                return None
            if len(free) == 1:
                values[abs(free[0])] = free[0] > 0
                changed = True
    return values


def test_watched_propagation_matches_clause_scan(rng):
    for _ in range(300):
        n = int(rng.integers(2, 10))
        formula = random_formula(rng, n, int(rng.integers(1, 4 * n + 1)))
        state = _WatchedClauses(formula)
        # the same state is reused after undo, so stale watches would show up here
        for _ in range(3):
            state.undo(0)
            chosen = rng.permutation(n)[: int(rng.integers(0, n))] + 1
            assumptions = [int(v) if rng.random() < 0.5 else -int(v) for v in chosen]
            ok = all(state.enqueue(lit) for lit in state.units + assumptions) and state.propagate()
            expected = scan_propagate(formula, assumptions)
            if expected is None:
                assert not ok
            else:
                assert ok
                assert state.values == expected


def test_watched_state_backtracks_to_partial_trail():
    formula = CnfFormula(4, ((-1, 2), (-2, 3), (3, 4)))
    state = _WatchedClauses(formula)
    assert state.enqueue(1) and state.propagate()
    assert state.values == {1: True, 2: True, 3: True}
    assert not state.open_literals()[0]
    state.undo(0)
    assert state.enqueue(-3) and state.propagate()
    assert state.values == {3: False, 2: False, 1: False, 4: True}
    state.undo(0)
    assert state.enqueue(-4) and state.propagate()
    assert state.values == {4: False, 3: True}
    pending, counts = state.open_literals()
    assert pending
    assert dict(counts) == {-1: 1, 2: 1}


def test_solvers_agree_with_exhaustive_search(rng):
    for _ in range(500):
        n = int(rng.integers(1, 13))
        formula = random_formula(rng, n, int(rng.integers(1, 4 * n + 1)))
        truth = exhaustive_sat(formula)
        dpll = dpll_solve(formula)
        assert dpll.status == ("sat" if truth else "unsat")
        if truth:
            assert check_assignment(formula, dpll.assignment).satisfied
        gsat = gsat_solve(formula, SearchBudget(max_flips=100, max_tries=2), rng)
        assert gsat.status in ("sat", "unknown")
        if gsat.status == "sat":
            assert truth


def test_oracle_uses_decision_budget():
    oracle = DpllOracle(max_decisions=5)
    assert oracle.budget.max_decisions == 5
    assert oracle(CnfFormula(1, ((1,),))).status == "sat"


def test_solve_dispatch():
    formula = CnfFormula(2, ((1, -2),))
    assert solve(formula, "gsat", seed=3).status == "sat"
    assert solve(formula, "dpll").status == "sat"
    with pytest.raises(ValueError):
        solve(formula, "cdcl")


def test_budget_and_result_validation():
    with pytest.raises(ValueError):
        SearchBudget(max_flips=0)
    with pytest.raises(ValueError):
        SolveResult("sat")
    budget = SearchBudget(max_flips=10, max_tries=4)
    assert budget.total_flips == 40
    assert SearchBudget.from_dict(budget.to_dict()) == budget


def test_format_witness():
    assert format_witness([1, 0, 1]) == "v 1 -2 3 0"
    assert format_witness([1, 0, 1], per_line=2) == "v 1 -2\nv 3 0"


@pytest.mark.slow
def test_gsat_on_phase_transition_instances():
    rng = np.random.default_rng(0)
    satisfiable = []
    while len(satisfiable) < 100:
        formula = gen_3sat_phase(50, rng)
        if dpll_solve(formula).status == "sat":
            satisfiable.append(formula)
    budget = SearchBudget(max_flips=50_000, max_tries=10)
    assert budget.total_flips == 500_000
    solved = sum(gsat_solve(f, budget, rng).status == "sat" for f in satisfiable)
    assert solved >= 80
