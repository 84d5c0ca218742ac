import itertools
from decimal import ROUND_FLOOR, Decimal, localcontext

import numpy as np
import pytest

from satlab.cnf import CnfFormula, load_dataset, read_manifest
from satlab.errors import DatasetGenerationStalled
from satlab.generators import (
    GenSpec,
    Graph,
    _sample_clause,
    clique_edge_probability,
    coloring_edge_probability,
    encode_kclique,
    encode_kcoloring,
    gen_3sat_phase,
    gen_dataset,
    gen_er_graph,
    gen_ksat,
    has_triangle,
    is_connected,
    is_k_colorable,
    phase_transition_clauses,
)
from satlab.solvers import SolveResult, dpll_solve

from .conftest import brute_force_sat


class StubRng:
    """Fixed draws for the clause sampler."""

    def binomial(self, n, p):
        return 1

    def geometric(self, p):
        return 1

    def choice(self, n, size, replace):
        return np.array([0, 2, 4])[:size]

    def random(self, size):
        return np.array([0.1, 0.9, 0.3])[:size]


def test_sample_clause_with_stubbed_draws():
    assert _sample_clause(10, StubRng()) == (-1, 3, -5)


def test_clause_width_distribution():
    rng = np.random.default_rng(0)
    widths = [len(_sample_clause(200, rng)) for _ in range(20_000)]
    assert np.mean(widths) == pytest.approx(4.2, abs=0.05)
    assert min(widths) >= 2


def test_clause_width_is_capped():
    rng = np.random.default_rng(1)
    assert max(len(_sample_clause(3, rng)) for _ in range(500)) == 3


def test_ksat_is_satisfiable():
    rng = np.random.default_rng(5)
    for n in (3, 5, 8):
        formula = gen_ksat(n, rng)
        assert formula.num_vars == n
        assert formula.num_clauses >= 1
        assert brute_force_sat(formula)


def test_ksat_needs_three_variables():
    with pytest.raises(ValueError):
        gen_ksat(2, np.random.default_rng(0))


def test_phase_transition_clause_counts():
    assert phase_transition_clauses(50) == 217
    assert phase_transition_clauses(100) == 429
    for n in range(5, 406):
        assert phase_transition_clauses(n) > 4.258 * n


def decimal_clause_count(n: int) -> int:
    with localcontext() as ctx:
        ctx.prec = 50
        exact = Decimal("4.258") * n + Decimal("58.26") / Decimal(n) ** (Decimal(2) / Decimal(3))
        return int((exact + Decimal("0.5")).to_integral_value(rounding=ROUND_FLOOR))


def test_phase_transition_counts_match_decimal_arithmetic():
    assert decimal_clause_count(50) == 217
    assert decimal_clause_count(100) == 429
    for n in range(5, 406):
        assert phase_transition_clauses(n) == decimal_clause_count(n), n


def test_3sat_phase_instances():
    formula = gen_3sat_phase(20, np.random.default_rng(2))
    assert formula.num_clauses == phase_transition_clauses(20)
    assert all(len(clause) == 3 and len({abs(l) for l in clause}) == 3 for clause in formula.clauses)
    with pytest.raises(ValueError):
        gen_3sat_phase(4, np.random.default_rng(0))


def test_er_graph_boundaries():
    rng = np.random.default_rng(0)
    assert gen_er_graph(6, 0.0, rng).edges == frozenset()
    assert len(gen_er_graph(6, 1.0, rng).edges) == 15
    with pytest.raises(ValueError):
        gen_er_graph(6, 1.5, rng)


def test_edge_probabilities():
    assert clique_edge_probability(4) == pytest.approx(0.5)
    assert clique_edge_probability(3) == pytest.approx(0.5 ** (1 / 3))
    assert coloring_edge_probability(10) == pytest.approx(1.2 * np.log(10) / 10 + 0.05)


def test_graph_normalizes_edges():
    graph = Graph(3, frozenset({(2, 0), (1, 2)}))
    assert graph.edges == frozenset({(0, 2), (1, 2)})
    assert graph.adjacent(2, 0)
    assert is_connected(graph)
    assert not is_connected(Graph(3, frozenset({(0, 1)})))
    with pytest.raises(ValueError):
        Graph(3, frozenset({(1, 1)}))


def _random_graphs(seed, count, v_range=(3, 7)):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        v = int(rng.integers(*v_range))
        yield gen_er_graph(v, float(rng.uniform(0.2, 0.8)), rng)


def test_kclique_encoding_matches_triangle_search():
    for graph in _random_graphs(3, 40):
        result = dpll_solve(encode_kclique(graph, 3))
        assert (result.status == "sat") == has_triangle(graph)
        if result.status == "sat":
            bits = result.assignment.reshape(3, graph.v)
            members = [int(np.flatnonzero(row)[0]) for row in bits]
            assert len(set(members)) == 3
            assert all(graph.adjacent(a, b) for a, b in itertools.combinations(members, 2))


def test_kclique_variable_layout():
    formula = encode_kclique(Graph(3, frozenset({(0, 1), (1, 2), (0, 2)})), 3)
    assert formula.num_vars == 9
    assert formula.clauses[0] == (1, 2, 3)


@pytest.mark.parametrize("k", [2, 3])
def test_kcoloring_encoding_matches_backtracking(k):
    for graph in _random_graphs(4 + k, 40):
        result = dpll_solve(encode_kcoloring(graph, k))
        assert (result.status == "sat") == is_k_colorable(graph, k)
        if result.status == "sat":
            colors = result.assignment.reshape(graph.v, k).argmax(axis=1)
            assert all(colors[u] != colors[w] for u, w in graph.edges)


def test_gen_spec_validation():
    with pytest.raises(ValueError):
        GenSpec("4sat", 5, 10, 3)
    with pytest.raises(ValueError):
        GenSpec("3sat", 4, 10, 3)
    with pytest.raises(ValueError):
        GenSpec("ksat", 8, 5, 3)


@pytest.mark.parametrize(
    "task, lo, hi", [("ksat", 3, 6), ("3sat", 5, 8), ("3clique", 4, 6), ("kcoloring", 4, 7)]
)
def test_dataset_is_reproducible_across_workers(tmp_path, task, lo, hi):
    spec = GenSpec(task, lo, hi, count=4, seed=3)
    gen_dataset(spec, tmp_path / "serial", workers=1)
    gen_dataset(spec, tmp_path / "threads", workers=3)
    serial = load_dataset(tmp_path / "serial")
    threaded = load_dataset(tmp_path / "threads")
    assert [f for _, f in serial] == [f for _, f in threaded]
    gen_dataset(spec, tmp_path / "rerun", workers=2)
    names = sorted(p.name for p in (tmp_path / "serial").iterdir())
    assert sorted(p.name for p in (tmp_path / "rerun").iterdir()) == names
    for name in names:
        assert (tmp_path / "rerun" / name).read_bytes() == (tmp_path / "serial" / name).read_bytes(), name
        assert (tmp_path / "threads" / name).read_bytes() == (tmp_path / "serial" / name).read_bytes(), name
    for entry, formula in serial:
        assert lo <= entry.params.get("n", entry.params.get("v")) <= hi
        assert dpll_solve(formula).status == "sat"
    manifest = read_manifest(tmp_path / "serial")
    assert manifest["task"] == task
    assert [e["file"] for e in manifest["instances"]] == [f"{i:05d}_{task}.cnf" for i in range(4)]
    assert manifest["instances"][2]["seed"] == [3, 2]


def test_stalled_generation_raises(tmp_path):
    calls = []

    def exhausted_oracle(formula: CnfFormula) -> SolveResult:
        calls.append(formula)
        return SolveResult("unknown")

    with pytest.raises(DatasetGenerationStalled, match="20/20"):
        gen_dataset(GenSpec("3sat", 5, 5, 1), tmp_path, oracle=exhausted_oracle)
    assert len(calls) == 20


def test_small_graph_examples():
    path = Graph(3, frozenset({(0, 1), (1, 2)}))
    triangle = Graph(3, frozenset({(0, 1), (1, 2), (0, 2)}))
    assert dpll_solve(encode_kclique(path, 3)).status == "unsat"
    assert dpll_solve(encode_kclique(triangle, 3)).status == "sat"
    assert dpll_solve(encode_kcoloring(triangle, 3)).status == "sat"
    assert dpll_solve(encode_kcoloring(triangle, 2)).status == "unsat"
