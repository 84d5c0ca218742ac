import io

import numpy as np
import pytest

from satlab.cnf import (
    Assignment,
    CnfFormula,
    DatasetEntry,
    batch_formulas,
    build_factor_graph,
    check_assignment,
    discretize,
    ingest_dimacs_dir,
    load_dataset,
    make_batch,
    parse_dimacs,
    read_cnf,
    read_manifest,
    write_cnf,
    write_dimacs,
    write_manifest,
)
from satlab.errors import (
    AssignmentLengthError,
    DatasetError,
    DimacsParseError,
    OversizedInstanceError,
)


def test_parse_basic():
    formula = parse_dimacs("p cnf 2 2\n1 -2 0\n2 0\n")
    assert formula.num_vars == 2
    assert formula.clauses == ((1, -2), (2,))


def test_parse_skips_comments_and_reads_streams():
    formula = parse_dimacs(io.StringIO("c comment\np cnf 1 1\n1 0\n"))
    assert formula.num_vars == 1
    assert formula.clauses == ((1,),)


def test_parse_drops_duplicate_literals():
    assert parse_dimacs("p cnf 2 1\n1 1 -2 0\n").clauses == ((1, -2),)


def test_parse_clause_split_across_lines():
    assert parse_dimacs("p cnf 3 1\n1 2\n3 0\n").clauses == ((1, 2, 3),)


def test_literal_out_of_range_names_line():
    with pytest.raises(DimacsParseError, match="literal 2 exceeds declared variable count 1") as info:
        parse_dimacs("p cnf 1 1\n2 0\n")
    assert info.value.line_number == 2


def test_read_cnf_keeps_line_number(tmp_path):
    path = tmp_path / "bad.cnf"
    path.write_text("c header\np cnf 1 1\n2 0\n")
    with pytest.raises(DimacsParseError, match="bad.cnf: literal 2 exceeds") as info:
        read_cnf(path)
    assert info.value.line_number == 3
    assert str(info.value).startswith("line 3: ")


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("1 0\n", "before 'p cnf' header"),
        ("c only\n", "missing 'p cnf' header"),
        ("p cnf x 1\n1 0\n", "deformed header"),
        ("p cnf 2 2\n1 0\n", "declares 2 clauses"),
        ("p cnf 2 1\n0\n", "empty clause"),
        ("p cnf 2 1\n1 2\n", "not terminated"),
    ],
)
def test_parse_errors(text, fragment):
    with pytest.raises(DimacsParseError, match=fragment):
        parse_dimacs(text)


def test_write_dimacs():
    assert write_dimacs(CnfFormula(2, ((1, -2),))) == "p cnf 2 1\n1 -2 0\n"
    assert write_dimacs(CnfFormula(1, ((1,), (-1,)))) == "p cnf 1 2\n1 0\n-1 0\n"


def test_dimacs_round_trip(tiny_formulas):
    for formula in tiny_formulas:
        assert parse_dimacs(write_dimacs(formula)) == formula


def test_formula_validation():
    with pytest.raises(ValueError):
        CnfFormula(2, ((3,),))
    with pytest.raises(ValueError):
        CnfFormula(2, ((),))


def test_factor_graph_incidence():
    graph = build_factor_graph(CnfFormula(2, ((1, -2), (2,))))
    assert set(zip(*graph.a_pos.nonzero())) == {(0, 0), (1, 1)}
    assert set(zip(*graph.a_neg.nonzero())) == {(1, 0)}
    assert graph.num_edges == 3


def test_unused_variable_has_empty_rows():
    graph = build_factor_graph(CnfFormula(3, ((1, 2),)))
    assert graph.a_pos[2].nnz == 0
    assert graph.a_neg[2].nnz == 0


def test_tautology_sets_both_matrices():
    graph = build_factor_graph(CnfFormula(1, ((1, -1),)))
    assert graph.a_pos[0, 0] == 1
    assert graph.a_neg[0, 0] == 1


def test_literal_incidence_stacks_positive_over_negative():
    graph = build_factor_graph(CnfFormula(2, ((1, -2), (2,))))
    stacked = graph.literal_incidence.toarray()
    np.testing.assert_array_equal(stacked[:2], graph.a_pos.toarray())
    np.testing.assert_array_equal(stacked[2:], graph.a_neg.toarray())


def test_batching_packs_under_budget():
    a = CnfFormula(3, ((1, 2), (-3,), (2, 3)))  # n+m = 6
    b = CnfFormula(4, ((1,), (2,), (-4,)))  # n+m = 7
    (batch,) = batch_formulas([a, b], 20)
    assert batch.var_offsets == (0, 3, 7)
    assert batch.var_slice(1) == slice(3, 7)
    assert batch.clause_slice(1) == slice(3, 6)
    assert batch.graph.n == 7 and batch.graph.m == 6
    assert len(batch_formulas([a, b], 10)) == 2


def test_batching_is_first_fit():
    big = CnfFormula(6, tuple((i,) for i in range(1, 5)))  # 10
    small = CnfFormula(1, ((1,),))  # 2
    batches = batch_formulas([big, big, small], 12)
    assert [b.instance_ids for b in batches] == [(0, 2), (1,)]


def test_oversized_instance():
    huge = CnfFormula(10, tuple((i,) for i in range(1, 11)) + tuple((-i,) for i in range(1, 11)))
    with pytest.raises(OversizedInstanceError, match="instance 0"):
        batch_formulas([huge], 20)


def test_batch_shifts_literals():
    batch = make_batch([CnfFormula(2, ((1, -2),)), CnfFormula(1, ((-1,),))], [5, 6])
    assert batch.graph.clause_vars == ((0, 1), (2,))
    assert batch.instance_ids == (5, 6)


def test_check_assignment():
    assert check_assignment(CnfFormula(2, ((1, -2),)), [1, 1]).satisfied
    unsat = CnfFormula(1, ((1,), (-1,)))
    assert not check_assignment(unsat, [0]).satisfied
    assert not check_assignment(unsat, [1]).satisfied
    check = check_assignment(CnfFormula(2, ((1, 2),)), [0.4, 0.6])
    assert check.satisfied and check.clauses == (True,)


def test_check_assignment_length():
    with pytest.raises(AssignmentLengthError):
        check_assignment(CnfFormula(2, ((1,),)), [1])


def test_discretize_ties_go_up():
    np.testing.assert_array_equal(discretize([0.0, 0.49, 0.5, 1.0]), [0, 0, 1, 1])


def test_assignment_range():
    with pytest.raises(ValueError):
        Assignment(np.array([1.2]))


def test_dataset_round_trip(tmp_path, tiny_formulas):
    entries = []
    for i, formula in enumerate(tiny_formulas):
        name = f"{i:05d}_test.cnf"
        write_cnf(tmp_path / name, formula)
        entries.append(DatasetEntry(name, formula.num_vars, formula.num_clauses, "test", [0, i]))
    write_manifest(tmp_path, entries, {"task": "test"})
    loaded = load_dataset(tmp_path)
    assert [formula for _, formula in loaded] == tiny_formulas
    assert read_manifest(tmp_path)["task"] == "test"


def test_manifest_mismatch(tmp_path):
    formula = CnfFormula(2, ((1,),))
    write_cnf(tmp_path / "a.cnf", formula)
    write_manifest(tmp_path, [DatasetEntry("a.cnf", 2, 5, "test", [])], {})
    with pytest.raises(DatasetError, match="m=5"):
        load_dataset(tmp_path)


def test_ingest_dimacs_dir(tmp_path):
    src = tmp_path / "src"
    write_cnf(src / "b.cnf", CnfFormula(2, ((1, 2),)))
    write_cnf(src / "a.cnf", CnfFormula(1, ((1,),)))
    ingest_dimacs_dir(src, tmp_path / "out", task_label="sha1")
    loaded = load_dataset(tmp_path / "out")
    assert [entry.params["source"] for entry, _ in loaded] == ["a.cnf", "b.cnf"]
    assert loaded[0][0].task == "sha1"
