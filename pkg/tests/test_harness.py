import json

import numpy as np
import pandas as pd
import pytest

from satlab.base import BenchRecord
from satlab.checkpoint import Checkpoint, save_checkpoint
from satlab.cnf import CnfFormula
from satlab.errors import DatasetError, ModelMismatchError
from satlab.harness import (
    PROBE_AVERAGING,
    BenchConfig,
    ProbeConfig,
    cactus_series,
    checkpoint_trail,
    plot_payload,
    probe_model,
    read_external_records,
    records_frame,
    run_bench,
    run_probe,
    write_bench_outputs,
    write_probe_csv,
)
from satlab import harness
from satlab.models import ForwardResult, ModelConfig, TraceStep, build_model
from satlab.solvers import SearchBudget

from .conftest import random_formula

TINY = ModelConfig(feature_maps=4, noise_dims=1, assignments=2)


def make_records(rng, solvers=("x", "y", "z"), instances=10):
    records = []
    for solver in solvers:
        for iid in range(instances):
            status = "sat" if rng.random() < 0.7 else "timeout"
            records.append(
                BenchRecord(iid, solver, status, float(rng.uniform(0, 5)), int(rng.integers(1, 500)))
            )
    return records


def test_cactus_matches_independent_prefix_sums(rng):
    records = make_records(rng)
    cactus = cactus_series(records)
    for solver in ("x", "y", "z"):
        solved = sorted(
            (r.seconds, r.instance_id) for r in records if r.solver == solver and r.solved
        )
        expected = np.cumsum([seconds for seconds, _ in solved])
        rows = cactus[cactus["solver"] == solver]
        assert rows["solved_count"].tolist() == list(range(1, len(solved) + 1))
        np.testing.assert_allclose(rows["cumulative_seconds"].to_numpy(), expected)
        assert np.all(np.diff(rows["cumulative_seconds"].to_numpy()) >= 0)
    assert list(dict.fromkeys(cactus["solver"])) == ["x", "y", "z"]


def test_cactus_golden():
    records = [
        BenchRecord(0, "a", "sat", 3.0, 30),
        BenchRecord(1, "a", "sat", 1.0, 10),
        BenchRecord(2, "a", "timeout", 9.0, 90),
        BenchRecord(3, "a", "unsat", 1.0, 5),
    ]
    cactus = cactus_series(records)
    assert cactus["cumulative_seconds"].tolist() == [1.0, 2.0, 5.0]
    work = cactus_series(records, "work")
    assert list(work.columns) == ["solver", "solved_count", "cumulative_work"]
    assert work["cumulative_work"].tolist() == [5, 15, 45]


def test_cactus_of_no_records():
    assert cactus_series([]).empty
    with pytest.raises(ValueError):
        cactus_series([], "cpu")


def test_work_axis_drops_seconds(rng):
    frame = records_frame(make_records(rng), "work")
    assert "seconds" not in frame.columns
    assert len(frame) == 30


def test_work_axis_outputs_are_byte_identical(rng, tmp_path):
    records = make_records(rng)
    jittered = [
        BenchRecord(r.instance_id, r.solver, r.status, r.seconds + 0.125, r.work) for r in records
    ]
    a = write_bench_outputs(records, tmp_path / "a", "work", plot_json=True)
    b = write_bench_outputs(jittered, tmp_path / "b", "work", plot_json=True)
    for name in ("records", "cactus", "plot"):
        assert getattr(a, name).read_bytes() == getattr(b, name).read_bytes()


def test_external_records(tmp_path):
    path = tmp_path / "kissat.csv"
    pd.DataFrame(
        {"instance_id": [0, 1], "status": ["sat", "timeout"], "seconds": [0.5, 60.0]}
    ).to_csv(path, index=False)
    records = read_external_records("kissat", path)
    assert [(r.solver, r.status, r.seconds) for r in records] == [
        ("kissat", "sat", 0.5),
        ("kissat", "timeout", 60.0),
    ]

    bad = tmp_path / "bad.csv"
    pd.DataFrame({"instance_id": [0], "seconds": [1.0]}).to_csv(bad, index=False)
    with pytest.raises(DatasetError, match="status"):
        read_external_records("other", bad)


def test_plot_payload():
    cactus = cactus_series(
        [BenchRecord(0, "a", "sat", 2.0, 1), BenchRecord(1, "a", "sat", 1.0, 1), BenchRecord(0, "b", "sat", 4.0, 1)]
    )
    payload = plot_payload(cactus, "wall")
    assert payload["x"] == "cumulative_seconds"
    assert payload["series"]["a"] == {"solved_count": [1, 2], "cumulative_seconds": [1.0, 3.0]}
    json.dumps(payload)


def test_bench_config_validation():
    with pytest.raises(ValueError, match="checkpoint"):
        BenchConfig()
    with pytest.raises(ValueError):
        BenchConfig(solvers=("minisat",))
    assert BenchConfig(solvers=("dpll",)).to_dict()["solvers"] == ["dpll"]


def test_run_bench_classical(rng):
    formulas = [CnfFormula(2, ((1,), (-1, 2))), CnfFormula(1, ((1,), (-1,)))]
    config = BenchConfig(solvers=("gsat", "dpll"), budget=SearchBudget(max_flips=20, max_tries=2))
    records = run_bench(config, formulas, instance_ids=[7, 8])
    table = {(r.solver, r.instance_id): r.status for r in records}
    assert table == {
        ("gsat", 7): "sat",
        ("gsat", 8): "unknown",
        ("dpll", 7): "sat",
        ("dpll", 8): "unsat",
    }
    assert [r.solver for r in records] == ["gsat", "gsat", "dpll", "dpll"]


@pytest.fixture
def trail(tmp_path):
    for iteration in (20, 10):
        model = build_model(TINY, seed=iteration)
        save_checkpoint(
            tmp_path / f"ckpt_{iteration:08d}.qsat",
            Checkpoint(TINY, model.state_arrays(), iteration=iteration),
        )
    save_checkpoint(tmp_path / "final.qsat", Checkpoint(TINY, build_model(TINY, 0).state_arrays(), iteration=30))
    return tmp_path


def test_run_bench_querysat(trail, rng):
    formulas = [random_formula(rng, 4, 3) for _ in range(3)] + [CnfFormula(1, ((1,), (-1,)))]
    config = BenchConfig(solvers=("querysat",), checkpoint=trail / "final.qsat", querysat_steps=4, workers=2)
    records = run_bench(config, formulas)
    assert [r.instance_id for r in records] == [0, 1, 2, 3]
    assert records[3].status == "unknown" and records[3].work == 4
    assert records[3].seconds > 0
    for record in records:
        assert (record.exit_step is not None) == (record.status == "sat")


def test_checkpoint_trail_order(trail):
    assert [p.name for p in checkpoint_trail(trail)] == [
        "ckpt_00000010.qsat",
        "ckpt_00000020.qsat",
        "final.qsat",
    ]


def test_checkpoint_trail_needs_checkpoints(tmp_path):
    with pytest.raises(DatasetError):
        checkpoint_trail(tmp_path)


def test_probe_metrics_are_percentages(rng):
    formulas = [random_formula(rng, 5, 8) for _ in range(4)]
    record = probe_model(build_model(TINY, 0), formulas, ProbeConfig(steps=3))
    for value in (
        record.query_logit_match,
        record.query_sat_clause_fraction,
        record.consecutive_query_match,
        record.query_logit_match_all_columns,
        record.query_sat_clause_fraction_all_columns,
    ):
        assert 0.0 <= value <= 100.0
    assert record.averaging == PROBE_AVERAGING


def test_probe_single_step_consecutive_match(rng):
    unsat = CnfFormula(1, ((1,), (-1,)))
    record = probe_model(build_model(TINY, 0), [unsat], ProbeConfig(steps=1))
    assert record.consecutive_query_match == 100.0


def _scripted_forward(queries, seconds=0.0):
    """Stand-in for forward that replays fixed per-step queries for one instance."""

    def fake_forward(model, batch, steps, mode="eval", seed=0, record_trace=False):
        n = batch.graph.n
        trace = [
            TraceStep(
                step=i + 1,
                assignments=np.full((n, 2), 0.75),
                best_columns=np.array([0]),
                query=np.full((n, 2), value),
                query_eval=None,
            )
            for i, value in enumerate(queries)
        ]
        return ForwardResult(
            assignments=[np.ones(n, dtype=np.int8)],
            exit_steps=[None],
            exit_seconds=[None],
            solved=np.array([False]),
            step_losses=[0.0] * len(queries),
            steps_run=len(queries),
            seconds=seconds,
            trace=trace,
        )

    return fake_forward


def test_consecutive_query_match_uses_last_two_steps(monkeypatch):
    monkeypatch.setattr(harness, "forward", _scripted_forward([0.0, 0.0, 1.0]))
    formula = CnfFormula(3, ((1, 2), (-3,)))
    record = probe_model(build_model(TINY, 0), [formula], ProbeConfig(steps=3))
    assert record.consecutive_query_match == 0.0
    # queries 0, 0, 1 against outputs rounding to 1
    assert record.query_logit_match == pytest.approx(100.0 / 3)

    monkeypatch.setattr(harness, "forward", _scripted_forward([1.0, 0.0, 0.0]))
    record = probe_model(build_model(TINY, 0), [formula], ProbeConfig(steps=3))
    assert record.consecutive_query_match == 100.0


def test_unsolved_querysat_record_keeps_elapsed_seconds(monkeypatch, trail):
    monkeypatch.setattr(harness, "forward", _scripted_forward([0.5, 0.5], seconds=1.25))
    config = BenchConfig(solvers=("querysat",), checkpoint=trail / "final.qsat", querysat_steps=2)
    (record,) = run_bench(config, [CnfFormula(1, ((1,), (-1,)))])
    assert record.status == "unknown"
    assert record.seconds == 1.25
    assert record.work == 2


def test_probe_rejects_models_without_query(rng):
    model = build_model(ModelConfig(feature_maps=4, architecture="neurocore"), 0)
    with pytest.raises(ModelMismatchError):
        probe_model(model, [random_formula(rng, 3, 3)], ProbeConfig(steps=2))


def test_run_probe_writes_csv(trail, rng, tmp_path):
    formulas = [random_formula(rng, 4, 6) for _ in range(2)]
    records = run_probe(checkpoint_trail(trail), formulas, ProbeConfig(steps=2))
    assert [r.iteration for r in records] == [10, 20, 30]
    path = write_probe_csv(records, tmp_path / "probe" / "probe.csv")
    frame = pd.read_csv(path)
    assert frame["iteration"].tolist() == [10, 20, 30]
    assert "consecutive_query_match" in frame.columns
