from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .autodiff import Parameter
from .base import MetricsRow, Timer, write_records_csv
from .checkpoint import Checkpoint, save_checkpoint
from .cnf import CnfFormula, batch_formulas
from .errors import ShapeMismatchError, TrainingDivergedError
from .models import SatModel, forward
from .utils import instance_rng

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    train_steps: int = 32
    iterations: int = 500_000
    node_budget: int = 20_000
    seed: int = 0
    validation_interval: int = 1_000
    validation_steps: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    checkpoint_interval: int = 0
    log_interval: int = 100

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.train_steps < 1:
            raise ValueError("train_steps must be >= 1")
        if self.iterations < 0 or self.node_budget < 1:
            raise ValueError("iterations must be >= 0 and node_budget >= 1")

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, object]) -> "TrainConfig":
        return cls(**raw)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        presets = {
            "full": dict(train_steps=32, iterations=500_000),
            "desk": dict(train_steps=16, iterations=10_000, validation_interval=500),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}")
        return cls(**{**presets[name], **overrides})


def adabelief_update(
    theta: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    s: np.ndarray,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-16,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdaBelief step; returns new (theta, m, s) and leaves inputs untouched."""
    if not theta.shape == grad.shape == m.shape == s.shape:
        raise ShapeMismatchError(
            f"adabelief shapes differ: {theta.shape} {grad.shape} {m.shape} {s.shape}"
        )
    m = beta1 * m + (1.0 - beta1) * grad
    s = beta2 * s + (1.0 - beta2) * (grad - m) ** 2 + eps
    m_hat = m / (1.0 - beta1**t)
    s_hat = s / (1.0 - beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(s_hat) + eps)
    return theta.astype(np.float32), m.astype(np.float32), s.astype(np.float32)


class AdaBelief:
    """Single parameter group, no learning-rate schedule."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 2e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-16,
    ) -> None:
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.tensor.data) for p in self.params}
        self.s = {p.name: np.zeros_like(p.tensor.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        for param in self.params:
            theta, m, s = adabelief_update(
                param.tensor.data,
                param.grad,
                self.m[param.name],
                self.s[param.name],
                self.t,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )
            param.tensor.data = theta
            self.m[param.name] = m
            self.s[param.name] = s

    def moment_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"m.{name}": value for name, value in self.m.items()}
        arrays.update({f"s.{name}": value for name, value in self.s.items()})
        return arrays

    def load_moments(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        for name in self.m:
            self.m[name] = np.array(arrays[f"m.{name}"], dtype=np.float32)
            self.s[name] = np.array(arrays[f"s.{name}"], dtype=np.float32)
        self.t = step


@dataclasses.dataclass
class EvalRecord:
    instance_id: int
    n: int
    m: int
    solved: bool
    exit_step: Optional[int]
    seconds: float

    def to_row(self) -> Dict[str, object]:
        row = dataclasses.asdict(self)
        row["exit_step"] = "" if self.exit_step is None else self.exit_step
        return row


@dataclasses.dataclass
class EvalReport:
    steps: int
    solved_fraction: float
    wall_seconds: float
    records: List[EvalRecord]
    assignments: Dict[int, np.ndarray] = dataclasses.field(default_factory=dict)

    def to_row(self) -> Dict[str, object]:
        return {
            "steps": self.steps,
            "solved_fraction": self.solved_fraction,
            "solved": sum(r.solved for r in self.records),
            "total": len(self.records),
            "wall_seconds": self.wall_seconds,
        }


def evaluate(
    model: SatModel,
    formulas: Sequence[CnfFormula],
    steps: int,
    *,
    node_budget: int = 20_000,
    seed: int = 0,
    instance_ids: Optional[Sequence[int]] = None,
    progress: bool = False,
) -> EvalReport:
    """Eval-mode forward per batch; one record per instance, in input order."""
    ids = list(range(len(formulas))) if instance_ids is None else list(instance_ids)
    batches = batch_formulas(formulas, node_budget, ids)
    by_id: Dict[int, EvalRecord] = {}
    assignments: Dict[int, np.ndarray] = {}
    with Timer() as timer:
        for batch in tqdm(batches, desc=f"eval s={steps}", disable=not progress, leave=False):
            with Timer() as batch_timer:
                result = forward(model, batch, steps, mode="eval", seed=seed)
            for i, iid in enumerate(batch.instance_ids):
                solved = bool(result.solved[i])
                seconds = result.exit_seconds[i] if solved else batch_timer.elapsed
                by_id[iid] = EvalRecord(
                    instance_id=iid,
                    n=batch.formulas[i].num_vars,
                    m=batch.formulas[i].num_clauses,
                    solved=solved,
                    exit_step=result.exit_steps[i],
                    seconds=float(seconds),
                )
                assignments[iid] = result.assignments[i]
    records = [by_id[iid] for iid in ids]
    fraction = sum(r.solved for r in records) / len(records) if records else 0.0
    logger.info("Evaluated %d instances at %d steps: solved %.2f%%", len(records), steps, 100 * fraction)
    return EvalReport(
        steps=steps,
        solved_fraction=fraction,
        wall_seconds=timer.elapsed,
        records=records,
        assignments=assignments,
    )


def evaluate_sweep(
    model: SatModel, formulas: Sequence[CnfFormula], steps_list: Sequence[int], **kwargs
) -> List[EvalReport]:
    return [evaluate(model, formulas, steps, **kwargs) for steps in steps_list]


@dataclasses.dataclass
class EvalRun:
    """One model evaluated under one noise seed across a step sweep."""

    run: int
    label: str
    seed: int
    reports: List[EvalReport]


def evaluate_runs(
    models: Sequence[SatModel],
    formulas: Sequence[CnfFormula],
    steps_list: Sequence[int],
    *,
    repeats: int = 1,
    seed: int = 0,
    labels: Optional[Sequence[str]] = None,
    **kwargs,
) -> List[EvalRun]:
    """Sweep every model under seeds ``seed .. seed+repeats-1``; runs are numbered model-major."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    labels = list(labels) if labels is not None else [f"model{i}" for i in range(len(models))]
    if len(labels) != len(models):
        raise ValueError("labels and models differ in length")
    runs: List[EvalRun] = []
    for model, label in zip(models, labels):
        for offset in range(repeats):
            reports = evaluate_sweep(model, formulas, steps_list, seed=seed + offset, **kwargs)
            runs.append(EvalRun(len(runs), label, seed + offset, reports))
    return runs


def summarize_runs(runs: Sequence[EvalRun]) -> pd.DataFrame:
    """Mean, standard error and median solved fraction per step count across runs.

    The standard error uses ddof=1 and is 0 for a single run.
    """
    frame = pd.DataFrame(
        [{"run": run.run, **report.to_row()} for run in runs for report in run.reports]
    )
    if frame.empty:
        raise ValueError("no evaluation runs to summarize")
    grouped = frame.groupby("steps", sort=False)["solved_fraction"]
    return pd.DataFrame(
        {
            "runs": grouped.count(),
            "mean_solved_fraction": grouped.mean(),
            "stderr_solved_fraction": grouped.sem().fillna(0.0),
            "median_solved_fraction": grouped.median(),
        }
    ).reset_index()


@dataclasses.dataclass
class TrainResult:
    metrics: List[MetricsRow]
    iteration: int
    checkpoint_path: Optional[Path]
    loss_trace: List[float]


def _epoch_batches(
    formulas: Sequence[CnfFormula], ids: Sequence[int], config: TrainConfig, epoch: int
):
    order = instance_rng(config.seed, 0x5EED, epoch).permutation(len(formulas))
    return batch_formulas(
        [formulas[i] for i in order], config.node_budget, [ids[i] for i in order]
    )


def make_checkpoint(
    model: SatModel,
    optimizer: AdaBelief,
    iteration: int,
    rng: np.random.Generator,
    train_state: Dict[str, object],
) -> Checkpoint:
    return Checkpoint(
        model_config=model.config,
        params=dict(model.state_arrays()),
        moments=optimizer.moment_arrays(),
        iteration=iteration,
        optimizer_step=optimizer.t,
        rng_state=rng.bit_generator.state,
        train_state=train_state,
    )


def train(
    model: SatModel,
    formulas: Sequence[CnfFormula],
    config: TrainConfig,
    *,
    validation: Optional[Sequence[CnfFormula]] = None,
    out_dir: Optional[Path] = None,
    resume: Optional[Checkpoint] = None,
    progress: bool = True,
) -> TrainResult:
    """Minimize the summed per-step multi-assignment loss with AdaBelief.

    Instances are reshuffled every epoch and packed into node-budget batches;
    each iteration consumes one batch. Deterministic given the seed.
    """
    if not formulas:
        raise ValueError("training set is empty")
    ids = list(range(len(formulas)))
    optimizer = AdaBelief(
        model.parameters(), config.learning_rate, (config.beta1, config.beta2), config.eps
    )
    rng = np.random.default_rng(config.seed)
    epoch, cursor, start = 0, 0, 0
    if resume is not None:
        model.load_arrays(resume.params)
        optimizer.load_moments(resume.moments, resume.optimizer_step)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        epoch = int(resume.train_state.get("epoch", 0))
        cursor = int(resume.train_state.get("cursor", 0))
        start = resume.iteration
    batches = _epoch_batches(formulas, ids, config, epoch)

    metrics: List[MetricsRow] = []
    loss_trace: List[float] = []
    last_path: Optional[Path] = None
    with Timer() as timer:
        bar = tqdm(range(start, config.iterations), desc="train", disable=not progress)
        for iteration in bar:
            if cursor >= len(batches):
                epoch, cursor = epoch + 1, 0
                batches = _epoch_batches(formulas, ids, config, epoch)
            batch = batches[cursor]
            cursor += 1

            step_seed = int(rng.integers(0, 2**63 - 1))
            model.zero_grad()
            result = forward(model, batch, config.train_steps, mode="train", seed=step_seed)
            loss = result.total_loss
            value = float(loss.data) if loss is not None else 0.0
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    "non-finite total loss", step=result.steps_run, instance=batch.instance_ids[0]
                )
            if loss is not None:
                loss.backward()
            optimizer.step()
            loss_trace.append(value)
            bar.set_postfix(loss=f"{value:.4f}")

            done = iteration + 1
            val_fraction = None
            if validation and config.validation_interval and done % config.validation_interval == 0:
                val_fraction = evaluate(
                    model,
                    validation,
                    config.validation_steps,
                    node_budget=config.node_budget,
                    seed=config.seed,
                ).solved_fraction
                logger.info("iteration %d: loss %.4f, validation solved %.2f%%", done, value, 100 * val_fraction)
            if val_fraction is not None or done % max(config.log_interval, 1) == 0 or done == config.iterations:
                metrics.append(MetricsRow(done, value, val_fraction, timer.elapsed * 1000.0))

            train_state = {"epoch": epoch, "cursor": cursor, "config": config.to_dict()}
            if out_dir is not None and config.checkpoint_interval and done % config.checkpoint_interval == 0:
                last_path = save_checkpoint(
                    Path(out_dir) / f"ckpt_{done:08d}.qsat",
                    make_checkpoint(model, optimizer, done, rng, train_state),
                )

    final_iteration = max(start, config.iterations)
    if out_dir is not None:
        out_dir = Path(out_dir)
        last_path = save_checkpoint(
            out_dir / "final.qsat",
            make_checkpoint(
                model,
                optimizer,
                final_iteration,
                rng,
                {"epoch": epoch, "cursor": cursor, "config": config.to_dict()},
            ),
        )
        if metrics:
            write_records_csv(metrics, out_dir / "metrics.csv")
    return TrainResult(
        metrics=metrics, iteration=final_iteration, checkpoint_path=last_path, loss_trace=loss_trace
    )
