"""
Recurrent SAT models on (batched) factor graphs.

QuerySAT replaces variable-to-clause message passing with a query: the
variable state proposes d candidate assignments, the clause values of those
candidates (and optionally their gradient) update the clause state, and
clause messages flow back to variables through A_p and A_n. NeuroCore keeps
literal-to-clause message passing; its +Query and +Query+G variants add the
query head next to it.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import loss as sat_loss
from .autodiff import Mlp, Parameter, Tensor
from .base import Timer
from .cnf import Batch, check_assignment
from .errors import ShapeMismatchError, TrainingDivergedError
from .utils import instance_rng

logger = logging.getLogger(__name__)

ARCHITECTURES = ("querysat", "neurocore", "neurocore_query", "neurocore_query_g")
NOISE_SCHEDULES = ("per_step", "per_pass")
MODES = ("train", "eval")


@dataclasses.dataclass
class ModelConfig:
    feature_maps: int = 128
    noise_dims: int = 4
    assignments: int = 8
    grad_scale_alpha: float = 0.2
    query_grad_mode: str = "clause_sum"
    architecture: str = "querysat"
    noise_schedule: str = "per_step"

    def __post_init__(self) -> None:
        if self.feature_maps < 1:
            raise ValueError("feature_maps must be >= 1")
        if self.noise_dims < 0:
            raise ValueError("noise_dims must be >= 0")
        if self.assignments < 1:
            raise ValueError("assignments must be >= 1")
        if not 0.0 <= self.grad_scale_alpha <= 1.0:
            raise ValueError("grad_scale_alpha must lie in [0, 1]")
        if self.query_grad_mode not in sat_loss.GRADIENT_MODES:
            raise ValueError(f"query_grad_mode must be one of {sat_loss.GRADIENT_MODES}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.noise_schedule not in NOISE_SCHEDULES:
            raise ValueError(f"noise_schedule must be one of {NOISE_SCHEDULES}")

    @property
    def has_query(self) -> bool:
        return self.architecture != "neurocore"

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, object]) -> "ModelConfig":
        return cls(**raw)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            "full": dict(feature_maps=128, assignments=8),
            "desk": dict(feature_maps=32, assignments=4),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}")
        return cls(**{**presets[name], **overrides})


@dataclasses.dataclass
class ModelState:
    """Recurrent state: QuerySAT keeps n variable rows, NeuroCore 2n literal rows."""

    var_state: Tensor
    clause_state: Tensor
    step: int
    solved_mask: np.ndarray


@dataclasses.dataclass
class StepOutput:
    assignments: Tensor
    column_losses: Tensor
    instance_losses: Tensor
    best_columns: np.ndarray
    query: Optional[np.ndarray] = None
    query_eval: Optional[np.ndarray] = None

    @property
    def step_loss(self) -> float:
        return float(np.sum(self.instance_losses.data))

    @property
    def best_column(self) -> int:
        return int(self.best_columns[0])


class NoiseSource:
    """Per-instance N(0,1) noise streams keyed by (seed, instance id)."""

    def __init__(self, batch: Batch, seed: int, dims: int, schedule: str = "per_step") -> None:
        self.batch = batch
        self.dims = dims
        self.schedule = schedule
        self._streams = [instance_rng(seed, iid) for iid in batch.instance_ids]
        self._cached: Optional[np.ndarray] = None

    def draw(self) -> np.ndarray:
        if self.schedule == "per_pass" and self._cached is not None:
            return self._cached
        blocks = [
            stream.standard_normal((formula.num_vars, self.dims)).astype(np.float32)
            for stream, formula in zip(self._streams, self.batch.formulas)
        ]
        noise = np.concatenate(blocks, axis=0)
        self._cached = noise
        return noise


def _multi_assignment(out: Tensor, batch: Batch) -> Tuple[Tensor, Tensor, np.ndarray]:
    column_losses = ad.formula_log_loss(out, batch)
    weights = sat_loss.rank_weights(column_losses.data)
    instance_losses = ad.sum(ad.mul(column_losses, weights), axis=1)
    return column_losses, instance_losses, sat_loss.best_columns(column_losses.data)


class SatModel:
    """Named parameter table plus a recurrent step."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        self._params: Dict[str, Parameter] = {}
        self._build(rng)

    def _mlp(self, name: str, widths: Sequence[int], rng: np.random.Generator) -> Mlp:
        params = ad.init_mlp(widths, rng, name)
        for param in params:
            self._params[param.name] = param
        return Mlp(params)

    def _build(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.tensor.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: param.tensor.data for name, param in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, param in self._params.items():
            array = arrays[name]
            if array.shape != param.shape:
                raise ShapeMismatchError(f"{name}: expected {param.shape}, got {array.shape}")
            param.tensor.data = np.array(array, dtype=np.float32)

    def init_state(self, batch: Batch) -> ModelState:
        raise NotImplementedError

    def step(self, state: ModelState, batch: Batch, noise: NoiseSource) -> Tuple[ModelState, StepOutput]:
        raise NotImplementedError

    def _check_state(self, state: ModelState, var_rows: int, batch: Batch) -> None:
        if state.var_state.shape[0] != var_rows or state.clause_state.shape[0] != batch.graph.m:
            raise ShapeMismatchError(
                f"state rows ({state.var_state.shape[0]}, {state.clause_state.shape[0]}) "
                f"do not match batch ({var_rows}, {batch.graph.m})"
            )

    def _query_gradient(self, q: Tensor, batch: Batch) -> Tensor:
        grad = sat_loss.clause_gradient(batch.graph, q.data, self.config.query_grad_mode)
        return ad.stop_gradient(grad.astype(np.float32))


class QuerySAT(SatModel):
    def _build(self, rng: np.random.Generator) -> None:
        d, r, u = self.config.feature_maps, self.config.noise_dims, self.config.assignments
        self.mlp_q = self._mlp("mlp_q", [d + r, d, d], rng)
        self.mlp_c = self._mlp("mlp_c", [2 * d, d, d], rng)
        self.mlp_v = self._mlp("mlp_v", [4 * d, d, d, d], rng)
        self.mlp_o = self._mlp("mlp_o", [d, d, u], rng)

    def init_state(self, batch: Batch) -> ModelState:
        d = self.config.feature_maps
        return ModelState(
            var_state=Tensor(np.ones((batch.graph.n, d), dtype=np.float32)),
            clause_state=Tensor(np.ones((batch.graph.m, d), dtype=np.float32)),
            step=0,
            solved_mask=np.zeros(batch.size, dtype=bool),
        )

    def step(self, state: ModelState, batch: Batch, noise: NoiseSource) -> Tuple[ModelState, StepOutput]:
        graph = batch.graph
        self._check_state(state, graph.n, batch)
        v, c = state.var_state, state.clause_state

        query_input = v
        if self.config.noise_dims:
            query_input = ad.concat([v, Tensor(noise.draw())])
        q = ad.sigmoid(self.mlp_q(query_input))
        e = ad.clause_values(q, graph)
        query_grad = self._query_gradient(q, batch)

        c_next = ad.pairnorm(self.mlp_c(ad.concat([c, e])), batch.clause_offsets)
        messages = [
            ad.sparse_matmul(graph.a_pos, c_next),
            ad.sparse_matmul(graph.a_neg, c_next),
        ]
        v_next = ad.pairnorm(
            self.mlp_v(ad.concat([v, *messages, query_grad])), batch.var_offsets
        )
        out = ad.sigmoid(self.mlp_o(v_next))
        column_losses, instance_losses, best = _multi_assignment(out, batch)

        alpha = self.config.grad_scale_alpha
        next_state = ModelState(
            var_state=ad.grad_scale(v_next, alpha),
            clause_state=ad.grad_scale(c_next, alpha),
            step=state.step + 1,
            solved_mask=state.solved_mask,
        )
        return next_state, StepOutput(
            assignments=out,
            column_losses=column_losses,
            instance_losses=instance_losses,
            best_columns=best,
            query=q.data,
            query_eval=e.data,
        )


def flip_index(n: int) -> np.ndarray:
    """Row permutation swapping each literal with its complement."""
    return np.concatenate([np.arange(n, 2 * n), np.arange(0, n)])


def literal_blocks(batch: Batch) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...]]:
    """Permutation grouping each instance's literal rows, its inverse and offsets."""
    n = batch.graph.n
    order = np.concatenate(
        [
            np.concatenate(
                [np.arange(batch.var_offsets[i], batch.var_offsets[i + 1]),
                 n + np.arange(batch.var_offsets[i], batch.var_offsets[i + 1])]
            )
            for i in range(batch.size)
        ]
    ).astype(np.int64)
    return order, np.argsort(order), tuple(2 * offset for offset in batch.var_offsets)


class NeuroCore(SatModel):
    """Literal/clause message passing; ``variant`` adds the query head."""

    variant: Optional[str] = None

    def _build(self, rng: np.random.Generator) -> None:
        d, r, u = self.config.feature_maps, self.config.noise_dims, self.config.assignments
        self.variant = {
            "neurocore": None,
            "neurocore_query": "query",
            "neurocore_query_g": "query_g",
        }[self.config.architecture]
        clause_in = 2 * d + (d if self.variant else 0)
        literal_in = 3 * d + (d if self.variant == "query_g" else 0)
        if self.variant:
            self.mlp_q = self._mlp("mlp_q", [2 * d + r, d, d], rng)
        self.mlp_c = self._mlp("mlp_c", [clause_in, d, d], rng)
        self.mlp_l = self._mlp("mlp_l", [literal_in, d, d, d], rng)
        self.mlp_o = self._mlp("mlp_o", [2 * d, d, u], rng)

    def init_state(self, batch: Batch) -> ModelState:
        d = self.config.feature_maps
        return ModelState(
            var_state=Tensor(np.ones((2 * batch.graph.n, d), dtype=np.float32)),
            clause_state=Tensor(np.ones((batch.graph.m, d), dtype=np.float32)),
            step=0,
            solved_mask=np.zeros(batch.size, dtype=bool),
        )

    def step(self, state: ModelState, batch: Batch, noise: NoiseSource) -> Tuple[ModelState, StepOutput]:
        graph = batch.graph
        n = graph.n
        self._check_state(state, 2 * n, batch)
        literals, clauses = state.var_state, state.clause_state
        incidence = graph.literal_incidence
        variables = ad.concat([ad.slice_rows(literals, 0, n), ad.slice_rows(literals, n, 2 * n)])

        clause_inputs = [clauses, ad.sparse_matmul(incidence, literals, transpose=True)]
        q = e = query_grad = None
        if self.variant:
            query_input = variables
            if self.config.noise_dims:
                query_input = ad.concat([variables, Tensor(noise.draw())])
            q = ad.sigmoid(self.mlp_q(query_input))
            e = ad.clause_values(q, graph)
            clause_inputs.append(e)
            if self.variant == "query_g":
                query_grad = self._query_gradient(q, batch)
        c_next = ad.pairnorm(self.mlp_c(ad.concat(clause_inputs)), batch.clause_offsets)

        literal_inputs = [
            literals,
            ad.sparse_matmul(incidence, c_next),
            ad.take_rows(literals, flip_index(n)),
        ]
        if query_grad is not None:
            # d/d(not x) = -d/dx for the negated literal rows.
            literal_inputs.append(ad.concat([query_grad, ad.neg(query_grad)], axis=0))
        order, inverse, offsets = literal_blocks(batch)
        l_next = ad.take_rows(
            ad.pairnorm(ad.take_rows(self.mlp_l(ad.concat(literal_inputs)), order), offsets),
            inverse,
        )
        out = ad.sigmoid(
            self.mlp_o(ad.concat([ad.slice_rows(l_next, 0, n), ad.slice_rows(l_next, n, 2 * n)]))
        )
        column_losses, instance_losses, best = _multi_assignment(out, batch)

        alpha = self.config.grad_scale_alpha
        next_state = ModelState(
            var_state=ad.grad_scale(l_next, alpha),
            clause_state=ad.grad_scale(c_next, alpha),
            step=state.step + 1,
            solved_mask=state.solved_mask,
        )
        return next_state, StepOutput(
            assignments=out,
            column_losses=column_losses,
            instance_losses=instance_losses,
            best_columns=best,
            query=None if q is None else q.data,
            query_eval=None if e is None else e.data,
        )


def build_model(config: ModelConfig, seed: int) -> SatModel:
    rng = np.random.default_rng(seed)
    if config.architecture == "querysat":
        return QuerySAT(config, rng)
    return NeuroCore(config, rng)


@dataclasses.dataclass
class TraceStep:
    step: int
    assignments: np.ndarray
    best_columns: np.ndarray
    query: Optional[np.ndarray]
    query_eval: Optional[np.ndarray]


@dataclasses.dataclass
class ForwardResult:
    assignments: List[np.ndarray]
    exit_steps: List[Optional[int]]
    exit_seconds: List[Optional[float]]
    solved: np.ndarray
    step_losses: List[float]
    steps_run: int
    total_loss: Optional[Tensor] = None
    seconds: float = 0.0
    trace: List[TraceStep] = dataclasses.field(default_factory=list)

    @property
    def solved_fraction(self) -> float:
        return float(np.mean(self.solved)) if self.solved.size else 0.0


def forward(
    model: SatModel,
    batch: Batch,
    steps: int,
    mode: str = "eval",
    seed: int = 0,
    record_trace: bool = False,
) -> ForwardResult:
    """Run up to ``steps`` recurrent steps with per-instance conditional exit.

    Train mode sums the multi-assignment loss of every step over instances
    not yet solved; their states keep updating. Eval mode records no graph
    and freezes each instance's reported assignment at its exit step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")

    noise = NoiseSource(batch, seed, model.config.noise_dims, model.config.noise_schedule)
    state = model.init_state(batch)
    solved = np.zeros(batch.size, dtype=bool)
    exit_steps: List[Optional[int]] = [None] * batch.size
    exit_seconds: List[Optional[float]] = [None] * batch.size
    reported: List[Optional[np.ndarray]] = [None] * batch.size
    step_losses: List[float] = []
    total: Optional[Tensor] = None
    trace: List[TraceStep] = []
    steps_run = 0

    context = ad.no_grad() if mode == "eval" else contextlib.nullcontext()
    with context, Timer() as timer:
        for step in range(1, steps + 1):
            state, output = model.step(state, batch, noise)
            steps_run = step
            active = (~solved).astype(np.float64)
            losses = output.instance_losses.data
            if mode == "train":
                bad = np.flatnonzero(~np.isfinite(losses) & ~solved)
                if bad.size:
                    raise TrainingDivergedError(
                        "non-finite loss", step=step, instance=batch.instance_ids[bad[0]]
                    )
                masked = ad.sum(ad.mul(output.instance_losses, active))
                total = masked if total is None else ad.add(total, masked)
            step_losses.append(float(np.sum(losses * active)))

            values = output.assignments.data
            for i in np.flatnonzero(~solved):
                column = values[batch.var_slice(i), output.best_columns[i]]
                reported[i] = np.array(column, dtype=np.float64)
                if check_assignment(batch.formulas[i], reported[i]).satisfied:
                    solved[i] = True
                    exit_steps[i] = step
                    exit_seconds[i] = timer.elapsed
            state.solved_mask = solved.copy()

            if record_trace:
                trace.append(
                    TraceStep(
                        step=step,
                        assignments=np.array(values),
                        best_columns=np.array(output.best_columns),
                        query=None if output.query is None else np.array(output.query),
                        query_eval=None if output.query_eval is None else np.array(output.query_eval),
                    )
                )
            if solved.all():
                break

    logger.debug(
        "forward(%s) %d/%d solved after %d steps", mode, int(solved.sum()), batch.size, steps_run
    )
    return ForwardResult(
        assignments=[a if a is not None else np.zeros(0) for a in reported],
        exit_steps=exit_steps,
        exit_seconds=exit_seconds,
        solved=solved,
        step_losses=step_losses,
        steps_run=steps_run,
        total_loss=total,
        seconds=timer.elapsed,
        trace=trace,
    )
