"""
Unsupervised SAT losses over relaxed assignments x in [0,1]^n.

A clause's value is V_c(x) = 1 - prod_{i in c+}(1 - x_i) * prod_{i in c-} x_i:
one exactly when a binary x satisfies the clause, zero when it falsifies it.
The formula value is the product of clause values and the training loss is
-sum_c log(max(V_c, EPS)).

All kernels work on the padded clause table of a FactorGraph, evaluate in
float64 and never divide by a literal factor: leave-one-out products come
from prefix/suffix products.
"""

from __future__ import annotations

import dataclasses
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .cnf import Batch, CnfFormula, FactorGraph, build_factor_graph
from .errors import ClauseIndexError, ShapeMismatchError

EPS = 1e-6
GRADIENT_MODES = ("clause_sum", "log")

GraphLike = Union[CnfFormula, FactorGraph, Batch]


def _as_graph(source: GraphLike) -> FactorGraph:
    if isinstance(source, FactorGraph):
        return source
    if isinstance(source, Batch):
        return source.graph
    return build_factor_graph(source)


def _as_matrix(graph: FactorGraph, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != graph.n:
        raise ShapeMismatchError(
            f"expected {graph.n} rows of query values, got shape {np.shape(x)}"
        )
    return x, vector


def _literal_factors(graph: FactorGraph, x: np.ndarray) -> np.ndarray:
    """m x K x d falsity factors; padding slots are exactly 1."""
    var_idx, negated = graph.clause_table
    extended = np.vstack([x, np.zeros((1, x.shape[1]), dtype=np.float64)])
    gathered = extended[var_idx]
    return np.where(negated[..., None], gathered, 1.0 - gathered)


def _falsity(factors: np.ndarray) -> np.ndarray:
    product = factors[:, 0, :].copy()
    for k in range(1, factors.shape[1]):
        product *= factors[:, k, :]
    return product


def _leave_one_out(factors: np.ndarray) -> np.ndarray:
    """Product of each clause's factors with slot k omitted (no division)."""
    m, width, d = factors.shape
    prefix = np.ones((m, width, d), dtype=np.float64)
    suffix = np.ones((m, width, d), dtype=np.float64)
    for k in range(1, width):
        prefix[:, k] = prefix[:, k - 1] * factors[:, k - 1]
    for k in range(width - 2, -1, -1):
        suffix[:, k] = suffix[:, k + 1] * factors[:, k + 1]
    return prefix * suffix


def per_clause_losses(source: GraphLike, q: np.ndarray) -> np.ndarray:
    """m x d clause values, one column per query column."""
    graph = _as_graph(source)
    q, vector = _as_matrix(graph, q)
    if graph.m == 0:
        values = np.zeros((0, q.shape[1]), dtype=np.float64)
    else:
        values = 1.0 - _falsity(_literal_factors(graph, q))
    return values[:, 0] if vector else values


def clause_value(formula: CnfFormula, x: np.ndarray, c: int) -> float:
    if not 0 <= c < formula.num_clauses:
        raise ClauseIndexError(f"clause index {c} outside [0, {formula.num_clauses})")
    x = np.asarray(x, dtype=np.float64)
    falsity = 1.0
    for lit in formula.clauses[c]:
        value = x[abs(lit) - 1]
        falsity *= value if lit < 0 else 1.0 - value
    return 1.0 - falsity


def formula_value(source: GraphLike, x: np.ndarray) -> float:
    values = per_clause_losses(source, np.asarray(x, dtype=np.float64).reshape(-1))
    return float(np.prod(values))


def _neg_log(values: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(values, EPS))


def log_loss(source: GraphLike, x: np.ndarray) -> float:
    values = per_clause_losses(source, np.asarray(x, dtype=np.float64).reshape(-1))
    return math.fsum(_neg_log(values))


def clause_gradient(
    source: GraphLike, q: np.ndarray, mode: str = "clause_sum", weights: Optional[np.ndarray] = None
) -> np.ndarray:
    """Gradient w.r.t. q of sum_c w_c * g(V_c) for g = identity or -log(max(., EPS)).

    ``weights`` (m x d) multiplies each clause's contribution; it is the
    upstream gradient when this kernel serves as a backward pass.
    """
    if mode not in GRADIENT_MODES:
        raise ValueError(f"unknown gradient mode {mode!r}; expected one of {GRADIENT_MODES}")
    graph = _as_graph(source)
    q, vector = _as_matrix(graph, q)
    d = q.shape[1]
    grad = np.zeros((graph.n + 1, d), dtype=np.float64)
    if graph.m:
        var_idx, negated = graph.clause_table
        factors = _literal_factors(graph, q)
        loo = _leave_one_out(factors)
        # dV_c/dx_i = +P_c^(-i) for positive literals, -P_c^(-i) for negated ones.
        dv = np.where(negated[..., None], -loo, loo)
        if mode == "log":
            values = 1.0 - _falsity(factors)
            dv = dv * (-1.0 / np.maximum(values, EPS))[:, None, :]
        if weights is not None:
            dv = dv * np.asarray(weights, dtype=np.float64).reshape(graph.m, 1, d)
        np.add.at(grad, var_idx.reshape(-1), dv.reshape(-1, d))
    grad = grad[: graph.n]
    return grad[:, 0] if vector else grad


def loss_gradient(source: GraphLike, x: np.ndarray, mode: str = "clause_sum") -> np.ndarray:
    """d(sum_c V_c)/dx (clause_sum) or dL_log/dx (log); vector or n x d matrix."""
    return clause_gradient(source, x, mode)


@dataclasses.dataclass(frozen=True)
class LossReport:
    clause_losses: np.ndarray
    formula_value: float
    log_loss: float
    gradient: Optional[np.ndarray] = None


def evaluate_loss(source: GraphLike, x: np.ndarray, with_gradient: bool = False) -> LossReport:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    values = per_clause_losses(source, x)
    return LossReport(
        clause_losses=values,
        formula_value=float(np.prod(values)),
        log_loss=math.fsum(_neg_log(values)),
        gradient=loss_gradient(source, x, "log") if with_gradient else None,
    )


def instance_log_losses(batch: Batch, outputs: np.ndarray) -> np.ndarray:
    """Per-instance, per-column log losses (k x u); exactly rounded sums."""
    values = per_clause_losses(batch.graph, np.asarray(outputs, dtype=np.float64))
    if values.ndim == 1:
        values = values[:, None]
    terms = _neg_log(values)
    losses = np.zeros((batch.size, terms.shape[1]), dtype=np.float64)
    for i in range(batch.size):
        segment = terms[batch.clause_slice(i)]
        for j in range(terms.shape[1]):
            losses[i, j] = math.fsum(segment[:, j])
    return losses


def rank_weights(losses: np.ndarray) -> np.ndarray:
    """Squared-rank weights: largest loss gets 1^2, smallest u^2, rows sum to 1.

    Equal losses are ranked by column index, which leaves the weighted sum
    unchanged.
    """
    losses = np.atleast_2d(np.asarray(losses, dtype=np.float64))
    u = losses.shape[1]
    order = np.argsort(-losses, axis=1, kind="stable")
    weights = np.empty_like(losses)
    squares = np.arange(1, u + 1, dtype=np.float64) ** 2
    np.put_along_axis(weights, order, np.broadcast_to(squares, losses.shape), axis=1)
    return weights / squares.sum()


def best_columns(losses: np.ndarray) -> np.ndarray:
    """Argmin per row; ties go to the lowest column index."""
    return np.argmin(np.atleast_2d(losses), axis=1)


def weighted_assignment_loss(column_losses: Sequence[float]) -> Tuple[float, int]:
    losses = np.asarray(column_losses, dtype=np.float64).reshape(1, -1)
    if losses.shape[1] < 1:
        raise ValueError("need at least one assignment column")
    ordered = np.sort(losses[0])[::-1]
    squares = np.arange(1, ordered.size + 1, dtype=np.float64) ** 2
    weighted = math.fsum(squares * ordered) / math.fsum(squares)
    return weighted, int(best_columns(losses)[0])


def multi_assignment_loss(outputs: np.ndarray, formula: GraphLike) -> Tuple[float, int]:
    """Squared-rank weighted log loss over u candidate columns, plus the best column."""
    graph = _as_graph(formula)
    outputs, _ = _as_matrix(graph, outputs)
    values = per_clause_losses(graph, outputs)
    terms = _neg_log(values)
    column_losses: List[float] = [math.fsum(terms[:, j]) for j in range(outputs.shape[1])]
    return weighted_assignment_loss(column_losses)
