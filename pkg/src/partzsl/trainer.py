"""Alternating training of the bilinear part-classifier model.

Each outer iteration refreshes the diagonal reweighting of the
group-sparsity term from the current parameters, then runs one L-BFGS
phase: either the shared text projection ``W_t`` or all part regressors
``{W_x[p]}`` jointly, starting with the part regressors. The reweighted
quadratic surrogate majorizes the exact group penalty, so the true
objective decreases across phases.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError, NumericError
from .model import (HyperParams, LabelMatrix, ModelParams, ObjectiveBreakdown,
                    PartFeatureSet, TfIdfMatrix, group_norm_matrix,
                    objective_value)
from .optimizer import LbfgsConfig, MinimizeResult, minimize

# A group counts as inactive when its norm falls below this fraction of the
# largest group norm.
SPARSITY_REL_TOL = 1e-3


@dataclass(frozen=True)
class ReweightState:
    """Diagonal reweighting of the group penalty at the current iterate.

    ``D[p][i] = 1 / (2 * max(group_norms[p, i], group_eps))``; with that
    choice the quadratic surrogate evaluated at the same iterate equals
    half the sum of (clamped) group norms.
    """

    D: tuple
    group_norms: np.ndarray


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    phase: str
    total: float
    data_term: float
    variance_term: float
    group_term: float
    group_sparsity: float
    inner_iterations: int
    wall_time: float

    def to_dict(self, include_wall_time: bool = True) -> dict:
        rec = {
            "iteration": self.iteration,
            "phase": self.phase,
            "total": self.total,
            "data_term": self.data_term,
            "variance_term": self.variance_term,
            "group_term": self.group_term,
            "group_sparsity": self.group_sparsity,
            "inner_iterations": self.inner_iterations,
        }
        if include_wall_time:
            rec["wall_time"] = self.wall_time
        return rec


@dataclass(frozen=True)
class FitResult:
    model: ModelParams
    trace: tuple
    converged: bool


def init_params(d: int, d_T: int, d_P: int, P: int, seed: int,
                part_names: Optional[Sequence[str]] = None,
                vocab: Optional[Sequence[str]] = None) -> ModelParams:
    """Gaussian initialization scaled by 1/sqrt(d), deterministic per seed.

    Draw order is fixed: W_t first (row-major), then each W_x in part order.
    """
    if min(d, d_T, d_P, P) < 1:
        raise InputError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    W_t = rng.standard_normal((d, d_T)) * scale
    W_x = tuple(rng.standard_normal((d, d_P)) * scale for _ in range(P))
    if part_names is None:
        part_names = tuple(f"part{p}" for p in range(P))
    if vocab is None:
        vocab = tuple(f"term{i}" for i in range(d_T))
    return ModelParams(W_t, W_x, tuple(part_names), tuple(vocab))


def update_reweight(model: ModelParams, group_eps: float = 1e-8) -> ReweightState:
    """Recompute the diagonal reweighting from the current group norms."""
    norms = group_norm_matrix(model)
    D = tuple(1.0 / (2.0 * np.maximum(norms[p], group_eps))
              for p in range(model.n_parts))
    return ReweightState(D, norms)


def surrogate_group_value(model: ModelParams, reweight: ReweightState) -> float:
    """sum_p trace(W_x[p]^T W_t D_p W_t^T W_x[p]) at the current model."""
    total = 0.0
    for p, w in enumerate(model.W_x):
        col_sq = np.sum((w.T @ model.W_t) ** 2, axis=0)
        total += float(col_sq @ reweight.D[p])
    return total


def group_sparsity(model: ModelParams) -> float:
    """Fraction of term-part groups with norm below 1e-3 of the max norm."""
    norms = group_norm_matrix(model)
    max_norm = float(norms.max())
    if max_norm == 0.0:
        return 1.0
    return float(np.mean(norms < SPARSITY_REL_TOL * max_norm))


def _make_wt_objective(model: ModelParams, reweight: ReweightState,
                       hyper: HyperParams, T: TfIdfMatrix, Y: LabelMatrix,
                       X: PartFeatureSet) -> Callable:
    """Smooth surrogate in W_t with the part regressors and D fixed."""
    Tv, Yv = T.values, Y.values
    d, d_T = model.d, model.n_terms
    lam1, lam2 = hyper.lambda1, hyper.lambda2
    A = np.zeros((X.n_samples, d))          # sum_p X_p^T W_x[p]^T
    for w, f in zip(model.W_x, X.features):
        A += (w @ f).T
    G = [w @ w.T for w in model.W_x]        # d x d Gram per part
    sumG = np.sum(G, axis=0)
    D = reweight.D

    def fun(wt_flat: np.ndarray):
        Wt = wt_flat.reshape(d, d_T)
        B = Wt @ Tv
        R = A @ B - Yv
        value = float(np.sum(R * R))
        grad = 2.0 * (A.T @ R) @ Tv.T
        if lam1 != 0.0:
            SB = sumG @ B
            value += lam1 * float(np.sum(B * SB))
            grad += (2.0 * lam1) * (SB @ Tv.T)
        if lam2 != 0.0:
            for G_p, D_p in zip(G, D):
                M = G_p @ Wt
                value += lam2 * float(np.sum(Wt * M, axis=0) @ D_p)
                grad += (2.0 * lam2) * (M * D_p)
        return value, grad.ravel()

    return fun


def _make_wx_objective(model: ModelParams, reweight: ReweightState,
                       hyper: HyperParams, T: TfIdfMatrix, Y: LabelMatrix,
                       X: PartFeatureSet, part_indices: Sequence[int],
                       fixed_offset: np.ndarray) -> Callable:
    """Smooth surrogate in the selected W_x blocks with W_t and D fixed.

    ``fixed_offset`` is the residual contribution of the parts not being
    optimized (zero for the joint solve over all parts).
    """
    Tv, Yv = T.values, Y.values
    d, d_P = model.d, model.part_dim
    lam1, lam2 = hyper.lambda1, hyper.lambda2
    B = model.W_t @ Tv                       # d x K
    BBt = B @ B.T
    S = [(model.W_t * reweight.D[p]) @ model.W_t.T for p in part_indices]
    Xs = [X.features[p] for p in part_indices]
    block = d * d_P

    def fun(wx_flat: np.ndarray):
        Ws = [wx_flat[i * block:(i + 1) * block].reshape(d, d_P)
              for i in range(len(part_indices))]
        V = np.zeros((d, X.n_samples))
        for w, f in zip(Ws, Xs):
            V += w @ f
        R = V.T @ B - Yv + fixed_offset
        value = float(np.sum(R * R))
        BR = B @ R.T                          # shared across parts
        grads = [2.0 * BR @ f.T for f in Xs]
        if lam1 != 0.0:
            for i, w in enumerate(Ws):
                C = BBt @ w
                value += lam1 * float(np.sum(w * C))
                grads[i] += (2.0 * lam1) * C
        if lam2 != 0.0:
            for i, w in enumerate(Ws):
                SW = S[i] @ w
                value += lam2 * float(np.sum(w * SW))
                grads[i] += (2.0 * lam2) * SW
        return value, np.concatenate([g.ravel() for g in grads])

    return fun


def _inner_config(hyper: HyperParams,
                  lbfgs: Optional[LbfgsConfig]) -> LbfgsConfig:
    if lbfgs is not None:
        return lbfgs
    return LbfgsConfig(max_iters=hyper.inner_max_iters, grad_tol=hyper.inner_tol)


def solve_wt_subproblem(model: ModelParams, reweight: ReweightState,
                        hyper: HyperParams, T: TfIdfMatrix, Y: LabelMatrix,
                        X: PartFeatureSet,
                        lbfgs: Optional[LbfgsConfig] = None):
    """One L-BFGS solve of the W_t surrogate; returns (model, inner result)."""
    fun = _make_wt_objective(model, reweight, hyper, T, Y, X)
    try:
        res = minimize(fun, model.W_t.ravel(), _inner_config(hyper, lbfgs))
    except NumericError as exc:
        raise NumericError(f"W_t phase failed: {exc}", iterate=exc.iterate,
                           last_model=model) from exc
    return model.with_W_t(res.x.reshape(model.d, model.n_terms)), res


def solve_wx_subproblem(model: ModelParams, reweight: ReweightState,
                        hyper: HyperParams, T: TfIdfMatrix, Y: LabelMatrix,
                        X: PartFeatureSet,
                        lbfgs: Optional[LbfgsConfig] = None):
    """One L-BFGS solve of the part-regressor surrogate.

    All parts are optimized jointly by default (they couple through the
    shared residual); ``hyper.joint_wx=False`` solves one part block at a
    time with the others held fixed. Returns (model, last inner result).
    """
    config = _inner_config(hyper, lbfgs)
    d, d_P = model.d, model.part_dim
    if hyper.joint_wx:
        parts = list(range(model.n_parts))
        fun = _make_wx_objective(model, reweight, hyper, T, Y, X, parts,
                                 np.zeros_like(Y.values))
        x0 = np.concatenate([w.ravel() for w in model.W_x])
        try:
            res = minimize(fun, x0, config)
        except NumericError as exc:
            raise NumericError(f"W_x phase failed: {exc}", iterate=exc.iterate,
                               last_model=model) from exc
        block = d * d_P
        W_x = [res.x[p * block:(p + 1) * block].reshape(d, d_P)
               for p in parts]
        return model.with_W_x(W_x), res

    B = model.W_t @ T.values
    current = list(model.W_x)
    res = None
    for p in range(model.n_parts):
        offset = np.zeros_like(Y.values)
        for q in range(model.n_parts):
            if q != p:
                offset += (current[q] @ X.features[q]).T @ B
        fun = _make_wx_objective(model.with_W_x(current), reweight, hyper,
                                 T, Y, X, [p], offset)
        try:
            res = minimize(fun, current[p].ravel(), config)
        except NumericError as exc:
            raise NumericError(
                f"W_x phase failed on part {p}: {exc}", iterate=exc.iterate,
                last_model=model.with_W_x(current)) from exc
        current[p] = res.x.reshape(d, d_P)
    return model.with_W_x(current), res


def fit(T: TfIdfMatrix, Y: LabelMatrix, X: PartFeatureSet, hyper: HyperParams,
        lbfgs: Optional[LbfgsConfig] = None,
        trace_sink: Optional[Callable] = None,
        checkpoint_fn: Optional[Callable] = None) -> FitResult:
    """Train the model by alternating reweighted phases.

    Args:
        T, Y, X: seen-class text matrix, one-hot labels, part features.
        hyper: training hyperparameters; ``hyper.seed`` drives the
            Gaussian initialization.
        lbfgs: optional override of the inner solver configuration.
        trace_sink: optional callable receiving each TraceRecord.
        checkpoint_fn: optional callable ``(iteration, model)`` invoked
            after every outer iteration.

    Returns:
        FitResult with the trained model and one trace record per outer
        iteration. Training stops early once the relative change of the
        exact objective drops below ``hyper.outer_tol`` (checked after
        both blocks have been updated at least once).
    """
    if T.n_classes < 2:
        raise InputError("training requires at least 2 classes")
    if Y.class_ids != T.class_ids:
        raise InputError("label classes do not match text matrix classes")
    model = init_params(hyper.d, T.n_terms, X.part_dim, X.n_parts, hyper.seed,
                        part_names=X.parts, vocab=T.vocab)
    trace = []
    prev_total = objective_value(model, hyper, T, Y, X).total
    wt_turn = False
    converged = False
    for iteration in range(1, hyper.max_outer_iters + 1):
        started = time.perf_counter()
        reweight = update_reweight(model, hyper.group_eps)
        try:
            if wt_turn:
                phase = "Wt"
                model, inner = solve_wt_subproblem(model, reweight, hyper,
                                                   T, Y, X, lbfgs)
            else:
                phase = "Wx"
                model, inner = solve_wx_subproblem(model, reweight, hyper,
                                                   T, Y, X, lbfgs)
        except NumericError as exc:
            if exc.last_model is None:
                exc.last_model = model
            raise
        wt_turn = not wt_turn
        comp = objective_value(model, hyper, T, Y, X)
        record = TraceRecord(
            iteration=iteration,
            phase=phase,
            total=comp.total,
            data_term=comp.data_term,
            variance_term=comp.variance_term,
            group_term=comp.group_term,
            group_sparsity=group_sparsity(model),
            inner_iterations=inner.iterations if inner is not None else 0,
            wall_time=time.perf_counter() - started,
        )
        trace.append(record)
        if trace_sink is not None:
            trace_sink(record)
        if checkpoint_fn is not None:
            checkpoint_fn(iteration, model)
        rel_change = abs(prev_total - comp.total) / max(abs(prev_total), 1e-12)
        prev_total = comp.total
        if iteration >= 2 and rel_change < hyper.outer_tol:
            converged = True
            break
    return FitResult(model, tuple(trace), converged)
