"""Bilinear part-classifier model.

Domain types for text features, part features, labels and learned
parameters, plus the pure model operations: synthesizing per-part visual
classifiers from a text vector, scoring candidate classes by summing
per-part responses, and evaluating the full training objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InputError, NumericError


def _as_float_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TfIdfMatrix:
    """Term-by-class weight matrix with its vocabulary and class order.

    ``values`` is d_T x K with nonnegative entries; column k is the text
    representation of ``class_ids[k]``.
    """

    values: np.ndarray
    vocab: tuple
    class_ids: tuple

    def __post_init__(self):
        values = _as_float_matrix(self.values, "tfidf values")
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "class_ids", tuple(self.class_ids))
        if values.shape != (len(self.vocab), len(self.class_ids)):
            raise DimensionMismatch(
                f"tfidf values shape {values.shape} does not match "
                f"{len(self.vocab)} terms x {len(self.class_ids)} classes"
            )
        if len(set(self.vocab)) != len(self.vocab):
            raise InputError("duplicate terms in vocabulary")
        if values.size and float(values.min()) < 0.0:
            raise InputError("tfidf weights must be nonnegative")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def n_terms(self) -> int:
        return len(self.vocab)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def select_classes(self, class_ids: Sequence[str]) -> "TfIdfMatrix":
        """Restrict to the given classes, in the given order."""
        index = {c: k for k, c in enumerate(self.class_ids)}
        try:
            cols = [index[c] for c in class_ids]
        except KeyError as exc:
            raise InputError(f"unknown class id {exc.args[0]!r}") from exc
        return TfIdfMatrix(self.values[:, cols], self.vocab, tuple(class_ids))


@dataclass(frozen=True)
class PartFeatureSet:
    """Per-part feature matrices with a per-sample missing-part mask.

    ``features[p]`` is d_P x N; ``missing[p, n]`` marks sample n as having
    no detection for part p, in which case its feature column is all zeros.
    """

    parts: tuple
    features: tuple
    missing: np.ndarray
    sample_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        feats = tuple(_as_float_matrix(f, f"part features[{p}]")
                      for p, f in enumerate(self.features))
        if not feats:
            raise InputError("at least one part is required")
        if len(feats) != len(self.parts):
            raise DimensionMismatch("one feature matrix per part is required")
        shape = feats[0].shape
        for p, f in enumerate(feats):
            if f.shape != shape:
                raise DimensionMismatch(
                    f"part {p} has shape {f.shape}, expected {shape}")
        n = shape[1]
        if n != len(self.sample_ids):
            raise DimensionMismatch(
                f"{n} feature columns but {len(self.sample_ids)} sample ids")
        missing = np.asarray(self.missing, dtype=bool)
        if missing.shape != (len(feats), n):
            raise DimensionMismatch(
                f"missing mask shape {missing.shape}, expected {(len(feats), n)}")
        for p, f in enumerate(feats):
            if missing[p].any() and np.any(f[:, missing[p]] != 0.0):
                raise InputError(
                    f"part {p} has nonzero features on missing samples")
        missing = missing.copy()
        missing.setflags(write=False)
        object.__setattr__(self, "features", tuple(_frozen(f) for f in feats))
        object.__setattr__(self, "missing", missing)

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def part_dim(self) -> int:
        return self.features[0].shape[0]

    def select_samples(self, indices: Sequence[int]) -> "PartFeatureSet":
        idx = list(indices)
        return PartFeatureSet(
            self.parts,
            tuple(f[:, idx] for f in self.features),
            self.missing[:, idx],
            tuple(self.sample_ids[i] for i in idx),
        )


@dataclass(frozen=True)
class LabelMatrix:
    """One-hot label matrix, N samples x K classes."""

    values: np.ndarray
    class_ids: tuple

    def __post_init__(self):
        values = _as_float_matrix(self.values, "label matrix")
        object.__setattr__(self, "class_ids", tuple(self.class_ids))
        if values.shape[1] != len(self.class_ids):
            raise DimensionMismatch(
                f"{values.shape[1]} label columns but "
                f"{len(self.class_ids)} class ids")
        if not np.all((values == 0.0) | (values == 1.0)):
            raise InputError("label matrix entries must be 0 or 1")
        if values.size and not np.all(values.sum(axis=1) == 1.0):
            raise InputError("each label row must be one-hot")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def labels(self) -> np.ndarray:
        """Integer class index per sample."""
        return np.argmax(self.values, axis=1)

    @classmethod
    def from_labels(cls, labels: Sequence[int], class_ids: Sequence[str]) -> "LabelMatrix":
        labels = np.asarray(labels, dtype=int)
        values = np.zeros((labels.size, len(class_ids)))
        values[np.arange(labels.size), labels] = 1.0
        return cls(values, tuple(class_ids))


@dataclass(frozen=True)
class ModelParams:
    """Learned transforms: one shared text projection and one regressor per part.

    ``W_t`` is d x d_T; each ``W_x[p]`` is d x d_P. Instances are immutable
    (arrays are write-protected) and safe to share across workers.
    """

    W_t: np.ndarray
    W_x: tuple
    part_names: tuple
    vocab: tuple

    def __post_init__(self):
        W_t = _as_float_matrix(self.W_t, "W_t")
        W_x = tuple(_as_float_matrix(w, f"W_x[{p}]")
                    for p, w in enumerate(self.W_x))
        object.__setattr__(self, "part_names", tuple(self.part_names))
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if not W_x:
            raise InputError("at least one part transform is required")
        if len(W_x) != len(self.part_names):
            raise DimensionMismatch("one W_x per part name is required")
        d = W_t.shape[0]
        if d < 1:
            raise InputError("latent dimension must be >= 1")
        if W_t.shape[1] != len(self.vocab):
            raise DimensionMismatch(
                f"W_t has {W_t.shape[1]} columns but vocab has "
                f"{len(self.vocab)} terms")
        for p, w in enumerate(W_x):
            if w.shape[0] != d:
                raise DimensionMismatch(
                    f"W_x[{p}] has {w.shape[0]} rows, expected {d}")
        if not np.isfinite(W_t).all() or any(not np.isfinite(w).all() for w in W_x):
            raise NumericError("model parameters contain non-finite entries")
        object.__setattr__(self, "W_t", _frozen(W_t))
        object.__setattr__(self, "W_x", tuple(_frozen(w) for w in W_x))

    @property
    def d(self) -> int:
        return self.W_t.shape[0]

    @property
    def n_terms(self) -> int:
        return self.W_t.shape[1]

    @property
    def n_parts(self) -> int:
        return len(self.W_x)

    @property
    def part_dim(self) -> int:
        return self.W_x[0].shape[1]

    def with_W_t(self, W_t: np.ndarray) -> "ModelParams":
        return ModelParams(W_t, self.W_x, self.part_names, self.vocab)

    def with_W_x(self, W_x: Sequence[np.ndarray]) -> "ModelParams":
        return ModelParams(self.W_t, tuple(W_x), self.part_names, self.vocab)


@dataclass(frozen=True)
class HyperParams:
    """Training hyperparameters.

    ``lambda1`` weighs the classifier-variance penalty, ``lambda2`` the
    group-sparsity penalty over term-part connection vectors. ``group_eps``
    smooths the reweighting so exactly-sparse groups never divide by zero.
    """

    lambda1: float = 0.01
    lambda2: float = 0.1
    d: int = 50
    max_outer_iters: int = 20
    inner_tol: float = 1e-6
    outer_tol: float = 1e-6
    group_eps: float = 1e-8
    seed: int = 0
    inner_max_iters: int = 60
    joint_wx: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputError("lambda1 and lambda2 must be nonnegative")
        if self.d < 1:
            raise InputError("latent dimension d must be a positive integer")
        if self.max_outer_iters < 0:
            raise InputError("max_outer_iters must be nonnegative")
        if self.inner_tol <= 0 or self.outer_tol <= 0 or self.group_eps <= 0:
            raise InputError("tolerances and group_eps must be positive")
        if self.inner_max_iters < 1:
            raise InputError("inner_max_iters must be a positive integer")


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Training objective split into its three terms."""

    total: float
    data_term: float
    variance_term: float
    group_term: float


def _check_text_vector(model: ModelParams, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (model.n_terms,):
        raise DimensionMismatch(
            f"text vector has shape {t.shape}, expected ({model.n_terms},)")
    return t


def synthesize_part_classifiers(model: ModelParams, t) -> list:
    """Predict one visual classifier vector per part from a text vector.

    The classifier for part p is ``W_x[p].T @ W_t @ t`` (length d_P).
    """
    t = _check_text_vector(model, t)
    latent = model.W_t @ t
    return [w.T @ latent for w in model.W_x]


def _check_parts_input(model: ModelParams, x_parts, missing):
    if len(x_parts) != model.n_parts:
        raise DimensionMismatch(
            f"{len(x_parts)} part vectors but model has {model.n_parts} parts")
    missing = [bool(m) for m in missing]
    if len(missing) != model.n_parts:
        raise DimensionMismatch("one missing flag per part is required")
    xs = []
    for p, x in enumerate(x_parts):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (model.part_dim,):
            raise DimensionMismatch(
                f"part {p} feature has shape {x.shape}, "
                f"expected ({model.part_dim},)")
        if missing[p] and np.any(x != 0.0):
            raise InputError(f"part {p} is marked missing but has nonzero features")
        xs.append(x)
    return xs, missing


def score_classes(model: ModelParams, T: TfIdfMatrix, x_parts, missing) -> np.ndarray:
    """Score every candidate class for one sample.

    ``score[k] = sum_p z_p(t_k) . x_parts[p]``; missing parts contribute
    exactly zero.
    """
    if T.vocab != model.vocab:
        raise InputError("candidate text matrix vocabulary does not match model")
    xs, missing = _check_parts_input(model, x_parts, missing)
    # sum_p z_p(t)^T x_p == (sum_p W_x[p] @ x_p)^T (W_t @ t)
    v = np.zeros(model.d)
    for p, x in enumerate(xs):
        if not missing[p]:
            v += model.W_x[p] @ x
    return v @ (model.W_t @ T.values)


def predict_label(model: ModelParams, T: TfIdfMatrix, x_parts, missing) -> int:
    """Predicted class index: argmax of the class scores, ties to lowest index."""
    if T.n_classes < 1:
        raise InputError("cannot predict over an empty class set")
    scores = score_classes(model, T, x_parts, missing)
    return int(np.argmax(scores))


def score_matrix(model: ModelParams, T: TfIdfMatrix, X: PartFeatureSet) -> np.ndarray:
    """Class scores for every sample at once (N x K)."""
    if T.vocab != model.vocab:
        raise InputError("candidate text matrix vocabulary does not match model")
    if X.parts != model.part_names:
        raise InputError("part feature set parts do not match model")
    if X.part_dim != model.part_dim:
        raise DimensionMismatch(
            f"part feature dim {X.part_dim} != model part dim {model.part_dim}")
    # (sum_p X_p^T W_x[p]^T) @ W_t @ T; missing parts have zero columns.
    V = np.zeros((model.d, X.n_samples))
    for w, f in zip(model.W_x, X.features):
        V += w @ f
    return V.T @ (model.W_t @ T.values)


def group_norm_matrix(model: ModelParams) -> np.ndarray:
    """Euclidean norms of the term-part connection vectors, P x d_T."""
    return np.stack([np.linalg.norm(w.T @ model.W_t, axis=0) for w in model.W_x])


def objective_value(model: ModelParams, hyper: HyperParams, T: TfIdfMatrix,
                    Y: LabelMatrix, X: PartFeatureSet) -> ObjectiveBreakdown:
    """Evaluate the training objective and report its three terms.

    data_term:     || (sum_p X_p^T W_x[p]^T) W_t T - Y ||_F^2
    variance_term: sum_p || W_x[p]^T W_t T ||_F^2
    group_term:    sum_p sum_i || W_x[p]^T wt_i ||_2   (exact, unsmoothed)

    total = data_term + lambda1 * variance_term + lambda2 * group_term.
    """
    if T.vocab != model.vocab:
        raise InputError("text matrix vocabulary does not match model")
    if X.parts != model.part_names:
        raise InputError("part feature set parts do not match model")
    if Y.class_ids != T.class_ids:
        raise InputError("label classes do not match text matrix classes")
    if Y.n_samples != X.n_samples:
        raise DimensionMismatch(
            f"{Y.n_samples} label rows but {X.n_samples} samples")
    if X.part_dim != model.part_dim:
        raise DimensionMismatch(
            f"part feature dim {X.part_dim} != model part dim {model.part_dim}")

    B = model.W_t @ T.values                      # d x K
    V = np.zeros((model.d, X.n_samples))          # sum_p W_x[p] X_p
    for w, f in zip(model.W_x, X.features):
        V += w @ f
    R = V.T @ B - Y.values
    data = float(np.sum(R * R))
    variance = float(sum(np.sum((w.T @ B) ** 2) for w in model.W_x))
    group = float(group_norm_matrix(model).sum())
    total = data + hyper.lambda1 * variance + hyper.lambda2 * group
    if not np.isfinite(total):
        raise NumericError("objective evaluated to a non-finite value")
    return ObjectiveBreakdown(total, data, variance, group)
