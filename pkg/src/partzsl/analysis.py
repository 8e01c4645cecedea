"""Diagnostics over the learned term-part connections.

The connection between term i and part p is the vector ``W_x[p]^T wt_i``;
its Euclidean norm measures how strongly the term drives that part. The
grounding score ranks, for one image and its predicted class text, which
terms each part responded to.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError
from .model import ModelParams, group_norm_matrix, _check_parts_input


@dataclass(frozen=True)
class ConnectivityReport:
    """Term-part connection norms and the per-part top-k summaries.

    ``norms`` is P x d_T; ``top_terms[p]`` lists (term, norm) descending;
    ``overlap[p, q]`` is the top-k index overlap fraction between parts;
    ``part_mass[p]`` sums all norms of part p, ``topk_mass[p]`` only the
    top-k ones.
    """

    norms: np.ndarray
    top_terms: tuple
    overlap: np.ndarray
    part_mass: np.ndarray
    topk_mass: np.ndarray
    k: int


def _descending_order(values: np.ndarray) -> np.ndarray:
    # lexsort: primary key -values (descending), ties to the lower index.
    return np.lexsort((np.arange(values.size), -values))


def connectivity(model: ModelParams, k: int = 30) -> ConnectivityReport:
    """Summarize how strongly each term connects to each part.

    Ties in the top-k ranking break toward the lower vocabulary index,
    so the report is deterministic for any model.
    """
    if k < 1 or k > model.n_terms:
        raise InputError(f"top-k size must lie in [1, {model.n_terms}], got {k}")
    norms = group_norm_matrix(model)
    top_idx = [_descending_order(norms[p])[:k] for p in range(model.n_parts)]
    top_terms = tuple(
        tuple((model.vocab[i], float(norms[p, i])) for i in top_idx[p])
        for p in range(model.n_parts))
    overlap = np.zeros((model.n_parts, model.n_parts))
    sets = [set(map(int, idx)) for idx in top_idx]
    for p in range(model.n_parts):
        for q in range(model.n_parts):
            overlap[p, q] = len(sets[p] & sets[q]) / k
    return ConnectivityReport(
        norms=norms,
        top_terms=top_terms,
        overlap=overlap,
        part_mass=norms.sum(axis=1),
        topk_mass=np.array([norms[p, top_idx[p]].sum()
                            for p in range(model.n_parts)]),
        k=k,
    )


def ground_terms(model: ModelParams, x_parts, t_k, top_n: int = 10,
                 missing: Sequence[bool] = None) -> tuple:
    """Rank, per part, the class-text terms the sample's features respond to.

    The strength of term i at part p is ``(x_p . W_x[p]^T wt_i) * t_k[i]``,
    signed, and terms absent from the class text (``t_k[i] == 0``) are
    excluded. Returns one ranked tuple of (term, strength) per part.
    """
    t_k = np.asarray(t_k, dtype=np.float64)
    if t_k.shape != (model.n_terms,):
        raise InputError(
            f"class text vector has shape {t_k.shape}, "
            f"expected ({model.n_terms},)")
    if missing is None:
        missing = [False] * model.n_parts
    xs, missing = _check_parts_input(model, x_parts, missing)
    present = np.nonzero(t_k != 0.0)[0]
    rankings = []
    for p, x in enumerate(xs):
        if missing[p]:
            rankings.append(())
            continue
        strengths = (model.W_t.T @ (model.W_x[p] @ x)) * t_k
        order = _descending_order(strengths[present])
        ranked = tuple((model.vocab[present[i]], float(strengths[present[i]]))
                       for i in order[:top_n])
        rankings.append(ranked)
    return tuple(rankings)


def write_matrix_csv(path, matrix: np.ndarray, row_labels: Sequence[str],
                     col_labels: Sequence[str]) -> None:
    """CSV with labeled rows/columns, floats written exactly via repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(col_labels))
        for label, row in zip(row_labels, matrix):
            writer.writerow([label] + [repr(float(v)) for v in row])


def connectivity_report_dict(report: ConnectivityReport,
                             part_names: Sequence[str]) -> dict:
    return {
        "k": report.k,
        "part_mass": {name: float(m)
                      for name, m in zip(part_names, report.part_mass)},
        "topk_mass": {name: float(m)
                      for name, m in zip(part_names, report.topk_mass)},
        "top_terms": {
            name: [{"term": t, "norm": v} for t, v in report.top_terms[p]]
            for p, name in enumerate(part_names)},
        "overlap": [[float(v) for v in row] for row in report.overlap],
    }
