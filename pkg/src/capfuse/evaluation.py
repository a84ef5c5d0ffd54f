"""Distance ranking and nDCG@K scoring of retrieval runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import RetrievalDataset

GAINS = ("exp", "linear")


@dataclass
class RankedList:
    query_id: str
    ref_ids: list[str]
    distances: list[float]


@dataclass
class EvalReport:
    ks: list[int]
    per_query: dict[str, list[float]]
    mean_ndcg: list[float]
    flagged: list[str] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)


def rank_references(query_vec, refs: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]], query_id: str = "") -> RankedList:
    """Order references by ascending euclidean distance to the query.

    Exact distance ties fall back to ascending reference id.
    """
    items = list(refs.items()) if isinstance(refs, Mapping) else list(refs)
    if not items:
        raise ValueError("no references to rank")
    q = np.asarray(query_vec, dtype=np.float64)
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate reference ids")
    R = np.vstack([np.asarray(v, dtype=np.float64) for _, v in items])
    if R.shape[1] != q.shape[0]:
        raise ValueError(f"reference dim {R.shape[1]} != query dim {q.shape[0]}")
    dist = np.sqrt(((R - q) ** 2).sum(axis=1))
    order = np.lexsort((np.array(ids), dist))
    return RankedList(query_id, [ids[i] for i in order], [float(dist[i]) for i in order])


def gain(rel, kind: str = "exp"):
    if kind == "exp":
        return 2.0 ** rel - 1.0
    if kind == "linear":
        return float(rel)
    raise ValueError(f"gain must be one of {GAINS}")


def dcg(relevances: Sequence[int], k: int, gain_kind: str = "exp") -> float:
    """Sum of gain(rel_i) / log2(i + 1) over the first k positions (1-based)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(gain(r, gain_kind) / math.log2(i + 2) for i, r in enumerate(relevances[:k]))


def ndcg_at_k(relevances: Sequence[int], k: int, gain_kind: str = "exp") -> float:
    """DCG@k divided by the DCG@k of the same grades in descending order;
    0.0 when every grade is 0."""
    ideal = dcg(sorted(relevances, reverse=True), k, gain_kind)
    if ideal == 0:
        return 0.0
    return dcg(relevances, k, gain_kind) / ideal


def identity_embedder(X: np.ndarray) -> np.ndarray:
    return X


def evaluate(
    embedder: Callable[[np.ndarray], np.ndarray],
    inputs: Mapping[str, np.ndarray],
    ds: RetrievalDataset,
    eval_queries: Sequence[str],
    ks: Sequence[int] = (5, 10, 20, 30),
    gain_kind: str = "exp",
) -> EvalReport:
    """Rank each query's judged references and score nDCG at every cutoff.

    ``embedder`` maps a matrix of inputs (one row per image) to a matrix of
    vectors to compare; :func:`identity_embedder` ranks the raw inputs.
    """
    ks = [int(k) for k in ks]
    if not ks or min(ks) < 1:
        raise ValueError("ks must be a non-empty list of positive cutoffs")
    needed = list(dict.fromkeys(
        [q for q in eval_queries] + [r for q in eval_queries for r in ds.references(q)]
    ))
    missing = [i for i in needed if i not in inputs]
    if missing:
        raise KeyError(f"no input vector for id {missing[0]!r}")
    embedded = embedder(np.vstack([inputs[i] for i in needed])) if needed else np.zeros((0, 0))
    row = {id_: embedded[n] for n, id_ in enumerate(needed)}

    per_query, flagged = {}, []
    for q in eval_queries:
        refs = ds.references(q)
        ranked = rank_references(row[q], [(r, row[r]) for r in refs], q)
        grades = [ds.grade(q, r) for r in ranked.ref_ids]
        if not any(grades):
            flagged.append(q)
        per_query[q] = [ndcg_at_k(grades, k, gain_kind) for k in ks]
    if per_query:
        mean = [float(np.mean([v[j] for v in per_query.values()])) for j in range(len(ks))]
    else:
        mean = [0.0] * len(ks)
    return EvalReport(ks, per_query, mean, sorted(flagged))


def combine_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Average the per-K means across fold reports; pool their per-query rows."""
    if not reports:
        raise ValueError("no reports to combine")
    ks = reports[0].ks
    if any(r.ks != ks for r in reports):
        raise ValueError("reports disagree on ks")
    mean = [float(np.mean([r.mean_ndcg[j] for r in reports])) for j in range(len(ks))]
    per_query: dict[str, list[float]] = {}
    for r in reports:
        per_query.update(r.per_query)
    flagged = sorted({q for r in reports for q in r.flagged})
    return EvalReport(ks, per_query, mean, flagged, {"folds": str(len(reports))})


def _fmt(x: float) -> str:
    return repr(float(x))


def format_report(report: EvalReport) -> str:
    lines = ["K,mean_ndcg"]
    lines += [f"{k},{_fmt(v)}" for k, v in zip(report.ks, report.mean_ndcg)]
    lines += ["", "query_id,K,ndcg"]
    for q in sorted(report.per_query):
        lines += [f"{q},{k},{_fmt(v)}" for k, v in zip(report.ks, report.per_query[q])]
    for key in sorted(report.meta):
        lines.append(f"#{key}: {report.meta[key]}")
    if report.flagged:
        lines.append("#flagged: " + " ".join(report.flagged))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_report(report))


def read_report_means(path) -> dict[int, float]:
    """The ``K,mean_ndcg`` section of a report CSV."""
    means = {}
    with open(path) as fh:
        if fh.readline().strip() != "K,mean_ndcg":
            raise ValueError(f"{path}: not a report file")
        for line in fh:
            line = line.strip()
            if not line:
                break
            k, v = line.split(",")
            means[int(k)] = float(v)
    return means
