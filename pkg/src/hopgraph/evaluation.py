"""Top-k ranking accuracy and recommendation diversity metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import EventLog, SnapshotGraph
from .model import Recommender, embed

log = logging.getLogger(__name__)

RANKING_METRICS = ("ndcg", "map", "hit")
DIVERSITY_METRICS = ("ild", "coverage", "entropy")
ALL_METRICS = RANKING_METRICS + DIVERSITY_METRICS


@dataclass
class RecommendationList:
    user: int
    items: Sequence[int]
    relevant: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.items = [int(i) for i in self.items]
        self.relevant = frozenset(int(i) for i in self.relevant)
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"duplicate items in the list for user {self.user}")


def _as_lists(lists) -> list[RecommendationList]:
    return [lists] if isinstance(lists, RecommendationList) else list(lists)


def _check_k(k: int, minimum: int = 1):
    if k < minimum:
        raise ValueError(f"k must be >= {minimum}, got {k}")


def hit_matrix(lists: list[RecommendationList], k: int) -> tuple[np.ndarray, np.ndarray]:
    hits = np.zeros((len(lists), k), dtype=bool)
    n_rel = np.zeros(len(lists), dtype=np.int64)
    for r, rec in enumerate(lists):
        n_rel[r] = len(rec.relevant)
        for j, item in enumerate(rec.items[:k]):
            hits[r, j] = item in rec.relevant
    return hits, n_rel


def ranking_scores(hits: np.ndarray, n_rel: np.ndarray, k: int) -> dict[str, np.ndarray]:
    """Per-list NDCG@k, AP@k and HIT@k from a boolean ``(lists, k)`` hit matrix.

    Lists with no relevant items are dropped from the returned arrays.
    """
    _check_k(k)
    keep = n_rel > 0
    hits = hits[keep, :k].astype(np.float64)
    n_rel = n_rel[keep]
    if hits.shape[1] < k:
        hits = np.pad(hits, ((0, 0), (0, k - hits.shape[1])))
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    ideal = np.cumsum(discount)
    n_ideal = np.minimum(n_rel, k)
    dcg = hits @ discount
    ndcg = dcg / ideal[n_ideal - 1] if n_rel.size else dcg
    precision = np.cumsum(hits, axis=1) / np.arange(1, k + 1)
    ap = (precision * hits).sum(axis=1) / np.maximum(n_ideal, 1)
    hit = hits.any(axis=1).astype(np.float64)
    return {"ndcg": ndcg, "map": ap, "hit": hit}


def _mean_ranking(lists, k: int, metric: str) -> float:
    _check_k(k)
    lists = _as_lists(lists)
    hits, n_rel = hit_matrix(lists, k)
    vals = ranking_scores(hits, n_rel, k)[metric]
    return float(vals.mean()) if vals.size else float("nan")


def ndcg_at_k(lists, k: int = 10) -> float:
    """Mean binary-relevance NDCG@k over lists that have at least one relevant item."""
    return _mean_ranking(lists, k, "ndcg")


def map_at_k(lists, k: int = 10) -> float:
    return _mean_ranking(lists, k, "map")


def hit_at_k(lists, k: int = 10) -> float:
    return _mean_ranking(lists, k, "hit")


def ild_scores(rec_items: np.ndarray, item_emb: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Per-list mean pairwise cosine distance; also returns how many zero-norm embeddings were met."""
    _check_k(k, 2)
    idx = np.asarray(rec_items, dtype=np.int64)[:, :k]
    norms = np.linalg.norm(item_emb, axis=1)
    zero = norms == 0
    unit = item_emb / np.where(zero, 1.0, norms)[:, None]
    e = unit[idx]
    sims = e @ e.transpose(0, 2, 1)
    iu = np.triu_indices(idx.shape[1], 1)
    dist = 1.0 - sims[:, iu[0], iu[1]]
    n_pairs = idx.shape[1] * (idx.shape[1] - 1) / 2
    return dist.sum(axis=1) / n_pairs, int(zero[np.unique(idx)].sum())


def ild_at_k(lists, item_emb: np.ndarray, k: int = 10) -> float:
    """Mean intra-list cosine distance; zero-norm embeddings count as zero similarity."""
    _check_k(k, 2)
    lists = _as_lists(lists)
    mat = np.array([rec.items[:k] for rec in lists], dtype=np.int64)
    vals, n_zero = ild_scores(mat, np.asarray(item_emb, dtype=np.float64), k)
    if n_zero:
        log.warning("ILD: %d recommended items have zero-norm embeddings", n_zero)
    return float(vals.mean())


def _item_counts(lists) -> np.ndarray:
    if isinstance(lists, np.ndarray):
        return np.unique(lists, return_counts=True)[1]
    items = [i for rec in _as_lists(lists) for i in rec.items]
    return np.unique(np.asarray(items, dtype=np.int64), return_counts=True)[1]


def item_coverage(lists, catalog_size: int) -> float:
    if catalog_size < 1:
        raise ValueError("catalog must hold at least one item")
    counts = _item_counts(lists)
    if counts.size == 0:
        raise ValueError("no recommendations to cover")
    return counts.size / catalog_size


def shannon_entropy(lists) -> float:
    """Base-2 entropy of item recommendation frequencies across all lists."""
    counts = _item_counts(lists)
    if counts.size == 0:
        raise ValueError("no recommendations")
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def aggregate_ci(values) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width ``1.96 * s / sqrt(n)``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two seeds for a confidence interval")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores per row; ties go to the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def day_relevance(log: EventLog, day: int) -> dict[int, set[int]]:
    rel: dict[int, set[int]] = {}
    sel = log.day == day
    for u, i in zip(log.user[sel].tolist(), log.item[sel].tolist()):
        rel.setdefault(u, set()).add(i)
    return rel


def metrics_from_embeddings(z: np.ndarray, n_users: int, relevance: dict[int, set[int]],
                            k: int = 10) -> dict[str, float]:
    """All six metrics for one day given propagated embeddings (users first, then items)."""
    n_items = z.shape[0] - n_users
    scores = z[:n_users] @ z[n_users:].T
    recs = top_k(scores, k)
    users = np.array(sorted(relevance), dtype=np.int64)
    out: dict[str, float] = {}
    if users.size:
        rel_lists = recs[users]
        hits = np.zeros(rel_lists.shape, dtype=bool)
        n_rel = np.zeros(users.size, dtype=np.int64)
        for r, u in enumerate(users.tolist()):
            rel = relevance[u]
            n_rel[r] = len(rel)
            hits[r] = [i in rel for i in rel_lists[r].tolist()]
        for name, vals in ranking_scores(hits, n_rel, k).items():
            out[name] = float(vals.mean())
    if n_users:
        ild, n_zero = ild_scores(recs, z[n_users:], k)
        if n_zero:
            log.warning("ILD: %d recommended items have zero-norm embeddings", n_zero)
        out["ild"] = float(ild.mean())
        out["coverage"] = item_coverage(recs, n_items)
        out["entropy"] = shannon_entropy(recs)
    return out


def evaluate_split(model: Recommender, user_inputs: dict, item_inputs: dict, log: EventLog, days,
                   graphs: dict[int, SnapshotGraph], k: int = 10, hops: int | None = None) -> list[dict]:
    """Metric rows ``{"day", "metric", "value"}`` for each evaluation day.

    Uses the full user pool, full-depth propagation on each day's (masked)
    snapshot, and top-k over the whole catalog. Days without any relevant
    user yield no ranking rows.
    """
    rows = []
    for day in days:
        if day not in graphs:
            raise KeyError(f"no snapshot for evaluation day {day}")
        g = graphs[day]
        z, _ = embed(model, user_inputs, item_inputs, g.norm, hops)
        relevance = day_relevance(log, day)
        if not relevance:
            continue
        for name, value in metrics_from_embeddings(z, g.n_users, relevance, k).items():
            rows.append({"day": int(day), "metric": f"{name}@{k}", "value": value})
    return rows
