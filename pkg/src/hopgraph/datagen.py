"""Seeded synthetic interaction streams with cluster structure and scheduled concept drift.

Users and items belong to latent clusters. A user's event picks either one
of the user's few "habit" items (re-used coupons) or a fresh item drawn in
proportion to ``affinity[user cluster, item cluster] * popularity``. On a
drift day the affinity matrix is blended with a freshly drawn one and each
user's habits are re-drawn with probability equal to the drift strength.
Attributes are noisy views of the cluster labels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .features import Attribute, AttributeTable, write_attributes
from .graph import EventLog, SnapshotGraph, normalize_sym, write_events
from .numerics import csr, make_rng


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 200
    n_days: int = 20
    n_clusters: int = 8
    rate: float = 0.3
    drift: list[tuple[int, float]] = field(default_factory=lambda: [(7, 0.5), (17, 0.3)])
    popularity_skew: float = 0.5
    affinity_sharpness: float = 2.0
    n_habits: int = 3
    habit_prob: float = 0.5
    attr_signal: float = 0.25
    missing_rate: float = 0.05
    dense_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        self.drift = [(int(d), float(s)) for d, s in self.drift]
        for name in ("n_users", "n_items", "n_days", "n_clusters", "dense_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.rate >= 0 or not np.isfinite(self.rate):
            raise ValueError("rate must be a finite non-negative number")
        for day, s in self.drift:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"drift strength {s} on day {day} outside [0, 1]")
        for name in ("habit_prob", "attr_signal", "missing_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_habits < 0:
            raise ValueError("n_habits must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift"] = [list(x) for x in self.drift]
        return d


@dataclass
class LatentModel:
    user_cluster: np.ndarray
    item_cluster: np.ndarray
    affinity: np.ndarray
    popularity: np.ndarray
    daily_affinity: list[np.ndarray]


def _fresh_affinity(rng: np.random.Generator, c: int, sharpness: float) -> np.ndarray:
    return np.exp(sharpness * rng.standard_normal((c, c)))


def _cluster_item_probs(aff: np.ndarray, item_cluster: np.ndarray, popularity: np.ndarray) -> np.ndarray:
    w = aff[:, item_cluster] * popularity[None, :]
    return w / w.sum(axis=1, keepdims=True)


def generate(cfg: SynthConfig) -> tuple[EventLog, AttributeTable, LatentModel]:
    latent_rng = make_rng(cfg.seed, "datagen.latent")
    event_rng = make_rng(cfg.seed, "datagen.events")
    attr_rng = make_rng(cfg.seed, "datagen.attributes")
    c = cfg.n_clusters

    user_cluster = latent_rng.integers(0, c, cfg.n_users)
    item_cluster = latent_rng.integers(0, c, cfg.n_items)
    ranks = latent_rng.permutation(cfg.n_items) + 1
    popularity = ranks.astype(np.float64) ** -cfg.popularity_skew
    aff = _fresh_affinity(latent_rng, c, cfg.affinity_sharpness)
    drift = dict(cfg.drift)

    def draw_items(probs_by_cluster, clusters):
        cdf = np.cumsum(probs_by_cluster, axis=1)
        cdf[:, -1] = 1.0
        u = event_rng.random(clusters.size)
        return (cdf[clusters] <= u[:, None]).sum(axis=1).astype(np.int64)

    probs = _cluster_item_probs(aff, item_cluster, popularity)
    habits = draw_items(probs, np.repeat(user_cluster, cfg.n_habits)).reshape(cfg.n_users, cfg.n_habits)

    days, users, items, daily = [], [], [], []
    for t in range(cfg.n_days):
        s = drift.get(t, 0.0)
        if s > 0:
            aff = (1.0 - s) * aff + s * _fresh_affinity(latent_rng, c, cfg.affinity_sharpness)
            probs = _cluster_item_probs(aff, item_cluster, popularity)
            redraw = event_rng.random(cfg.n_users) < s
            if cfg.n_habits and redraw.any():
                fresh = draw_items(probs, np.repeat(user_cluster[redraw], cfg.n_habits))
                habits[redraw] = fresh.reshape(-1, cfg.n_habits)
        daily.append(aff.copy())
        counts = event_rng.poisson(cfg.rate, cfg.n_users)
        ev_users = np.repeat(np.arange(cfg.n_users), counts)
        if ev_users.size == 0:
            continue
        use_habit = (event_rng.random(ev_users.size) < cfg.habit_prob) if cfg.n_habits else np.zeros(ev_users.size, bool)
        ev_items = np.empty(ev_users.size, dtype=np.int64)
        slot = event_rng.integers(0, max(cfg.n_habits, 1), ev_users.size)
        ev_items[use_habit] = habits[ev_users[use_habit], slot[use_habit]]
        ev_items[~use_habit] = draw_items(probs, user_cluster[ev_users[~use_habit]])
        days.append(np.full(ev_users.size, t))
        users.append(ev_users)
        items.append(ev_items)

    if days:
        log = EventLog(np.concatenate(days), np.concatenate(users), np.concatenate(items),
                       cfg.n_users, cfg.n_items, cfg.n_days)
    else:
        log = EventLog.empty(cfg.n_users, cfg.n_items, cfg.n_days)
    attrs = _attributes(cfg, attr_rng, user_cluster, item_cluster, popularity)
    return log, attrs, LatentModel(user_cluster, item_cluster, daily[0] if daily else aff, popularity, daily)


def _noisy_category(rng, clusters, n_cats, signal, missing):
    """Cluster-determined code with probability ``signal``, else uniform; some entries missing."""
    base = clusters % n_cats
    codes = np.where(rng.random(clusters.size) < signal, base, rng.integers(0, n_cats, clusters.size))
    codes[rng.random(clusters.size) < missing] = -1
    return codes


def _noisy_signature(rng, clusters, centroids, signal, missing):
    noise = rng.standard_normal((clusters.size, centroids.shape[1]))
    vals = signal * centroids[clusters] + (1.0 - signal) * noise
    vals[rng.random(clusters.size) < missing] = np.nan
    return vals


def _attributes(cfg: SynthConfig, rng, user_cluster, item_cluster, popularity) -> AttributeTable:
    c, dd, sig, miss = cfg.n_clusters, cfg.dense_dim, cfg.attr_signal, cfg.missing_rate
    interest_centroids = rng.standard_normal((c, dd))
    text_centroids = rng.standard_normal((c, dd))
    # image features: fixed random projection of the text signature
    image_proj = rng.standard_normal((dd, dd)) / np.sqrt(dd)
    nu, ni = cfg.n_users, cfg.n_items
    users = [
        Attribute("gender", "categorical", _noisy_category(rng, user_cluster, 2, sig * 0.3, miss), 2),
        Attribute("age", "categorical", _noisy_category(rng, user_cluster, 6, sig, miss), 6),
        Attribute("os", "categorical", _noisy_category(rng, rng.integers(0, 3, nu), 3, 1.0, miss), 3),
        Attribute("interest", "dense", _noisy_signature(rng, user_cluster, interest_centroids, sig, miss)),
    ]
    pop_rank = np.argsort(np.argsort(-popularity))
    discount_level = np.minimum(pop_rank * 5 // max(ni, 1), 4)
    text = _noisy_signature(rng, item_cluster, text_centroids, sig, miss)
    image = _noisy_signature(rng, item_cluster, text_centroids @ image_proj, sig, miss)
    items = [
        Attribute("brand", "categorical", _noisy_category(rng, item_cluster, 2 * c, sig, miss), 2 * c),
        Attribute("discount", "categorical", _noisy_category(rng, discount_level, 5, 0.8, miss), 5),
        Attribute("text", "dense", text),
        Attribute("image", "dense", image),
    ]
    return AttributeTable(users, items)


def cardinalities(attrs: AttributeTable) -> dict[str, int]:
    return {f"{kind}.{a.name}": a.cardinality for kind in ("user", "item")
            for a in attrs.of_kind(kind) if a.kind == "categorical"}


def write_dataset(out_dir, cfg: SynthConfig, log: EventLog, attrs: AttributeTable) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"events": out / "events.csv", "attributes": out / "attributes.csv",
             "config": out / "synth_config.json"}
    write_events(paths["events"], log)
    write_attributes(paths["attributes"], attrs)
    meta = {"synth": cfg.to_dict(), "n_users": cfg.n_users, "n_items": cfg.n_items,
            "n_days": cfg.n_days, "cardinalities": cardinalities(attrs)}
    paths["config"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def drop_test_edges(snapshots: dict[int, SnapshotGraph], test_days) -> dict[int, SnapshotGraph]:
    """Replace every test-day snapshot with its edgeless counterpart (``Â = I``)."""
    test_days = set(test_days)
    out = {}
    for day, g in snapshots.items():
        if day in test_days:
            empty = csr(sp.csr_matrix((g.n_nodes, g.n_nodes)))
            out[day] = SnapshotGraph(g.day, g.n_users, g.n_items, empty, normalize_sym(empty), g.user_ids)
        else:
            out[day] = g
    return out


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = p / p.sum()
    q = q / q.sum()
    return 0.5 * float(np.abs(p - q).sum())
