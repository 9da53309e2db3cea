"""Daily bipartite snapshot graphs built from implicit-feedback event logs.

Node layout of every snapshot: local users ``0..n_users-1`` first, then items
at ``n_users + item_id``. Items are never subsampled.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .numerics import csr

EVENT_HEADER = ("day", "user_id", "item_id")


@dataclass(frozen=True)
class InteractionEvent:
    day: int
    user: int
    item: int


@dataclass
class EventLog:
    """Columnar event log sorted by day (stable)."""

    day: np.ndarray
    user: np.ndarray
    item: np.ndarray
    n_users: int
    n_items: int
    n_days: int | None = None

    def __post_init__(self):
        self.day = np.asarray(self.day, dtype=np.int64)
        self.user = np.asarray(self.user, dtype=np.int64)
        self.item = np.asarray(self.item, dtype=np.int64)
        if not (self.day.shape == self.user.shape == self.item.shape) or self.day.ndim != 1:
            raise ValueError("day/user/item columns must be equal-length vectors")
        if len(self):
            if self.day.min() < 0:
                raise ValueError("negative day index")
            if self.user.min() < 0 or self.user.max() >= self.n_users:
                raise ValueError("user id outside the user pool")
            if self.item.min() < 0 or self.item.max() >= self.n_items:
                raise ValueError("item id outside the catalog")
            if self.n_days is not None and self.day.max() >= self.n_days:
                raise ValueError("event day beyond declared n_days")
        if np.any(np.diff(self.day) < 0):
            order = np.argsort(self.day, kind="stable")
            self.day, self.user, self.item = self.day[order], self.user[order], self.item[order]

    def __len__(self) -> int:
        return int(self.day.size)

    @classmethod
    def from_events(cls, events, n_users: int, n_items: int, n_days: int | None = None) -> "EventLog":
        events = list(events)
        return cls([e.day for e in events], [e.user for e in events], [e.item for e in events],
                   n_users, n_items, n_days)

    @classmethod
    def empty(cls, n_users: int, n_items: int, n_days: int | None = None) -> "EventLog":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, n_users, n_items, n_days)

    def events(self) -> list[InteractionEvent]:
        return [InteractionEvent(int(d), int(u), int(i)) for d, u, i in zip(self.day, self.user, self.item)]

    def select(self, mask: np.ndarray) -> "EventLog":
        return EventLog(self.day[mask], self.user[mask], self.item[mask],
                        self.n_users, self.n_items, self.n_days)

    def on_days(self, days) -> "EventLog":
        return self.select(np.isin(self.day, np.asarray(list(days), dtype=np.int64)))

    def concat(self, other: "EventLog") -> "EventLog":
        return EventLog(np.concatenate([self.day, other.day]), np.concatenate([self.user, other.user]),
                        np.concatenate([self.item, other.item]), self.n_users, self.n_items, self.n_days)

    def triple_keys(self) -> np.ndarray:
        """Unique int64 key per (day, user, item) triple."""
        return (self.day * self.n_users + self.user) * self.n_items + self.item


@dataclass(frozen=True)
class SplitSpec:
    train: range = range(0, 14)
    valid: range = range(14, 17)
    test: range = range(17, 20)

    def __post_init__(self):
        parts = (self.train, self.valid, self.test)
        for r in parts:
            if r.step != 1 or r.start < 0 or len(r) == 0:
                raise ValueError(f"split ranges must be non-empty contiguous day ranges, got {r}")
        if not (self.train.stop <= self.valid.start and self.valid.stop <= self.test.start):
            raise ValueError("split ranges must be disjoint and ordered train < valid < test")

    @classmethod
    def contiguous(cls, n_train: int = 14, n_valid: int = 3, n_test: int = 3, start: int = 0) -> "SplitSpec":
        a, b, c = start + n_train, start + n_train + n_valid, start + n_train + n_valid + n_test
        return cls(range(start, a), range(a, b), range(b, c))

    @property
    def held_out_days(self) -> range:
        return range(self.valid.start, self.test.stop)


def split_by_day(log: EventLog, spec: SplitSpec) -> tuple[EventLog, EventLog, EventLog]:
    if log.n_days is not None and spec.test.stop > log.n_days:
        raise ValueError(f"split reaches day {spec.test.stop - 1} but the log spans {log.n_days} days")
    parts = []
    covered = np.zeros(len(log), dtype=bool)
    for r in (spec.train, spec.valid, spec.test):
        m = (log.day >= r.start) & (log.day < r.stop)
        covered |= m
        parts.append(log.select(m))
    if not covered.all():
        bad = int(log.day[~covered][0])
        raise ValueError(f"event on day {bad} falls outside every split range")
    return tuple(parts)


@dataclass
class SnapshotGraph:
    day: int
    n_users: int
    n_items: int
    adj: sp.csr_matrix
    norm: sp.csr_matrix
    user_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.user_ids is None:
            self.user_ids = np.arange(self.n_users, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        return self.adj.nnz // 2

    def edges(self) -> np.ndarray:
        """``(E, 2)`` array of (global user id, item id) pairs, sorted."""
        coo = sp.triu(self.adj, format="coo")
        u = self.user_ids[coo.row]
        i = coo.col - self.n_users
        order = np.lexsort((i, u))
        return np.stack([u[order], i[order]], axis=1)


def normalize_sym(a: sp.spmatrix) -> sp.csr_matrix:
    """Renormalized adjacency ``D^-1/2 (A + I) D^-1/2`` with ``D = rowsum(A + I)``."""
    a = sp.csr_matrix(a, dtype=np.float64)
    n, m = a.shape
    if n != m:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if (a != a.T).nnz:
        raise ValueError("adjacency must be symmetric")
    if a.nnz and a.data.min() < 0:
        raise ValueError("adjacency must be non-negative")
    a_tilde = a + sp.identity(n, format="csr", dtype=np.float64)
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    d = sp.diags(1.0 / np.sqrt(deg))
    return csr(d @ a_tilde @ d)


def _bipartite_adj(users: np.ndarray, items: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    n = n_users + n_items
    if users.size:
        pairs = np.unique(np.stack([users, items], axis=1), axis=0)
        u, i = pairs[:, 0], pairs[:, 1] + n_users
    else:
        u = i = np.zeros(0, dtype=np.int64)
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    return csr(sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)))


def build_snapshot(log: EventLog, t: int, window: int = 28, mask: EventLog | None = None) -> SnapshotGraph:
    """Snapshot for day ``t``: binary edges from unmasked events on days ``[t-window, t-1]``."""
    if t < 0:
        raise ValueError("day must be non-negative")
    keep = (log.day >= t - window) & (log.day <= t - 1)
    if mask is not None and len(mask):
        keep &= ~np.isin(log.triple_keys(), mask.triple_keys())
    adj = _bipartite_adj(log.user[keep], log.item[keep], log.n_users, log.n_items)
    return SnapshotGraph(t, log.n_users, log.n_items, adj, normalize_sym(adj))


def sample_users(rng: np.random.Generator, n_pool: int, n_sample: int = 10240) -> np.ndarray:
    """Uniform sample without replacement, returned sorted."""
    if n_sample > n_pool:
        raise ValueError(f"cannot sample {n_sample} users from a pool of {n_pool}")
    if n_sample < 0:
        raise ValueError("n_sample must be non-negative")
    return np.sort(rng.choice(n_pool, size=n_sample, replace=False))


def induced_subgraph(g: SnapshotGraph, users) -> tuple[SnapshotGraph, dict[int, int], np.ndarray]:
    """Keep the given local users and every item; renormalize.

    Returns ``(subgraph, old_to_new, new_to_old)`` over local user indices.
    """
    users = np.unique(np.asarray(users, dtype=np.int64))
    if users.size and (users.min() < 0 or users.max() >= g.n_users):
        raise ValueError("unknown user id in induced_subgraph")
    keep = np.concatenate([users, g.n_users + np.arange(g.n_items)])
    adj = csr(g.adj[keep][:, keep])
    sub = SnapshotGraph(g.day, users.size, g.n_items, adj, normalize_sym(adj), g.user_ids[users])
    old_to_new = {int(u): k for k, u in enumerate(users)}
    return sub, old_to_new, users


def read_events(path, n_users: int | None = None, n_items: int | None = None,
                n_days: int | None = None) -> EventLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != EVENT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(EVENT_HEADER)}, got {','.join(header)}")
        rows = np.array([[int(x) for x in row] for row in reader if row], dtype=np.int64).reshape(-1, 3)
    if n_users is None:
        n_users = int(rows[:, 1].max()) + 1 if len(rows) else 0
    if n_items is None:
        n_items = int(rows[:, 2].max()) + 1 if len(rows) else 0
    return EventLog(rows[:, 0], rows[:, 1], rows[:, 2], n_users, n_items, n_days)


def write_events(path, log: EventLog) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        w.writerows(zip(log.day.tolist(), log.user.tolist(), log.item.tolist()))
