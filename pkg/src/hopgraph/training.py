"""Training loop: node sampling, hop sampling, BPR loss, hand-derived backprop, Adam."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, TrainConfig
from .datagen import drop_test_edges
from .evaluation import evaluate_split
from .features import AttributeTable, read_attributes
from .graph import EventLog, SnapshotGraph, SplitSpec, build_snapshot, induced_subgraph, read_events, sample_users
from .hopsampling import HopSamplingConfig, effective_hops_for_eval, sample_hops
from .model import ModelSpec, PropagationConfig, Recommender, embed, embed_backward, init_recommender
from .numerics import AdamState, adam_step, make_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bpr_loss(pos_scores: np.ndarray, neg_scores: np.ndarray):
    """Mean of ``-log sigmoid(pos - neg)``. Returns ``(loss, grad_pos, grad_neg)``."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError(f"score length mismatch: {pos.shape} vs {neg.shape}")
    x = pos - neg
    n = x.size
    loss = float(np.logaddexp(0.0, -x).mean())
    g = -np.exp(-np.logaddexp(0.0, x)) / n  # -sigmoid(-x) / n
    return loss, g, -g


def sampled_softmax_loss(pos_scores: np.ndarray, neg_scores: np.ndarray):
    """Cross-entropy of the positive against its ``m`` negatives; ``neg_scores`` is ``(n, m)``."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(pos.size, -1)
    logits = np.hstack([pos[:, None], neg])
    lse = np.logaddexp.reduce(logits, axis=1)
    p = np.exp(logits - lse[:, None])
    n = pos.size
    loss = float((lse - pos).mean())
    return loss, (p[:, 0] - 1.0) / n, p[:, 1:] / n


# ---------------------------------------------------------------------------
# data context
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    log: EventLog
    attrs: AttributeTable
    split: SplitSpec
    window: int = 28
    snapshots: dict[int, SnapshotGraph] = field(default_factory=dict)

    def __post_init__(self):
        self.user_inputs = self.attrs.inputs("user")
        self.item_inputs = self.attrs.inputs("item")
        self.held_out = self.log.select((self.log.day >= self.split.held_out_days.start)
                                        & (self.log.day < self.split.held_out_days.stop))
        if not self.snapshots:
            for t in range(self.split.train.start, self.split.test.stop):
                self.snapshots[t] = build_snapshot(self.log, t, self.window, mask=self.held_out)

    @property
    def n_users(self) -> int:
        return self.log.n_users

    @property
    def n_items(self) -> int:
        return self.log.n_items


def load_dataset(directory, cfg: RunConfig) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "synth_config.json").read_text())
    log_ = read_events(directory / "events.csv", meta["n_users"], meta["n_items"], meta.get("n_days"))
    attrs = read_attributes(directory / "attributes.csv", meta["n_users"], meta["n_items"],
                            meta.get("cardinalities"))
    s = cfg.split
    return Dataset(log_, attrs, SplitSpec.contiguous(s.train, s.valid, s.test, s.start), cfg.window)


def model_spec(cfg: RunConfig, ds: Dataset) -> ModelSpec:
    return ModelSpec(ds.attrs.dims("user"), ds.attrs.dims("item"), cfg.dim, cfg.encoder_hidden,
                     cfg.tower_hidden, PropagationConfig(cfg.backend, cfg.effective_K, cfg.alpha))


def hop_config(cfg: RunConfig) -> HopSamplingConfig:
    return HopSamplingConfig(cfg.hop_sampling_enabled, max(cfg.effective_K, 1), cfg.hop_sampling.distribution)


# ---------------------------------------------------------------------------
# state and steps
# ---------------------------------------------------------------------------

@dataclass
class Streams:
    """Independent random streams of one run."""

    nodes: np.random.Generator
    hops: np.random.Generator
    batch: np.random.Generator
    schedule: np.random.Generator

    @classmethod
    def for_seed(cls, seed: int) -> "Streams":
        return cls(*(make_rng(seed, f"train.{name}") for name in ("nodes", "hops", "batch", "schedule")))


@dataclass
class TrainState:
    model: Recommender
    adam: AdamState
    epoch: int = 0
    step: int = 0
    best_valid: float = -np.inf
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] | None = None
    curves: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def best_model(self) -> Recommender:
        return self.model.with_params(self.best_params if self.best_params is not None else self.model.params)


def init_state(cfg: RunConfig, ds: Dataset) -> TrainState:
    model = init_recommender(model_spec(cfg, ds), make_rng(cfg.seed, "model.init"))
    t = cfg.train
    return TrainState(model, AdamState(t.lr, t.beta1, t.beta2, t.eps))


def _positives_for(ds: Dataset, day: int, users: np.ndarray):
    sel = (ds.log.day == day) & np.isin(ds.log.user, users)
    return ds.log.user[sel], ds.log.item[sel]


def loss_and_grads(model: Recommender, user_inputs: dict, item_inputs: dict, a_hat, k: int,
                   lu: np.ndarray, pi: np.ndarray, ni: np.ndarray, loss_kind: str = "bpr"):
    """Batch loss and parameter gradients.

    ``lu`` are user rows, ``pi`` positive item rows and ``ni`` an ``(n, m)``
    array of negative item rows, all indexing the snapshot's node layout.
    """
    z, cache = embed(model, user_inputs, item_inputs, a_hat, k)
    m = ni.shape[1]
    zu = z[lu]
    s_pos = np.einsum("bd,bd->b", zu, z[pi])
    s_neg = np.einsum("bd,bmd->bm", zu, z[ni])
    if loss_kind == "bpr":
        loss, g_pos, g_neg = bpr_loss(np.repeat(s_pos, m), s_neg.ravel())
        g_pos = g_pos.reshape(-1, m).sum(axis=1)
        g_neg = g_neg.reshape(-1, m)
    else:
        loss, g_pos, g_neg = sampled_softmax_loss(s_pos, s_neg)
    if not np.isfinite(loss):
        return loss, {}

    grad_z = np.zeros_like(z)
    np.add.at(grad_z, lu, g_pos[:, None] * z[pi] + np.einsum("bm,bmd->bd", g_neg, z[ni]))
    np.add.at(grad_z, pi, g_pos[:, None] * zu)
    np.add.at(grad_z, ni.ravel(), (g_neg[:, :, None] * zu[:, None, :]).reshape(-1, z.shape[1]))
    return loss, embed_backward(model, cache, grad_z)


def train_step(state: TrainState, ds: Dataset, day: int, tcfg: TrainConfig, hs: HopSamplingConfig,
               rng: Streams, on_snapshot: Callable | None = None) -> float:
    """One optimization step on training day ``day``; updates ``state`` in place, returns the loss."""
    n_sample = min(tcfg.users_per_step, ds.n_users)
    for _ in range(tcfg.max_resample):
        users = sample_users(rng.nodes, ds.n_users, n_sample)
        pos_u, pos_i = _positives_for(ds, day, users)
        if pos_u.size:
            break
    else:
        raise TrainingError(f"day {day}: no positive interactions among sampled users "
                            f"after {tcfg.max_resample} draws")
    sub, old_to_new, _ = induced_subgraph(ds.snapshots[day], users)
    if on_snapshot is not None:
        on_snapshot(day, sub)
    k = sample_hops(hs, rng.hops) if state.model.spec.prop.backend != "dnn" else 0

    take = rng.batch.choice(pos_u.size, size=tcfg.batch_size, replace=pos_u.size < tcfg.batch_size)
    lu = np.searchsorted(users, pos_u[take])
    pi = sub.n_users + pos_i[take]
    ni = sub.n_users + rng.batch.integers(0, ds.n_items, size=(take.size, tcfg.negatives))

    u_in = {a: x[users] for a, x in ds.user_inputs.items()}
    loss, grads = loss_and_grads(state.model, u_in, ds.item_inputs, sub.norm, k, lu, pi, ni, tcfg.loss)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at epoch {state.epoch}, step {state.step}, day {day}, hops {k}")
    params, state.adam = adam_step(state.adam, state.model.params, grads)
    state.model = state.model.with_params(params)
    state.step += 1
    state.losses.append(loss)
    return loss


def eval_graphs(ds: Dataset, empty_test: bool = False) -> dict[int, SnapshotGraph]:
    graphs = ds.snapshots
    if empty_test:
        graphs = drop_test_edges(graphs, ds.split.test)
    return graphs


def evaluate(state_model: Recommender, ds: Dataset, days, hs: HopSamplingConfig, k: int = 10,
             empty_test: bool = False) -> list[dict]:
    hops = effective_hops_for_eval(hs) if state_model.spec.prop.backend != "dnn" else 0
    return evaluate_split(state_model, ds.user_inputs, ds.item_inputs, ds.log, days,
                          eval_graphs(ds, empty_test), k, hops)


def mean_metric(rows: list[dict], metric: str) -> float:
    vals = [r["value"] for r in rows if r["metric"] == metric]
    return float(np.mean(vals)) if vals else float("nan")


def train(cfg: RunConfig, ds: Dataset, on_snapshot: Callable | None = None,
          on_epoch: Callable | None = None) -> TrainState:
    """Full run: epochs of per-day steps, validation after every epoch, best-checkpoint tracking.

    ``curves`` receives ``{"epoch", "split", "metric", "value"}`` records
    (day-averaged); epoch 0 is the untrained model.
    """
    cfg.validate()
    state = init_state(cfg, ds)
    hs = hop_config(cfg)
    rng = Streams.for_seed(cfg.seed)
    key = f"ndcg@{cfg.eval_k}"
    train_days = np.array(list(ds.split.train))

    def record(epoch: int):
        valid = evaluate(state.model, ds, ds.split.valid, hs, cfg.eval_k)
        splits = [("valid", valid)]
        if cfg.track_test:
            splits.append(("test", evaluate(state.model, ds, ds.split.test, hs, cfg.eval_k,
                                            empty_test=cfg.drop_test_edges)))
        for split, rows in splits:
            for metric in sorted({r["metric"] for r in rows}):
                state.curves.append({"epoch": epoch, "split": split, "metric": metric,
                                     "value": mean_metric(rows, metric)})
        score = mean_metric(valid, key)
        if np.isfinite(score) and score > state.best_valid:
            state.best_valid, state.best_epoch = score, epoch
            state.best_params = dict(state.model.params)
        if on_epoch is not None:
            on_epoch(epoch, state)

    record(0)
    for epoch in range(1, cfg.train.epochs + 1):
        state.epoch = epoch
        for day in rng.schedule.permutation(train_days):
            for _ in range(cfg.train.steps_per_day):
                train_step(state, ds, int(day), cfg.train, hs, rng, on_snapshot)
        record(epoch)
        log.debug("epoch %d loss %.5f best valid %s %.5f (epoch %d)", epoch, state.losses[-1], key,
                  state.best_valid, state.best_epoch)
    if state.best_params is None:
        state.best_params = dict(state.model.params)
        state.best_epoch = 0
    return state
