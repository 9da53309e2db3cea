"""Deterministic numeric substrate: CSR products, shallow MLPs, Adam, seeded streams.

Dense matrices are plain ``float64`` numpy arrays. Sparse matrices are
``scipy.sparse.csr_matrix`` instances kept in canonical form (sorted column
indices, no explicit zeros), which makes the row-wise accumulation order of
``spmm`` ascending in column index and therefore reproducible.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


# ---------------------------------------------------------------------------
# sparse / dense products
# ---------------------------------------------------------------------------

def as_dense(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def csr(a, shape=None) -> sp.csr_matrix:
    """Build a canonical CSR matrix (sorted indices, duplicates summed, zeros dropped)."""
    m = sp.csr_matrix(a, shape=shape, dtype=np.float64)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    if not np.all(np.isfinite(m.data)):
        raise ValueError("sparse matrix has non-finite values")
    return m


def check_csr(a: sp.csr_matrix) -> None:
    if not sp.isspmatrix_csr(a):
        raise TypeError("expected scipy.sparse.csr_matrix")
    if np.any(np.diff(a.indptr) < 0):
        raise ValueError("row pointers must be non-decreasing")
    for r in range(a.shape[0]):
        cols = a.indices[a.indptr[r]:a.indptr[r + 1]]
        if cols.size > 1 and np.any(np.diff(cols) <= 0):
            raise ValueError(f"column indices of row {r} are not strictly increasing")
    if np.any(a.data == 0):
        raise ValueError("explicit zeros stored")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("non-finite values stored")


def spmm(a: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``a @ b``.

    Each output entry accumulates the stored entries of its row in ascending
    column order, so results are bit-identical across runs.
    """
    b = as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"spmm: {a.shape} x {b.shape}")
    if not a.has_sorted_indices:
        a = a.sorted_indices()
    return np.asarray(a @ b, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_dense(a), as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# shallow MLPs
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Row-major MLP: ``h_{l+1} = act_l(h_l @ W_l + b_l)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} input dim {w.shape[0]} does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.W"] = w
            out[f"{prefix}.{i}.b"] = b
        return out

    @classmethod
    def from_named(cls, params: dict[str, np.ndarray], prefix: str, activations: list[str]) -> "MlpParams":
        n = len(activations)
        return cls([params[f"{prefix}.{i}.W"] for i in range(n)],
                   [params[f"{prefix}.{i}.b"] for i in range(n)],
                   list(activations))


def init_mlp(rng: np.random.Generator, dims: list[int], activations: list[str] | None = None) -> MlpParams:
    """Glorot-uniform weights, zero biases. Default: relu hidden layers, identity output."""
    n = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n - 1) + ["identity"]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, list(activations))


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    h = as_dense(x)
    if h.shape[1] != p.in_dim:
        raise ShapeError(f"mlp input width {h.shape[1]} != {p.in_dim}")
    inputs, preacts = [], []
    for w, b, act in zip(p.weights, p.biases, p.activations):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    return h, MlpCache(inputs, preacts)


def mlp_backward(p: MlpParams, cache: MlpCache, grad_out: np.ndarray):
    """Returns ``([(dW, db), ...], grad_input)`` for the cached forward pass."""
    g = as_dense(grad_out)
    if g.shape != cache.preacts[-1].shape:
        raise ShapeError(f"grad_out {g.shape} != output {cache.preacts[-1].shape}")
    grads = [None] * len(p.weights)
    for i in reversed(range(len(p.weights))):
        if p.activations[i] == "relu":
            g = g * (cache.preacts[i] > 0)
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        g = g @ p.weights[i].T
    return grads, g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad {g.shape} != param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = dict(params), {}, {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g is None:
            m_new[name], v_new[name] = m, v
            continue
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(state.lr, b1, b2, state.eps, t, m_new, v_new)


# ---------------------------------------------------------------------------
# seeded streams
# ---------------------------------------------------------------------------

def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Philox generator for the named stream of ``seed``.

    Streams with different names are statistically independent; the same
    ``(seed, stream)`` pair always yields the same sequence.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(stream.encode()),))
    return np.random.Generator(np.random.Philox(ss))
