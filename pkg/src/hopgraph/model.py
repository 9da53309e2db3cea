"""Two-tower embeddings followed by graph propagation (DNN, GCN, JK-GCN, APPNP).

Every forward function has a matching hand-derived backward. Backward passes
rely on the normalized adjacency being symmetric, so ``Â^T = Â``.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .features import FeatureEncoder, encode_with_cache, init_encoder
from .numerics import MlpParams, ShapeError, init_mlp, mlp_backward, mlp_forward, spmm

BACKENDS = ("dnn", "gcn", "jk_gcn", "appnp")
CHECKPOINT_FORMAT = "hopgraph-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TowerNet:
    f_u: MlpParams
    f_i: MlpParams

    @property
    def dim(self) -> int:
        return self.f_u.out_dim


@dataclass
class PropagationConfig:
    backend: str = "appnp"
    K: int = 4
    alpha: float = 0.3

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "dnn":
            self.K = 0
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


# ---------------------------------------------------------------------------
# towers
# ---------------------------------------------------------------------------

def towers_forward(t: TowerNet, x_users: np.ndarray, x_items: np.ndarray):
    """``H`` = f_u(X_users) stacked over f_i(X_items). Returns ``(H, caches)``."""
    hu, cu = mlp_forward(t.f_u, x_users)
    hi, ci = mlp_forward(t.f_i, x_items)
    return np.vstack([hu, hi]), (cu, ci, hu.shape[0])


def towers_backward(t: TowerNet, caches, grad_h: np.ndarray):
    cu, ci, n_users = caches
    gu, gxu = mlp_backward(t.f_u, cu, grad_h[:n_users])
    gi, gxi = mlp_backward(t.f_i, ci, grad_h[n_users:])
    return (gu, gi), (gxu, gxi)


# ---------------------------------------------------------------------------
# APPNP
# ---------------------------------------------------------------------------

def _check_prop(h: np.ndarray, a_hat: sp.csr_matrix):
    if a_hat.shape[0] != a_hat.shape[1] or a_hat.shape[1] != h.shape[0]:
        raise ShapeError(f"propagation: Â {a_hat.shape} vs H {h.shape}")


def appnp_propagate(h: np.ndarray, a_hat: sp.csr_matrix, alpha: float, k: int) -> np.ndarray:
    """``Z <- (1-alpha) Â Z + alpha H`` applied ``k`` times from ``Z = H``."""
    _check_prop(h, a_hat)
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    z = h
    for _ in range(k):
        z = (1.0 - alpha) * spmm(a_hat, z) + alpha * h
    return z


def appnp_backward(grad_z: np.ndarray, a_hat: sp.csr_matrix, alpha: float, k: int) -> np.ndarray:
    """Gradient wrt ``H``: ``sum_j c_j Â^j grad_Z`` with ``c_j = alpha (1-alpha)^j`` (j<k), ``c_k = (1-alpha)^k``."""
    _check_prop(grad_z, a_hat)
    g = grad_z
    acc = np.zeros_like(grad_z)
    for _ in range(k):
        acc = acc + alpha * g
        g = (1.0 - alpha) * spmm(a_hat, g)
    return acc + g


def appnp_coefficients(alpha: float, k: int) -> np.ndarray:
    c = alpha * (1.0 - alpha) ** np.arange(k + 1)
    c[k] = (1.0 - alpha) ** k
    return c


# ---------------------------------------------------------------------------
# GCN / JK-GCN
# ---------------------------------------------------------------------------

@dataclass
class GcnCache:
    propagated: list[np.ndarray]
    preacts: list[np.ndarray]
    activations: list[str]
    outputs: list[np.ndarray]


def gcn_forward(h: np.ndarray, a_hat: sp.csr_matrix, weights: list[np.ndarray], activation: str = "relu"):
    """``Z_{l+1} = act(Â Z_l W_l)`` with the last layer linear. Returns ``(Z, cache)``."""
    _check_prop(h, a_hat)
    z = h
    cache = GcnCache([], [], [], [h])
    for l, w in enumerate(weights):
        if w.shape[0] != z.shape[1]:
            raise ShapeError(f"gcn layer {l}: weight {w.shape} vs input width {z.shape[1]}")
        p = spmm(a_hat, z)
        pre = p @ w
        act = "identity" if l == len(weights) - 1 else activation
        z = np.maximum(pre, 0.0) if act == "relu" else pre
        cache.propagated.append(p)
        cache.preacts.append(pre)
        cache.activations.append(act)
        cache.outputs.append(z)
    return z, cache


def gcn_backward(a_hat: sp.csr_matrix, weights: list[np.ndarray], cache: GcnCache, grad_z: np.ndarray):
    """Returns ``(grad_weights, grad_H)``; ``grad_z`` may be a list of per-layer output grads."""
    n = len(weights)
    extra = grad_z if isinstance(grad_z, list) else [None] * n + [grad_z]
    g = extra[n]
    grads = [None] * n
    for l in reversed(range(n)):
        if cache.activations[l] == "relu":
            g = g * (cache.preacts[l] > 0)
        grads[l] = cache.propagated[l].T @ g
        g = spmm(a_hat, g @ weights[l].T)
        if extra[l] is not None:
            g = g + extra[l]
    return grads, g


def jk_forward(h: np.ndarray, a_hat: sp.csr_matrix, weights: list[np.ndarray], projection: np.ndarray,
               activation: str = "relu"):
    """``Z = [Z_0 | Z_1 | ... | Z_K] @ projection`` over GCN layer outputs. Returns ``(Z, cache)``."""
    _, cache = gcn_forward(h, a_hat, weights, activation)
    cat = np.hstack(cache.outputs)
    if projection.shape[0] != cat.shape[1]:
        raise ShapeError(f"jk projection {projection.shape} vs concat width {cat.shape[1]}")
    return cat @ projection, (cache, cat)


def jk_backward(a_hat: sp.csr_matrix, weights: list[np.ndarray], projection: np.ndarray, cache, grad_z):
    """Returns ``(grad_weights, grad_projection, grad_H)``."""
    gcache, cat = cache
    grad_proj = cat.T @ grad_z
    grad_cat = grad_z @ projection.T
    d = gcache.outputs[0].shape[1]
    blocks = [grad_cat[:, l * d:(l + 1) * d] for l in range(len(weights) + 1)]
    grad_w, grad_h = gcn_backward(a_hat, weights, gcache, blocks)
    return grad_w, grad_proj, grad_h


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def score(z: np.ndarray, users, items) -> np.ndarray:
    """Dot-product score matrix ``S[a, b] = <z_users[a], z_items[b]>`` over node rows of ``Z``."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = z.shape[0]
    for ids in (users, items):
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError("node id out of range for Z")
    return z[users] @ z[items].T


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Structure of a recommender; the parameter values live in a flat dict."""

    user_attr_dims: dict[str, int]
    item_attr_dims: dict[str, int]
    dim: int = 128
    encoder_hidden: int = 128
    tower_hidden: int = 128
    prop: PropagationConfig = field(default_factory=PropagationConfig)

    def to_dict(self) -> dict:
        # attribute order fixes the encoder's summation order, so keep it as a list
        d = asdict(self)
        for kind in ("user_attr_dims", "item_attr_dims"):
            d[kind] = [[name, n] for name, n in d[kind].items()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for kind in ("user_attr_dims", "item_attr_dims"):
            d[kind] = dict((name, int(n)) for name, n in d[kind])
        d["prop"] = PropagationConfig(**d["prop"])
        return cls(**d)


@dataclass
class Recommender:
    spec: ModelSpec
    params: dict[str, np.ndarray]

    @property
    def user_encoder(self) -> FeatureEncoder:
        return _encoder_view(self.params, "enc.user", self.spec.user_attr_dims)

    @property
    def item_encoder(self) -> FeatureEncoder:
        return _encoder_view(self.params, "enc.item", self.spec.item_attr_dims)

    @property
    def towers(self) -> TowerNet:
        acts = ["relu", "identity"]
        return TowerNet(MlpParams.from_named(self.params, "tower.user", acts),
                        MlpParams.from_named(self.params, "tower.item", acts))

    @property
    def gcn_weights(self) -> list[np.ndarray]:
        return [self.params[f"gcn.{l}"] for l in range(self.spec.prop.K)]

    def with_params(self, params: dict[str, np.ndarray]) -> "Recommender":
        return Recommender(self.spec, params)


def _encoder_view(params, prefix, dims) -> FeatureEncoder:
    acts = ["relu", "identity"]
    return FeatureEncoder(list(dims), {a: MlpParams.from_named(params, f"{prefix}.{a}", acts) for a in dims})


def init_recommender(spec: ModelSpec, rng: np.random.Generator) -> Recommender:
    d = spec.dim
    params: dict[str, np.ndarray] = {}
    params.update(init_encoder(rng, spec.user_attr_dims, d, spec.encoder_hidden).named("enc.user"))
    params.update(init_encoder(rng, spec.item_attr_dims, d, spec.encoder_hidden).named("enc.item"))
    params.update(init_mlp(rng, [d, spec.tower_hidden, d]).named("tower.user"))
    params.update(init_mlp(rng, [d, spec.tower_hidden, d]).named("tower.item"))
    prop = spec.prop
    if prop.backend in ("gcn", "jk_gcn"):
        lim = np.sqrt(6.0 / (2 * d))
        for l in range(prop.K):
            params[f"gcn.{l}"] = rng.uniform(-lim, lim, size=(d, d))
    if prop.backend == "jk_gcn":
        lim = np.sqrt(6.0 / ((prop.K + 2) * d))
        params["jk.proj"] = rng.uniform(-lim, lim, size=((prop.K + 1) * d, d))
    return Recommender(spec, params)


@dataclass
class ForwardCache:
    user_inputs: dict
    item_inputs: dict
    enc_user: dict
    enc_item: dict
    towers: tuple
    prop: object
    a_hat: sp.csr_matrix
    hops: int


def embed(model: Recommender, user_inputs: dict[str, np.ndarray], item_inputs: dict[str, np.ndarray],
          a_hat: sp.csr_matrix, hops: int | None = None):
    """Encoders -> towers -> ``hops`` propagation steps. Returns ``(Z, cache)``.

    Node rows follow the snapshot layout: users first, then items.
    """
    prop = model.spec.prop
    k = prop.K if hops is None else hops
    if prop.backend == "dnn":
        k = 0
    if k > prop.K:
        raise ValueError(f"hops {k} exceed configured K={prop.K}")
    xu, cu = encode_with_cache(model.user_encoder, user_inputs)
    xi, ci = encode_with_cache(model.item_encoder, item_inputs)
    h, ct = towers_forward(model.towers, xu, xi)
    if prop.backend == "dnn":
        z, cp = h, None
    elif prop.backend == "appnp":
        z, cp = appnp_propagate(h, a_hat, prop.alpha, k), None
    elif prop.backend == "gcn":
        z, cp = gcn_forward(h, a_hat, model.gcn_weights[:k])
    else:
        proj = model.params["jk.proj"][: (k + 1) * model.spec.dim]
        z, cp = jk_forward(h, a_hat, model.gcn_weights[:k], proj)
    return z, ForwardCache(user_inputs, item_inputs, cu, ci, ct, cp, a_hat, k)


def embed_backward(model: Recommender, cache: ForwardCache, grad_z: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter given ``dL/dZ``; unused parameters get zeros."""
    prop = model.spec.prop
    k = cache.hops
    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    if prop.backend == "dnn":
        grad_h = grad_z
    elif prop.backend == "appnp":
        grad_h = appnp_backward(grad_z, cache.a_hat, prop.alpha, k)
    elif prop.backend == "gcn":
        gw, grad_h = gcn_backward(cache.a_hat, model.gcn_weights[:k], cache.prop, grad_z)
        for l, g in enumerate(gw):
            grads[f"gcn.{l}"] = g
    else:
        rows = (k + 1) * model.spec.dim
        gw, gproj, grad_h = jk_backward(cache.a_hat, model.gcn_weights[:k],
                                        model.params["jk.proj"][:rows], cache.prop, grad_z)
        for l, g in enumerate(gw):
            grads[f"gcn.{l}"] = g
        grads["jk.proj"][:rows] = gproj
    towers = model.towers
    (gu, gi), (gxu, gxi) = towers_backward(towers, cache.towers, grad_h)
    _put_mlp(grads, "tower.user", gu)
    _put_mlp(grads, "tower.item", gi)
    for prefix, enc, c, gx in (("enc.user", model.user_encoder, cache.enc_user, gxu),
                               ("enc.item", model.item_encoder, cache.enc_item, gxi)):
        for a in enc.attributes:
            _put_mlp(grads, f"{prefix}.{a}", mlp_backward(enc.mlps[a], c[a], gx)[0])
    return grads


def _put_mlp(grads, prefix, layer_grads):
    for i, (gw, gb) in enumerate(layer_grads):
        grads[f"{prefix}.{i}.W"] = gw
        grads[f"{prefix}.{i}.b"] = gb


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Recommender, extra: dict | None = None) -> None:
    """``.npz`` archive: ``__meta__`` JSON header plus one float64 array per parameter."""
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "spec": model.spec.to_dict(), "extra": extra or {},
            "shapes": {k: list(v.shape) for k, v in model.params.items()}}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **{f"p:{k}": np.asarray(v, dtype=np.float64) for k, v in model.params.items()})
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[Recommender, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format/version")
        # fresh aligned copies: BLAS kernels (and hence rounding) can depend on alignment
        params = {k[2:]: np.array(data[k], dtype=np.float64, order="C") for k in data.files if k.startswith("p:")}
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, header says {shape}")
    return Recommender(ModelSpec.from_dict(meta["spec"]), params), meta["extra"]
