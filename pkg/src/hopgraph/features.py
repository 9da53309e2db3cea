"""Per-attribute shallow MLP encoders whose outputs are summed into the feature matrix."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .numerics import MlpParams, ShapeError, init_mlp, mlp_backward, mlp_forward

ATTR_HEADER = ("node_kind", "node_id", "attr_name", "value")
NODE_KINDS = ("user", "item")


@dataclass
class Attribute:
    """One node attribute.

    Categorical values are integer codes with ``-1`` for missing; dense values
    are a float matrix whose missing rows are NaN. Both encode missing as an
    all-zero input row.
    """

    name: str
    kind: str
    values: np.ndarray
    cardinality: int = 0

    def __post_init__(self):
        if self.kind == "categorical":
            self.values = np.asarray(self.values, dtype=np.int64)
            if self.values.ndim != 1:
                raise ValueError(f"{self.name}: categorical values must be a vector")
            if self.values.size and self.values.max() >= self.cardinality:
                raise ValueError(f"{self.name}: code >= cardinality {self.cardinality}")
        elif self.kind == "dense":
            self.values = np.asarray(self.values, dtype=np.float64)
            if self.values.ndim != 2:
                raise ValueError(f"{self.name}: dense values must be a matrix")
        else:
            raise ValueError(f"unknown attribute kind {self.kind!r}")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.cardinality if self.kind == "categorical" else self.values.shape[1]

    def matrix(self, nodes=None) -> np.ndarray:
        idx = np.arange(self.n_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_nodes):
            raise KeyError(f"{self.name}: node id out of range")
        if self.kind == "categorical":
            codes = self.values[idx]
            out = np.zeros((idx.size, self.cardinality))
            present = codes >= 0
            out[np.nonzero(present)[0], codes[present]] = 1.0
            return out
        return np.nan_to_num(self.values[idx], nan=0.0)


@dataclass
class AttributeTable:
    user: list[Attribute] = field(default_factory=list)
    item: list[Attribute] = field(default_factory=list)

    def of_kind(self, kind: str) -> list[Attribute]:
        if kind not in NODE_KINDS:
            raise ValueError(f"node kind must be one of {NODE_KINDS}")
        return self.user if kind == "user" else self.item

    def inputs(self, kind: str, nodes=None) -> dict[str, np.ndarray]:
        return {a.name: a.matrix(nodes) for a in self.of_kind(kind)}

    def dims(self, kind: str) -> dict[str, int]:
        return {a.name: a.dim for a in self.of_kind(kind)}


@dataclass
class FeatureEncoder:
    attributes: list[str]
    mlps: dict[str, MlpParams]

    @property
    def out_dim(self) -> int:
        return self.mlps[self.attributes[0]].out_dim

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for a in self.attributes:
            out.update(self.mlps[a].named(f"{prefix}.{a}"))
        return out

    def with_params(self, params: dict[str, np.ndarray], prefix: str) -> "FeatureEncoder":
        return FeatureEncoder(list(self.attributes), {
            a: MlpParams.from_named(params, f"{prefix}.{a}", self.mlps[a].activations)
            for a in self.attributes})


def init_encoder(rng: np.random.Generator, input_dims: dict[str, int], out_dim: int = 128,
                 hidden: int | None = None) -> FeatureEncoder:
    """One hidden relu layer per attribute (``hidden`` defaults to ``out_dim``)."""
    hidden = out_dim if hidden is None else hidden
    names = list(input_dims)
    return FeatureEncoder(names, {a: init_mlp(rng, [input_dims[a], hidden, out_dim]) for a in names})


def _check_inputs(enc: FeatureEncoder, inputs: dict[str, np.ndarray]) -> int:
    n = None
    for a in enc.attributes:
        if a not in inputs:
            raise KeyError(f"missing attribute {a!r}")
        x = inputs[a]
        if x.shape[1] != enc.mlps[a].in_dim:
            raise ShapeError(f"attribute {a!r}: width {x.shape[1]} != encoder input {enc.mlps[a].in_dim}")
        if n is not None and x.shape[0] != n:
            raise ShapeError("attribute inputs disagree on node count")
        n = x.shape[0]
    return n


def encode_with_cache(enc: FeatureEncoder, inputs: dict[str, np.ndarray]):
    n = _check_inputs(enc, inputs)
    x = np.zeros((n, enc.out_dim))
    caches = {}
    for a in enc.attributes:
        out, caches[a] = mlp_forward(enc.mlps[a], inputs[a])
        x = x + out
    return x, caches


def encode(enc: FeatureEncoder, attrs: AttributeTable | dict[str, np.ndarray], nodes=None,
           kind: str = "user") -> np.ndarray:
    """Sum of per-attribute MLP outputs for ``nodes`` (rows in the given order)."""
    inputs = attrs.inputs(kind, nodes) if isinstance(attrs, AttributeTable) else _take(attrs, nodes)
    return encode_with_cache(enc, inputs)[0]


def encode_backward(enc: FeatureEncoder, attrs, nodes, grad_x: np.ndarray, kind: str = "user",
                    caches=None) -> dict[str, list[tuple[np.ndarray, np.ndarray]]]:
    """Per-attribute parameter gradients; the sum node passes ``grad_x`` to every branch."""
    if caches is None:
        inputs = attrs.inputs(kind, nodes) if isinstance(attrs, AttributeTable) else _take(attrs, nodes)
        x, caches = encode_with_cache(enc, inputs)
        if grad_x.shape != x.shape:
            raise ShapeError(f"grad_X {grad_x.shape} != X {x.shape}")
    return {a: mlp_backward(enc.mlps[a], caches[a], grad_x)[0] for a in enc.attributes}


def _take(inputs: dict[str, np.ndarray], nodes) -> dict[str, np.ndarray]:
    if nodes is None:
        return inputs
    idx = np.asarray(nodes, dtype=np.int64)
    return {a: x[idx] for a, x in inputs.items()}


def read_attributes(path, n_users: int, n_items: int,
                    cardinalities: dict[str, int] | None = None) -> AttributeTable:
    """Parse ``node_kind,node_id,attr_name,value`` rows.

    ``name.j`` attribute names are component ``j`` of a dense vector; other
    names are categorical codes. An empty value marks a missing entry.
    ``cardinalities`` maps ``"kind.name"`` to the category count; otherwise
    it is inferred as the largest observed code plus one.
    """
    cardinalities = cardinalities or {}
    sizes = {"user": n_users, "item": n_items}
    cat: dict = defaultdict(dict)
    dense: dict = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != ATTR_HEADER:
            raise ValueError(f"{path}: expected header {','.join(ATTR_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            kind, node, name, value = row
            if kind not in sizes:
                raise ValueError(f"{path}:{lineno}: unknown node kind {kind!r}")
            node = int(node)
            base, dot, comp = name.rpartition(".")
            if dot and comp.isdigit():
                dense[(kind, base)][(node, int(comp))] = float(value) if value else np.nan
            else:
                cat[(kind, name)][node] = int(value) if value else -1
    table = AttributeTable()
    for (kind, name), vals in cat.items():
        codes = np.full(sizes[kind], -1, dtype=np.int64)
        for node, v in vals.items():
            codes[node] = v
        card = cardinalities.get(f"{kind}.{name}", int(codes.max()) + 1)
        table.of_kind(kind).append(Attribute(name, "categorical", codes, card))
    for (kind, name), vals in dense.items():
        dim = max(j for _, j in vals) + 1
        mat = np.full((sizes[kind], dim), np.nan)
        for (node, j), v in vals.items():
            mat[node, j] = v
        table.of_kind(kind).append(Attribute(name, "dense", mat))
    return table


def write_attributes(path, table: AttributeTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTR_HEADER)
        for kind in NODE_KINDS:
            for a in table.of_kind(kind):
                for node in range(a.n_nodes):
                    if a.kind == "categorical":
                        v = int(a.values[node])
                        w.writerow((kind, node, a.name, "" if v < 0 else v))
                    else:
                        for j, v in enumerate(a.values[node]):
                            w.writerow((kind, node, f"{a.name}.{j}", "" if np.isnan(v) else repr(float(v))))
