import numpy as np
import pytest

from conftest import finite_diff, rel_err
from hopgraph.features import (
    Attribute,
    AttributeTable,
    FeatureEncoder,
    encode,
    encode_backward,
    init_encoder,
    read_attributes,
    write_attributes,
)
from hopgraph.numerics import MlpParams, ShapeError, mlp_backward, mlp_forward


def table(rng, n_users=5, n_items=4):
    users = [Attribute("age", "categorical", [0, 2, -1, 1, 2], 3),
             Attribute("interest", "dense", rng.standard_normal((n_users, 4)))]
    users[1].values[3] = np.nan
    items = [Attribute("brand", "categorical", [1, 0, 1, 1], 2),
             Attribute("text", "dense", rng.standard_normal((n_items, 3)))]
    return AttributeTable(users, items)


def test_categorical_one_hot_and_missing():
    a = Attribute("g", "categorical", [1, -1, 0], 2)
    np.testing.assert_array_equal(a.matrix(), [[0, 1], [0, 0], [1, 0]])


def test_zero_encoder_gives_zero(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("user"), out_dim=6)
    for mlp in enc.mlps.values():
        for w in mlp.weights:
            w[:] = 0
    np.testing.assert_array_equal(encode(enc, t, kind="user"), 0.0)


def test_single_identity_attribute_is_raw(rng):
    x = rng.standard_normal((5, 4))
    enc = FeatureEncoder(["interest"], {"interest": MlpParams([np.eye(4)], [np.zeros(4)], ["identity"])})
    np.testing.assert_array_equal(encode(enc, {"interest": x}), x)


def test_two_branches_sum(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("user"), out_dim=6, hidden=5)
    inputs = t.inputs("user")
    branch = sum(mlp_forward(enc.mlps[a], inputs[a])[0] for a in enc.attributes)
    np.testing.assert_allclose(encode(enc, t, kind="user"), branch, atol=1e-14)


def test_node_subset_rows(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("user"), out_dim=6)
    full = encode(enc, t, kind="user")
    np.testing.assert_array_equal(encode(enc, t, [3, 0], kind="user"), full[[3, 0]])


def test_additive_over_attribute_subsets(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("user"), out_dim=6)
    inputs = t.inputs("user")
    first = FeatureEncoder(["age"], {"age": enc.mlps["age"]})
    second = FeatureEncoder(["interest"], {"interest": enc.mlps["interest"]})
    # a one-attribute suffix keeps the accumulation order identical
    assert (encode(enc, inputs) == encode(first, inputs) + encode(second, inputs)).all()


def test_missing_node_rejected(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("user"), out_dim=6)
    with pytest.raises(KeyError):
        encode(enc, t, [9], kind="user")


def test_attribute_width_mismatch(rng):
    t = table(rng)
    enc = init_encoder(rng, {"age": 4, "interest": 4}, out_dim=6)
    with pytest.raises(ShapeError):
        encode(enc, t, kind="user")


def test_backward_zero(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("item"), out_dim=6)
    grads = encode_backward(enc, t, None, np.zeros((4, 6)), kind="item")
    for layer_grads in grads.values():
        for gw, gb in layer_grads:
            assert not gw.any() and not gb.any()


def test_backward_single_branch_equals_mlp_backward(rng):
    x = rng.standard_normal((5, 4))
    mlp = init_encoder(rng, {"a": 4}, out_dim=3).mlps["a"]
    enc = FeatureEncoder(["a"], {"a": mlp})
    g = rng.standard_normal((5, 3))
    _, cache = mlp_forward(mlp, x)
    expect = mlp_backward(mlp, cache, g)[0]
    got = encode_backward(enc, {"a": x}, None, g)["a"]
    for (ew, eb), (gw, gb) in zip(expect, got):
        np.testing.assert_array_equal(ew, gw)
        np.testing.assert_array_equal(eb, gb)


def test_backward_finite_differences(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("user"), out_dim=5, hidden=4)
    for mlp in enc.mlps.values():
        for b in mlp.biases:
            b[:] = 0.1 * rng.standard_normal(b.shape)
    r = rng.standard_normal((5, 5))
    grads = encode_backward(enc, t, None, r, kind="user")

    def loss():
        return float((encode(enc, t, kind="user") * r).sum())

    for a in enc.attributes:
        for (gw, gb), w, b in zip(grads[a], enc.mlps[a].weights, enc.mlps[a].biases):
            assert rel_err(gw, finite_diff(loss, w)) <= 1e-4
            assert rel_err(gb, finite_diff(loss, b)) <= 1e-4


def test_backward_shape_checked(rng):
    t = table(rng)
    enc = init_encoder(rng, t.dims("user"), out_dim=6)
    with pytest.raises(ShapeError):
        encode_backward(enc, t, None, np.zeros((5, 2)), kind="user")


def test_attribute_csv_round_trip(tmp_path, rng):
    t = table(rng)
    write_attributes(tmp_path / "a.csv", t)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "node_kind,node_id,attr_name,value"
    back = read_attributes(tmp_path / "a.csv", 5, 4, {"user.age": 3, "item.brand": 2})
    for kind in ("user", "item"):
        for a, b in zip(t.of_kind(kind), back.of_kind(kind)):
            assert (a.name, a.kind, a.dim) == (b.name, b.kind, b.dim)
            np.testing.assert_array_equal(a.matrix(), b.matrix())
