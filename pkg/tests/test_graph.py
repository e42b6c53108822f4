import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockpunch.graph import (
    BranchStructure,
    GraphError,
    LayerSpec,
    ModelFormatError,
    ModelGraph,
    WeightFormatError,
    WeightTensor,
    column_position,
    count_flops,
    count_weights,
    dumps_model,
    load_model,
    load_weights,
    loads_model,
    random_weights,
    save_model,
    save_weights,
)


def conv(lid, m, n, k=3, inputs=(), stride=1, padding=None):
    return LayerSpec(lid, "conv", m, n, (k, k), stride, k // 2 if padding is None else padding, tuple(inputs))


def test_single_conv_weight_count():
    g = ModelGraph((conv("a", 8, 4),), (4, 10, 10))
    assert count_weights(g).total == 288


def test_two_layer_counts_and_fraction():
    g = ModelGraph((conv("a", 8, 4, 1), conv("b", 8, 8, 3, ["a"])), (4, 6, 6))
    wc = count_weights(g)
    assert wc.per_layer == {"a": 32, "b": 576}
    assert wc.total == 608
    assert wc.fraction_3x3 == 576 / 608


def test_flops_trivial_cases():
    g = ModelGraph((conv("a", 1, 1, 1),), (1, 1, 1))
    assert count_flops(g).total == 2
    # 8x4 3x3 conv with a 10x10 output
    g = ModelGraph((conv("a", 8, 4, 3, padding=1),), (4, 10, 10))
    assert count_flops(g).total == 2 * 8 * 4 * 9 * 100 == 57_600


def test_fc_flops_and_shape():
    g = ModelGraph(
        (conv("a", 4, 2, 3), LayerSpec("fc", "fc", 3, 4 * 5 * 5, (1, 1), 1, 0, ("a",))), (2, 5, 5)
    )
    assert g.infer_shapes()["fc"] == (3, 1, 1)
    assert count_flops(g).per_layer["fc"] == 2 * 3 * 100


def test_column_position_bijection():
    kernel = (3, 3)
    seen = {column_position(c, kernel) for c in range(4 * 9)}
    assert len(seen) == 36
    assert column_position(13, kernel) == (1, 1, 1)


def test_weight_tensor_gemm_view_layout(rng):
    vals = rng.standard_normal(2 * 3 * 3 * 2).astype(np.float32)
    wt = WeightTensor("a", (2, 3, 3, 2), vals)
    t = wt.tensor
    for c in range(3 * 3 * 2):
        ch, ky, kx = column_position(c, (3, 2))
        assert wt.gemm_view[1, c] == t[1, ch, ky, kx]


def test_weight_tensor_rejects_bad_length():
    with pytest.raises(ValueError):
        WeightTensor("a", (2, 2, 1, 1), np.zeros(3, np.float32))


def test_cycle_detected():
    text = """blockpunch-model 1
input 1 4 4
layer id=a kind=conv filters=1 in_channels=1 kernel=1x1 inputs=b
layer id=b kind=conv filters=1 in_channels=1 kernel=1x1 inputs=a
"""
    with pytest.raises(GraphError, match="cycle detected"):
        loads_model(text)


def test_unknown_kind_named_with_line_and_field():
    text = "blockpunch-model 1\ninput 1 4 4\nlayer id=a kind=deconv inputs=-\n"
    with pytest.raises(ModelFormatError, match="deconv") as err:
        loads_model(text)
    assert err.value.line == 3
    assert err.value.field == "kind"


@pytest.mark.parametrize(
    "body, needle",
    [
        ("layer id=a kind=conv filters=x in_channels=1 inputs=-", "filters"),
        ("layer id=a kind=conv filters=1 in_channels=1 kernel=3by3 inputs=-", "kernel"),
        ("layer id=a kind=conv filters=1 in_channels=1 inputs=nowhere", "does not resolve"),
        ("layer id=a kind=conv filters=1 in_channels=1 color=red inputs=-", "color"),
        ("layer kind=conv filters=1 in_channels=1 inputs=-", "id"),
        ("widget id=a", "unknown record"),
    ],
)
def test_malformed_records(body, needle):
    with pytest.raises(ModelFormatError, match=needle):
        loads_model(f"blockpunch-model 1\ninput 1 4 4\n{body}\n")


def test_missing_header_and_version():
    with pytest.raises(ModelFormatError, match="header"):
        loads_model("input 1 2 2\n")
    with pytest.raises(ModelFormatError, match="version"):
        loads_model("blockpunch-model 9\ninput 1 2 2\n")


def test_duplicate_ids_rejected():
    with pytest.raises(GraphError, match="duplicate"):
        ModelGraph((conv("a", 1, 1, 1), conv("a", 1, 1, 1)), (1, 2, 2))


def test_branches_must_be_disjoint():
    layers = (conv("a", 2, 1, 1), conv("b", 2, 2, 1, ["a"]), conv("c", 2, 2, 1, ["a"]))
    with pytest.raises(GraphError):
        ModelGraph(layers, (1, 2, 2), (BranchStructure("s", "conv-branches", (("b",), ("b", "c"))),))
    with pytest.raises(GraphError):
        ModelGraph(
            layers,
            (1, 2, 2),
            (
                BranchStructure("s", "conv-branches", (("b",), ("c",))),
                BranchStructure("t", "nonconv-branches", (("c",),)),
            ),
        )


def test_shape_errors():
    g = ModelGraph((conv("a", 2, 3, 3),), (4, 5, 5))
    with pytest.raises(GraphError):
        g.infer_shapes()
    cat = ModelGraph(
        (conv("a", 2, 1, 3, stride=2), conv("b", 2, 1, 1), LayerSpec("c", "concat", inputs=("a", "b"))),
        (1, 8, 8),
    )
    with pytest.raises(GraphError):
        cat.infer_shapes()


def test_fixture_round_trips(yolo, toy, micro, tmp_path):
    for model in (yolo, toy, micro):
        path = tmp_path / "m.model"
        save_model(model, path)
        again = load_model(path)
        assert again == model
        assert dumps_model(again) == dumps_model(model)


def test_weights_round_trip_bit_exact(micro, tmp_path):
    w = random_weights(micro, seed=3)
    path = tmp_path / "w.bpw"
    save_weights(w, path)
    back = load_weights(path, micro)
    assert back.keys() == w.keys()
    for lid in w:
        assert back[lid] == w[lid]
        assert back[lid].values.tobytes() == w[lid].values.tobytes()
    save_weights(back, tmp_path / "w2.bpw")
    assert (tmp_path / "w2.bpw").read_bytes() == path.read_bytes()


def test_weights_special_values_round_trip(tmp_path):
    vals = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45, 3.4e38, -1.5], dtype=np.float32)
    w = {"a": WeightTensor("a", (2, 4, 1, 1), vals)}
    save_weights(w, tmp_path / "w.bpw")
    assert load_weights(tmp_path / "w.bpw")["a"].values.tobytes() == vals.tobytes()


def test_weights_errors(micro, tmp_path):
    w = random_weights(micro, seed=0)
    path = tmp_path / "w.bpw"
    save_weights(w, path)
    data = path.read_bytes()
    (tmp_path / "magic.bpw").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(tmp_path / "magic.bpw")
    (tmp_path / "short.bpw").write_bytes(data[:-3])
    with pytest.raises(WeightFormatError, match="truncated"):
        load_weights(tmp_path / "short.bpw")
    (tmp_path / "long.bpw").write_bytes(data + b"\0")
    with pytest.raises(WeightFormatError, match="trailing"):
        load_weights(tmp_path / "long.bpw")
    bad = dict(w)
    bad["stem"] = WeightTensor("stem", (16, 3, 1, 9), w["stem"].values)
    save_weights(bad, tmp_path / "dims.bpw")
    with pytest.raises(WeightFormatError, match="dims"):
        load_weights(tmp_path / "dims.bpw", micro)


# --------------------------------------------------------------------------
# properties


@st.composite
def chain_models(draw):
    """Random chains of conv layers with an optional fc head."""
    n_layers = draw(st.integers(1, 6))
    c = draw(st.integers(1, 6))
    size = draw(st.integers(4, 12))
    layers, prev = [], ()
    for i in range(n_layers):
        m = draw(st.integers(1, 12))
        k = draw(st.sampled_from([1, 3]))
        layers.append(conv(f"l{i}", m, c, k, prev))
        prev, c = (f"l{i}",), m
    return ModelGraph(tuple(layers), (layers[0].in_channels, size, size))


@given(chain_models(), st.randoms(use_true_random=False))
def test_counts_additive_and_order_invariant(model, rnd):
    wc, fc = count_weights(model), count_flops(model)
    assert wc.total == sum(layer.n_weights for layer in model.layers) == sum(wc.per_layer.values())
    assert fc.total == sum(fc.per_layer.values())
    assert abs(fc.fraction_3x3 + fc.fraction_other - 1) <= 1e-12
    shuffled = list(model.layers)
    rnd.shuffle(shuffled)
    other = ModelGraph(tuple(shuffled), model.input_shape)
    assert count_weights(other).per_layer == wc.per_layer
    assert count_flops(other).per_layer == fc.per_layer
    assert count_flops(other).total == fc.total


@given(chain_models())
def test_text_round_trip_property(model):
    assert loads_model(dumps_model(model)) == model


def test_topological_order_is_stable_and_valid(yolo):
    order = [layer.id for layer in yolo.topological_order()]
    pos = {lid: i for i, lid in enumerate(order)}
    for layer in yolo.layers:
        for src in layer.inputs:
            assert pos[src] < pos[layer.id]
    rnd = random.Random(5)
    shuffled = list(yolo.layers)
    rnd.shuffle(shuffled)
    assert {layer.id for layer in ModelGraph(tuple(shuffled), yolo.input_shape).topological_order()} == set(order)
