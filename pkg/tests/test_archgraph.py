import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafewidth.archgraph import (
    LayerKind,
    LayerSpec,
    NetworkGraph,
    WidthVector,
    chain,
    layer_flops,
    network_flops,
    sensitivity,
    supernet_flops,
)
from cafewidth.errors import GraphError, InvalidWidthError

from .oracles import random_graph


def conv(h=4, k=3):
    return LayerSpec(1, LayerKind.CONV, h, h, k, 8, "g", "input")


class TestLayerFlops:
    def test_hand_evaluated_conv(self):
        assert layer_flops(2, 3, conv(4, 3)) == 2 * 3 * 4 * 4 * 9 == 864

    def test_identity_case(self):
        assert layer_flops(1, 1, conv(1, 1)) == 1

    @pytest.mark.parametrize("kind", list(LayerKind))
    def test_empty_width(self, kind):
        layer = LayerSpec(1, kind, 1, 1, 1, 5, "g", "input")
        if kind is LayerKind.DEPTHWISE:
            assert layer_flops(0, 0, layer) == 0
        else:
            assert layer_flops(0, 5, layer) == 0

    def test_depthwise(self):
        layer = LayerSpec(2, LayerKind.DEPTHWISE, 4, 4, 3, 6, "g", "g")
        assert layer_flops(6, 6, layer) == 6 * 16 * 9
        with pytest.raises(InvalidWidthError):
            layer_flops(5, 6, layer)


class TestNetworkFlops:
    def test_two_layer_chain(self, two_layer):
        assert network_flops(two_layer, {"g1": 5}) == 3 * 5 * 4 + 5 * 4 == 80
        assert network_flops(two_layer, {"g1": 1}) == 16

    def test_full_widths_is_supernet(self, two_layer):
        assert network_flops(two_layer, two_layer.full_widths()) == supernet_flops(two_layer)

    def test_missing_group(self, toy_cnn):
        with pytest.raises(InvalidWidthError):
            network_flops(toy_cnn, {"g1": 3})

    def test_out_of_range(self, two_layer):
        with pytest.raises(InvalidWidthError):
            network_flops(two_layer, {"g1": 6})

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), which=st.integers(0, 10))
    def test_monotone(self, seed, which):
        graph, _ = random_graph(random.Random(seed))
        r = random.Random(seed + 1)
        groups = graph.searchable_groups
        widths = {g: r.randint(1, graph.max_width(g)) for g in groups}
        g = groups[which % len(groups)]
        if widths[g] < graph.max_width(g):
            bigger = dict(widths, **{g: widths[g] + 1})
            assert network_flops(graph, bigger) >= network_flops(graph, widths)


class TestSensitivity:
    def test_chain_middle_group(self):
        layers = (
            LayerSpec(1, LayerKind.CONV, 2, 2, 1, 4, "a", "input"),
            LayerSpec(2, LayerKind.CONV, 2, 2, 1, 8, "b", "a"),
            LayerSpec(3, LayerKind.CONV, 2, 2, 1, 16, "c", "b"),
            LayerSpec(4, LayerKind.DENSE, 1, 1, 1, 2, "logits", "c"),
        )
        graph = NetworkGraph(layers, 1, 2)
        assert sensitivity(graph, "b") == 4 * 1 * 4 + 1 * 16 * 4 == 80

    def test_smallest_case(self):
        layers = (
            LayerSpec(1, LayerKind.CONV, 1, 1, 1, 3, "a", "input"),
            LayerSpec(2, LayerKind.DENSE, 1, 1, 1, 1, "logits", "a"),
        )
        assert sensitivity(NetworkGraph(layers, 1, 1), "a") == 2

    def test_symmetric_groups(self):
        graph = chain([4, 4, 4], input_channels=4, num_classes=4, resolution=1, kernel=1)
        assert sensitivity(graph, "g1") == sensitivity(graph, "g2") == sensitivity(graph, "g3")

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_equals_finite_difference(self, seed):
        graph, _ = random_graph(random.Random(seed))
        full = graph.full_widths().to_dict()
        for g in graph.searchable_groups:
            # self-coupled standard convs make FLOPs quadratic in the group width
            if any(l.width_group == g == l.input_group and l.kind is LayerKind.CONV for l in graph.layers):
                continue
            n = graph.max_width(g)
            for k in range(1, n):
                up = network_flops(graph, dict(full, **{g: k + 1}))
                down = network_flops(graph, dict(full, **{g: k}))
                assert up - down == sensitivity(graph, g)


class TestGraphValidation:
    def test_roundtrip_json(self, toy_cnn, tmp_path):
        path = tmp_path / "arch.json"
        path.write_text(json.dumps(toy_cnn.to_dict()))
        assert NetworkGraph.load(path) == toy_cnn

    def test_unknown_input_group(self):
        doc = {"input_channels": 1, "num_classes": 2, "layers": [
            {"kind": "Conv", "out_h": 2, "out_w": 2, "kernel": 1, "max_width": 3, "width_group": "a", "input_group": "zzz"},
            {"kind": "Dense", "max_width": 2, "width_group": "logits", "input_group": "a"},
        ]}
        with pytest.raises(GraphError, match="layer 1"):
            NetworkGraph.from_dict(doc)

    def test_group_max_width_mismatch(self):
        doc = {"input_channels": 1, "num_classes": 2, "layers": [
            {"kind": "Conv", "out_h": 2, "out_w": 2, "kernel": 1, "max_width": 3, "width_group": "a", "input_group": "input"},
            {"kind": "Conv", "out_h": 2, "out_w": 2, "kernel": 1, "max_width": 4, "width_group": "a", "input_group": "a"},
            {"kind": "Dense", "max_width": 2, "width_group": "logits", "input_group": "a"},
        ]}
        with pytest.raises(GraphError, match="layer 2"):
            NetworkGraph.from_dict(doc)

    def test_depthwise_coupling(self):
        with pytest.raises(GraphError, match="DepthwiseConv"):
            NetworkGraph((
                LayerSpec(1, LayerKind.CONV, 2, 2, 1, 3, "a", "input"),
                LayerSpec(2, LayerKind.DEPTHWISE, 2, 2, 3, 3, "b", "a"),
                LayerSpec(3, LayerKind.DENSE, 1, 1, 1, 2, "logits", "b"),
            ), 1, 2)

    def test_classifier_width(self):
        with pytest.raises(GraphError, match="num_classes"):
            NetworkGraph((LayerSpec(1, LayerKind.DENSE, 1, 1, 1, 3, "logits", "input"),), 2, 2)

    def test_even_kernel_rejected(self):
        with pytest.raises(GraphError, match="kernel"):
            NetworkGraph((
                LayerSpec(1, LayerKind.CONV, 2, 2, 2, 3, "a", "input"),
                LayerSpec(2, LayerKind.DENSE, 1, 1, 1, 2, "logits", "a"),
            ), 1, 2)

    def test_output_not_searchable(self, toy_cnn):
        assert toy_cnn.searchable_groups == ("g1", "g2", "g3", "g4")
        assert "logits" not in toy_cnn.full_widths()


def test_width_vector_is_hashable_mapping():
    a = WidthVector({"b": 2, "a": 1})
    b = WidthVector(a=1, b=2)
    assert a == b and hash(a) == hash(b)
    assert dict(a) == {"a": 1, "b": 2}
    assert a.replace(a=5)["a"] == 5
