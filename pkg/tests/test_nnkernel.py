import math
import random

import numpy as np
import pytest

from cafewidth.archgraph import LayerKind, LayerSpec, NetworkGraph, chain, network_flops
from cafewidth.binplan import BinPlan, plan_bins
from cafewidth.errors import FormatError, InvalidWidthError, TrainingError
from cafewidth.nnkernel import (
    Batch,
    MacCounter,
    SupernetState,
    backward_and_step,
    evaluate,
    gradients,
    kernels,
    load_checkpoint,
    masked_forward,
    save_checkpoint,
)
from cafewidth.nnkernel import _pykernels
from cafewidth.sharing import candidate_subnets, fixed_pattern

from .oracles import conv_loop, fd_check, random_batch, random_graph, reference_forward, slice_network, xent


def mixed_graph():
    """Conv, pooled conv, depthwise, skip merge and dense head."""
    layers = (
        LayerSpec(1, LayerKind.CONV, 4, 4, 3, 5, "a", "input"),
        LayerSpec(2, LayerKind.DEPTHWISE, 4, 4, 3, 5, "a", "a"),
        LayerSpec(3, LayerKind.CONV, 2, 2, 1, 6, "b", "a"),
        LayerSpec(4, LayerKind.CONV, 2, 2, 3, 6, "b", "b"),
        LayerSpec(5, LayerKind.DENSE, 1, 1, 1, 3, "logits", "b"),
    )
    return NetworkGraph(layers, 2, 3)


# --- kernels -----------------------------------------------------------------


@pytest.mark.skipif("cython" not in kernels.available(), reason="compiled kernels not built")
class TestBackendsAgree:
    @pytest.mark.parametrize("K", [1, 3, 5])
    def test_im2col_col2im(self, K, rng):
        from cafewidth.nnkernel import _ckernels

        x = rng.normal(size=(3, 4, 5, 6))
        np.testing.assert_array_equal(_ckernels.im2col(x, K), _pykernels.im2col(x, K))
        cols = rng.normal(size=(3 * 5 * 6, 4 * K * K))
        np.testing.assert_allclose(
            _ckernels.col2im(cols, 3, 4, 5, 6, K), _pykernels.col2im(cols, 3, 4, 5, 6, K), atol=1e-12
        )

    @pytest.mark.parametrize("K", [1, 3])
    def test_depthwise(self, K, rng):
        from cafewidth.nnkernel import _ckernels

        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(3, K, K))
        dy = rng.normal(size=x.shape)
        np.testing.assert_allclose(_ckernels.dw_forward(x, w), _pykernels.dw_forward(x, w), atol=1e-12)
        for a, b in zip(_ckernels.dw_backward(x, w, dy), _pykernels.dw_backward(x, w, dy)):
            np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("backend", kernels.available())
def test_conv_against_loops(backend, rng):
    before = kernels.active()
    kernels.use(backend)
    try:
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(5, 3, 3, 3))
        b = rng.normal(size=5)
        cols = kernels.im2col(x, 3)
        y = (cols @ w.reshape(5, -1).T + b).reshape(2, 4, 4, 5).transpose(0, 3, 1, 2)
        np.testing.assert_allclose(y, conv_loop(x, w, b), atol=1e-12)
        wd = rng.normal(size=(3, 3, 3))
        np.testing.assert_allclose(kernels.dw_forward(x, wd), conv_loop(x, wd, np.zeros(3), True), atol=1e-12)
    finally:
        kernels.use(before)


# --- forward -----------------------------------------------------------------


class TestForward:
    def test_full_width_matches_reference(self, rng):
        graph = mixed_graph()
        state = SupernetState.init(graph, 3)
        batch = random_batch(graph, 4, 3, rng)
        loss, logits = masked_forward(state, graph, None, batch)
        ref = reference_forward(graph, state.weights, state.biases, batch.inputs)
        np.testing.assert_allclose(logits, ref, atol=1e-10)
        assert loss == pytest.approx(xent(ref, batch.labels), abs=1e-12)

    def test_zero_weights_uniform_softmax(self, toy_cnn, rng):
        state = SupernetState.init(toy_cnn, 0)
        for d in (state.weights, state.biases):
            for v in d.values():
                v[...] = 0
        batch = Batch(rng.normal(size=(20, 1, 8, 8)), np.arange(20) % 10)
        loss, _ = masked_forward(state, toy_cnn, None, batch)
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_disjoint_free_sets_differ(self, rng):
        graph = chain([6, 6], input_channels=2, num_classes=3, resolution=2)
        plan = BinPlan({"g1": (1,) * 6, "g2": (1,) * 6})
        batch = random_batch(graph, 2, 8, rng)
        differ = 0
        for seed in range(5):
            state = SupernetState.init(graph, seed)
            cands = candidate_subnets({"g1": 3, "g2": 3}, plan, 1)
            l0 = masked_forward(state, graph, cands[0].channels(plan), batch)[0]
            l2 = masked_forward(state, graph, cands[2].channels(plan), batch)[0]
            differ += l0 != l2
        assert differ >= 4

    def test_sub_network_matches_sliced_reference(self, rng):
        """Gathering channels equals running a physically sliced network."""
        graph = mixed_graph()
        state = SupernetState.init(graph, 7)
        batch = random_batch(graph, 4, 2, rng)
        chans = {"a": np.array([0, 2, 4]), "b": np.array([1, 5])}
        _, logits = masked_forward(state, graph, chans, batch)
        small, ws, bs, _ = slice_network(graph, state.weights, state.biases, chans)
        np.testing.assert_allclose(logits, reference_forward(small, ws, bs, batch.inputs), atol=1e-10)

    def test_no_mutation(self, toy_cnn, rng):
        state = SupernetState.init(toy_cnn, 0)
        digest = state.digest()
        masked_forward(state, toy_cnn, None, Batch(rng.normal(size=(4, 1, 8, 8)), [0, 1, 2, 3]))
        assert state.digest() == digest

    def test_bad_assignment(self, toy_cnn, rng):
        state = SupernetState.init(toy_cnn, 0)
        batch = Batch(rng.normal(size=(2, 1, 8, 8)), [0, 1])
        with pytest.raises(InvalidWidthError):
            masked_forward(state, toy_cnn, {"g1": [0]}, batch)
        with pytest.raises(InvalidWidthError):
            masked_forward(state, toy_cnn, {"g1": [16], "g2": [0], "g3": [0], "g4": [0]}, batch)

    def test_non_finite(self, two_layer, rng):
        state = SupernetState.init(two_layer, 0)
        state.weights[1][0, 0, 0, 0] = np.inf
        with pytest.raises(TrainingError):
            masked_forward(state, two_layer, None, Batch(np.ones((2, 3, 2, 2)), [0, 1]))


# --- MAC oracle ----------------------------------------------------------------


def test_mac_counter_equals_network_flops():
    r = random.Random(5)
    for trial in range(100):
        graph, res = random_graph(r, max_layers=6, max_width=8)
        plan = plan_bins(graph, 1)
        rng = np.random.default_rng(trial)
        counts = {g: int(rng.integers(1, plan.bin_count(g) + 1)) for g in plan.groups}
        from cafewidth.binplan import widths_from_bins

        widths = widths_from_bins(plan, counts)
        state = SupernetState.init(graph, trial)
        macs = MacCounter()
        batch = random_batch(graph, res, 3, rng)
        masked_forward(state, graph, fixed_pattern(widths, plan).channels(plan), batch, macs)
        assert macs.per_sample == network_flops(graph, widths)
        assert macs.total == 3 * network_flops(graph, widths)


def test_reference_counter_equals_full_flops():
    r = random.Random(11)
    for trial in range(15):
        graph, res = random_graph(r, max_layers=5, max_width=4)
        state = SupernetState.init(graph, trial)
        counter = [0]
        x = np.random.default_rng(trial).normal(size=(1, graph.input_channels, res, res))
        reference_forward(graph, state.weights, state.biases, x, counter)
        assert counter[0] == network_flops(graph, graph.full_widths())


# --- backward ----------------------------------------------------------------


class TestGradients:
    def test_two_layer(self):
        graph = chain([5], input_channels=2, num_classes=3, resolution=3)
        assert fd_check(graph, 3, {"g1": np.array([0, 2, 3])}, 0) <= 1e-4

    def test_mixed_masked(self):
        graph = mixed_graph()
        for seed in range(3):
            chans = {"a": np.array([1, 3, 4]), "b": np.array([0, 2, 5])}
            assert fd_check(graph, 4, chans, seed, coords=15) <= 1e-4

    @pytest.mark.parametrize("backend", kernels.available())
    def test_backends(self, backend):
        before = kernels.active()
        kernels.use(backend)
        try:
            graph = mixed_graph()
            assert fd_check(graph, 4, None, 4, coords=10) <= 1e-4
        finally:
            kernels.use(before)

    def test_bias_gradient(self, two_layer, rng):
        state = SupernetState.init(two_layer, 0)
        batch = random_batch(two_layer, 2, 5, rng)
        _, pg, _ = gradients(state, two_layer, None, batch)
        h = 1e-5
        for o in range(4):
            state.biases[2][o] += h
            up = masked_forward(state, two_layer, None, batch)[0]
            state.biases[2][o] -= 2 * h
            down = masked_forward(state, two_layer, None, batch)[0]
            state.biases[2][o] += h
            assert pg[2][1][o] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


class TestStep:
    def test_lr_zero_is_noop(self, toy_cnn, rng):
        state = SupernetState.init(toy_cnn, 0)
        d = state.digest()
        backward_and_step(state, toy_cnn, None, Batch(rng.normal(size=(4, 1, 8, 8)), [0, 1, 2, 3]), 0.0)
        assert state.digest() == d

    def test_untouched_weights_bit_identical(self, toy_cnn, rng):
        plan = plan_bins(toy_cnn, 1)
        state = SupernetState.init(toy_cnn, 0)
        before = state.copy()
        cand = candidate_subnets({"g1": 5, "g2": 7, "g3": 8, "g4": 10}, plan, 1)[2]
        chans = cand.channels(plan)
        batch = Batch(rng.normal(size=(8, 1, 8, 8)), rng.integers(0, 10, 8))
        for _ in range(3):
            backward_and_step(state, toy_cnn, chans, batch, 0.1, 0.9, 1e-3)
        full = {"input": np.arange(1), "logits": np.arange(10), **chans}
        for layer in toy_cnn.layers:
            mask = np.ones(state.weights[layer.id].shape, bool)
            mask[np.ix_(full[layer.width_group], full[layer.input_group])] = False
            for cur, old in ((state.weights, before.weights), (state.mom_w, before.mom_w)):
                assert np.array_equal(cur[layer.id][mask], old[layer.id][mask])
            bmask = np.ones(layer.max_width, bool)
            bmask[full[layer.width_group]] = False
            assert np.array_equal(state.biases[layer.id][bmask], before.biases[layer.id][bmask])
            # and the addressed block did move
            assert not np.array_equal(state.weights[layer.id][~mask], before.weights[layer.id][~mask])

    def test_loss_decreases(self, two_layer, rng):
        state = SupernetState.init(two_layer, 0)
        batch = random_batch(two_layer, 2, 16, rng)
        first = backward_and_step(state, two_layer, None, batch, 0.05)
        for _ in range(30):
            last = backward_and_step(state, two_layer, None, batch, 0.05)
        assert last < first


class TestEvaluate:
    def test_constant_label_favoured(self, two_layer):
        state = SupernetState.init(two_layer, 0)
        state.weights[2][...] = 0
        state.biases[2][...] = [0, 0, 5, 0]
        data = Batch(np.random.default_rng(0).normal(size=(30, 3, 2, 2)), np.full(30, 2))
        assert evaluate(state, two_layer, None, data) == 1.0

    def test_random_logits_chance(self):
        graph = chain([4], input_channels=4, num_classes=10, resolution=1, kernel=1)
        state = SupernetState.init(graph, 0)
        rng = np.random.default_rng(0)
        n = 20000
        data = Batch(rng.normal(size=(n, 4)), rng.integers(0, 10, n))
        acc = evaluate(state, graph, None, data)
        # labels independent of inputs: binomial(n, 0.1), 5 sigma
        assert abs(acc - 0.1) <= 5 * math.sqrt(0.09 / n)

    def test_single_example(self, two_layer, rng):
        state = SupernetState.init(two_layer, 0)
        assert evaluate(state, two_layer, None, random_batch(two_layer, 2, 1, rng)) in (0.0, 1.0)

    def test_empty(self, two_layer):
        with pytest.raises(ValueError):
            evaluate(SupernetState.init(two_layer, 0), two_layer, None, Batch(np.zeros((0, 3, 2, 2)), []))


class TestCheckpoint:
    def test_roundtrip(self, toy_cnn, tmp_path):
        state = SupernetState.init(toy_cnn, 4)
        state.step = 17
        state.mom_w[2][0, 0, 0, 0] = 0.25
        path = tmp_path / "w.cafw"
        save_checkpoint(state, path)
        assert path.read_bytes()[:5] == b"CAFW1"
        back = load_checkpoint(toy_cnn, path)
        assert back.digest() == state.digest()

    def test_shape_mismatch(self, toy_cnn, tmp_path):
        path = tmp_path / "w.cafw"
        save_checkpoint(SupernetState.init(toy_cnn, 0), path)
        other = toy_cnn.with_max_widths({"g1": 8, "g2": 16, "g3": 16, "g4": 16})
        with pytest.raises(FormatError, match="shape"):
            load_checkpoint(other, path)

    def test_bad_magic_and_truncation(self, toy_cnn, tmp_path):
        path = tmp_path / "w.cafw"
        save_checkpoint(SupernetState.init(toy_cnn, 0), path)
        raw = path.read_bytes()
        path.write_bytes(b"XXXXX" + raw[5:])
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(toy_cnn, path)
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(toy_cnn, path)
