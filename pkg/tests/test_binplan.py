import itertools
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafewidth.archgraph import LayerKind, LayerSpec, NetworkGraph, chain, sensitivities, supernet_flops
from cafewidth.binplan import (
    BinPlan,
    bin_sizes_for,
    make_schedule,
    plan_bins,
    plan_uniform_bins,
    search_space_size,
    widths_from_bins,
)
from cafewidth.errors import EmptyPlanError, InfeasibleBudgetError, InvalidWidthError

from .oracles import random_graph


def two_group_graph(n_a=8, n_b=8):
    """Group a has twice group b's sensitivity (80 vs 40)."""
    layers = (
        LayerSpec(1, LayerKind.CONV, 2, 2, 1, n_a, "a", "input"),
        LayerSpec(2, LayerKind.CONV, 1, 1, 1, n_b, "b", "a"),
        LayerSpec(3, LayerKind.DENSE, 1, 1, 1, 1, "logits", "b"),
    )
    return NetworkGraph(layers, 12, 1)


class TestPlanBins:
    def test_equal_sensitivity_gives_beta(self):
        graph = chain([6, 6, 6], input_channels=6, num_classes=6, resolution=1, kernel=1)
        plan = plan_bins(graph, 1)
        assert {plan.bin_size(g) for g in plan.groups} == {1}

    def test_sizes_from_sensitivity_ratio(self):
        assert bin_sizes_for({"a": 80, "b": 40}, {"a": 8, "b": 8}, 1) == {"a": 1, "b": 2}
        # 80/30 = 2.67 rounds to 3
        assert bin_sizes_for({"a": 80, "b": 30}, {"a": 8, "b": 8}, 1) == {"a": 1, "b": 3}

    def test_ties_round_to_even(self):
        # 2.5 -> 2, 3.5 -> 4
        assert bin_sizes_for({"a": 10, "b": 4}, {"a": 9, "b": 9}, 1)["b"] == 2
        assert bin_sizes_for({"a": 14, "b": 4}, {"a": 9, "b": 9}, 1)["b"] == 4

    def test_clamped_to_width(self):
        assert bin_sizes_for({"a": 1000, "b": 1}, {"a": 4, "b": 3}, 1)["b"] == 3
        assert bin_sizes_for({"a": 10, "b": 10}, {"a": 4, "b": 3}, Fraction(1, 4)) == {"a": 1, "b": 1}

    def test_graph_level(self):
        graph = two_group_graph()
        eps = sensitivities(graph)
        assert eps == {"a": 12 * 4 + 8 * 1, "b": 8 + 1}
        plan = plan_bins(graph, 1)
        assert plan.bin_size("a") == 1
        assert plan.bin_size("b") == 6  # round(56 / 9) = 6
        assert plan.sizes["b"] == (6, 2)

    def test_remainder_bin(self):
        plan = BinPlan({"g": (3, 3, 1)})
        assert plan.boundaries("g") == (3, 6, 7)
        assert plan.bin_count("g") == 3 == math.ceil(7 / 3)

    def test_no_searchable_group(self):
        graph = NetworkGraph((LayerSpec(1, LayerKind.DENSE, 1, 1, 1, 2, "logits", "input"),), 3, 2)
        with pytest.raises(EmptyPlanError):
            plan_bins(graph, 1)

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(0, 10**6), beta=st.sampled_from([Fraction(1, 4), Fraction(1, 2), 1, 2, 3]))
    def test_invariants(self, seed, beta):
        graph, _ = random_graph(random.Random(seed), max_width=16)
        plan = plan_bins(graph, beta)
        for g in plan.groups:
            sizes = plan.sizes[g]
            assert all(isinstance(s, int) and s >= 1 for s in sizes)
            assert sum(sizes) == graph.max_width(g)
            b = plan.bin_size(g)
            assert plan.bin_count(g) == math.ceil(graph.max_width(g) / b)
            assert all(s == b for s in sizes[:-1])

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_equalized_sensitivity(self, seed):
        graph, _ = random_graph(random.Random(seed), max_width=64)
        eps = sensitivities(graph)
        top = max(eps.values())
        # only meaningful when no group is clamped at its full width
        if any(top / e > graph.max_width(g) for g, e in eps.items()):
            return
        plan = plan_bins(graph, 1)
        load = [plan.bin_size(g) * eps[g] for g in plan.groups]
        assert max(load) / min(load) <= 3


class TestUniformBins:
    @pytest.mark.parametrize("n,K,expected", [
        (8, 4, (2, 2, 2, 2)),
        (7, 4, (2, 2, 2, 1)),
        (3, 8, (1, 1, 1)),
    ])
    def test_examples(self, n, K, expected):
        graph = chain([n], input_channels=1, num_classes=2, resolution=1, kernel=1)
        assert plan_uniform_bins(graph, K).sizes["g1"] == expected

    @given(n=st.integers(1, 64), K=st.integers(1, 70))
    def test_counts(self, n, K):
        graph = chain([n], input_channels=1, num_classes=2, resolution=1, kernel=1)
        sizes = plan_uniform_bins(graph, K).sizes["g1"]
        assert len(sizes) == min(K, n) and sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1


class TestWidthsFromBins:
    def test_examples(self):
        plan = BinPlan({"a": (2, 2, 2, 2), "b": (3, 3, 1)})
        assert widths_from_bins(plan, {"a": 3, "b": 1}) == {"a": 6, "b": 3}
        assert widths_from_bins(plan, {"a": 4, "b": 3}) == {"a": 8, "b": 7}

    def test_out_of_range(self):
        plan = BinPlan({"a": (2, 2)})
        with pytest.raises(InvalidWidthError):
            widths_from_bins(plan, {"a": 3})
        with pytest.raises(InvalidWidthError):
            widths_from_bins(plan, {"a": 0})

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=10))
    def test_strictly_increasing(self, sizes):
        plan = BinPlan({"a": tuple(sizes)})
        ws = [widths_from_bins(plan, {"a": k})["a"] for k in range(1, len(sizes) + 1)]
        assert all(x < y for x, y in zip(ws, ws[1:]))
        assert ws[-1] == sum(sizes)


class TestSearchSpace:
    def test_examples(self):
        assert search_space_size([BinPlan({"a": (1,) * 4, "b": (1,) * 5})]) == 20
        assert search_space_size([BinPlan({"a": (3,)})]) == 1
        assert search_space_size([
            BinPlan({"a": (1,) * 4, "b": (1,) * 5}),
            BinPlan({"a": (1,) * 8, "b": (1,) * 10}),
        ]) == 100

    def test_arbitrary_precision(self):
        plan = BinPlan({f"g{i}": (1,) * 100 for i in range(30)})
        assert search_space_size([plan]) == 10**60

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 9), min_size=1, max_size=5))
    def test_matches_enumeration(self, counts):
        if math.prod(counts) > 10**5:
            return
        plan = BinPlan({f"g{i}": (1,) * c for i, c in enumerate(counts)})
        brute = sum(1 for _ in itertools.product(*(range(c) for c in counts)))
        assert search_space_size([plan]) == brute


class TestSchedule:
    def test_linear_budgets(self):
        s = make_schedule(400, 200, 4)
        assert s.budgets == (400, 350, 300, 250, 200)

    def test_single_stage(self):
        assert make_schedule(1000, 123, 1).budgets == (1000, 123)

    def test_betas(self):
        s = make_schedule(10, 5, 3, beta0=1, alpha=2)
        assert s.betas == (1, Fraction(1, 2), Fraction(1, 4))
        assert all(s.betas[i + 1] == s.betas[i] / 2 for i in range(2))

    def test_infeasible(self):
        with pytest.raises(InfeasibleBudgetError):
            make_schedule(100, 101, 2)

    @given(f0=st.integers(1, 10**9), frac=st.fractions(0, 1), T=st.integers(1, 12))
    def test_endpoints_and_linearity(self, f0, frac, T):
        fb = int(f0 * frac)
        b = make_schedule(f0, fb, T).budgets
        assert b[0] == f0 and b[-1] == fb
        assert all(x >= y for x, y in zip(b, b[1:]))
        second = [b[i + 2] - 2 * b[i + 1] + b[i] for i in range(len(b) - 2)]
        assert all(abs(d) <= 1 for d in second)

    def test_stage_accessor(self, toy_cnn):
        f0 = supernet_flops(toy_cnn)
        s = make_schedule(f0, f0 // 2, 3)
        assert s.stage(3) == (s.budgets[3], Fraction(1, 4))
        assert s.stage(3)[0] == f0 // 2
