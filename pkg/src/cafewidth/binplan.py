"""FLOPs-sensitive bins, search-space size and the multi-stage schedule."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction
from itertools import accumulate

from .archgraph import NetworkGraph, WidthVector, sensitivities
from .errors import EmptyPlanError, InfeasibleBudgetError, InvalidWidthError


def _frac(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**9)
    return Fraction(x)


@dataclass(frozen=True)
class BinPlan:
    """Per-group bin sizes. ``sizes[g]`` lists the channel count of each bin."""

    sizes: Mapping[str, tuple[int, ...]]

    def __post_init__(self):
        fixed = {g: tuple(int(s) for s in v) for g, v in self.sizes.items()}
        for g, v in fixed.items():
            if not v or any(s < 1 for s in v):
                raise EmptyPlanError(f"group {g!r}: bins must be non-empty with size >= 1")
        object.__setattr__(self, "sizes", fixed)

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.sizes)

    def bin_size(self, group: str) -> int:
        return self.sizes[group][0]

    def bin_count(self, group: str) -> int:
        return len(self.sizes[group])

    def max_width(self, group: str) -> int:
        return sum(self.sizes[group])

    def boundaries(self, group: str) -> tuple[int, ...]:
        """Cumulative channel counts, one per bin."""
        return tuple(accumulate(self.sizes[group]))

    def bin_counts(self) -> dict[str, int]:
        return {g: len(v) for g, v in self.sizes.items()}

    def units_of(self, group: str, width: int) -> int:
        """Inverse of :func:`widths_from_bins` for a single group."""
        try:
            return self.boundaries(group).index(width) + 1
        except ValueError:
            raise InvalidWidthError(
                f"group {group!r}: width {width} is not on a bin boundary"
            ) from None

    def channels_of_bins(self, group: str, units) -> list[int]:
        """0-based channel indices covered by the given 1-based bins."""
        bounds = (0,) + self.boundaries(group)
        out: list[int] = []
        for u in units:
            out.extend(range(bounds[u - 1], bounds[u]))
        return out

    def to_dict(self) -> dict:
        return {
            g: {
                "bin_size": self.bin_size(g),
                "bin_count": self.bin_count(g),
                "boundaries": list(self.boundaries(g)),
            }
            for g in self.groups
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BinPlan":
        sizes = {}
        for g, item in doc.items():
            b = [0] + list(item["boundaries"])
            sizes[g] = tuple(b[i + 1] - b[i] for i in range(len(b) - 1))
        return cls(sizes)


def _split(n: int, b: int) -> tuple[int, ...]:
    q, rem = divmod(n, b)
    return (b,) * q + ((rem,) if rem else ())


def bin_sizes_for(eps: Mapping[str, int], maxima: Mapping[str, int], beta) -> dict[str, int]:
    beta = _frac(beta)
    if beta <= 0:
        raise ValueError("beta must be positive")
    top = max(eps.values())
    out = {}
    for g, e in eps.items():
        if e <= 0:
            raise EmptyPlanError(f"group {g!r} has zero FLOPs sensitivity")
        # round() on a Fraction rounds half to even
        b = round(beta * top / e)
        out[g] = min(max(b, 1), maxima[g])
    return out


def plan_bins(graph: NetworkGraph, beta) -> BinPlan:
    """Bin size per group inversely proportional to its FLOPs sensitivity.

    The most sensitive group gets bins of ``beta`` channels; a group with
    half the sensitivity gets bins twice as wide.
    """
    groups = graph.searchable_groups
    if not groups:
        raise EmptyPlanError("graph has no searchable width group")
    eps = sensitivities(graph)
    maxima = {g: graph.max_width(g) for g in groups}
    sizes = bin_sizes_for(eps, maxima, beta)
    return BinPlan({g: _split(maxima[g], sizes[g]) for g in groups})


def plan_uniform_bins(graph: NetworkGraph, K: int) -> BinPlan:
    if K < 1:
        raise ValueError("K must be >= 1")
    groups = graph.searchable_groups
    if not groups:
        raise EmptyPlanError("graph has no searchable width group")
    sizes = {}
    for g in groups:
        n = graph.max_width(g)
        k = min(K, n)
        base, extra = divmod(n, k)
        sizes[g] = (base + 1,) * extra + (base,) * (k - extra)
    return BinPlan(sizes)


def widths_from_bins(plan: BinPlan, bin_counts: Mapping[str, int]) -> WidthVector:
    out = {}
    for g in plan.groups:
        if g not in bin_counts:
            raise InvalidWidthError(f"bin counts missing group {g!r}")
        k = int(bin_counts[g])
        if not 1 <= k <= plan.bin_count(g):
            raise InvalidWidthError(f"group {g!r}: bin count {k} outside [1, {plan.bin_count(g)}]")
        out[g] = plan.boundaries(g)[k - 1]
    return WidthVector(out)


def bins_from_widths(plan: BinPlan, widths: Mapping[str, int]) -> dict[str, int]:
    return {g: plan.units_of(g, widths[g]) for g in plan.groups}


def search_space_size(plans: Sequence[BinPlan]) -> int:
    if not plans:
        raise ValueError("need at least one plan")
    return sum(math.prod(p.bin_count(g) for g in p.groups) for p in plans)


@dataclass(frozen=True)
class StageSchedule:
    T: int
    budgets: tuple[int, ...]       # t = 0..T
    betas: tuple[Fraction, ...]    # beta used by stage t = 1..T is betas[t-1]
    alpha: Fraction
    F_b: int
    reinit_each_stage: bool = True

    def stage(self, t: int) -> tuple[int, Fraction]:
        """(FLOPs budget, minimum bin size) for 1-based stage ``t``."""
        if not 1 <= t <= self.T:
            raise IndexError(t)
        return self.budgets[t], self.betas[t - 1]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "budgets": list(self.budgets),
            "betas": [str(b) for b in self.betas],
            "alpha": str(self.alpha),
            "F_b": self.F_b,
            "reinit_each_stage": self.reinit_each_stage,
        }


def make_schedule(flops0: int, F_b: int, T: int, beta0=1, alpha=2) -> StageSchedule:
    """Linearly decaying FLOPs budget with a geometrically shrinking bin size."""
    if T < 1:
        raise ValueError("T must be >= 1")
    beta0, alpha = _frac(beta0), _frac(alpha)
    if alpha <= 0 or beta0 <= 0:
        raise ValueError("alpha and beta0 must be positive")
    if F_b > flops0:
        raise InfeasibleBudgetError(f"target {F_b} exceeds supernet FLOPs {flops0}")
    drop = Fraction(flops0 - F_b)
    budgets = tuple(math.floor(flops0 - drop * t / T) for t in range(T + 1))
    betas = tuple(beta0 / alpha**t for t in range(T))
    return StageSchedule(T, budgets, betas, alpha, int(F_b))
