"""Channel assignment patterns at bin granularity.

Indices here are 1-based *units* (bins). A width of ``c`` units is served
by a base prefix ``[1 : c_b]`` with ``c_b = max(c - r - 1, 0)`` plus
``c - c_b`` free units picked from a local zone around unit ``c``.
``r = 0`` collapses to the fixed leftmost-``c`` pattern.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import combinations

import numpy as np

from .binplan import BinPlan
from .errors import InvalidWidthError, UndefinedDegreeError

IndexSet = tuple[int, ...]


def base_count(c: int, r: int) -> int:
    return max(c - r - 1, 0)


def _check(c: int, B: int) -> None:
    if not 1 <= c <= B:
        raise InvalidWidthError(f"unit count {c} outside [1, {B}]")


def fixed_assignment(c: int, B: int | None = None) -> IndexSet:
    if B is not None:
        _check(c, B)
    elif c < 1:
        raise InvalidWidthError(f"unit count {c} must be >= 1")
    return tuple(range(1, c + 1))


def free_zone(c: int, r: int, B: int) -> tuple[int, int]:
    """Inclusive ``(lo, hi)`` of the zone the free units are drawn from."""
    _check(c, B)
    if r < 0:
        raise ValueError("offset r must be >= 0")
    cb = base_count(c, r)
    return max(c - r, cb + 1), min(c + r, B)


@lru_cache(maxsize=4096)
def enumerate_assignments(c: int, r: int, B: int) -> tuple[IndexSet, ...]:
    lo, hi = free_zone(c, r, B)
    cb = base_count(c, r)
    need = c - cb
    zone = range(lo, hi + 1)
    assert len(zone) >= need, (c, r, B)
    base = tuple(range(1, cb + 1))
    return tuple(base + free for free in combinations(zone, need))


def interior_count(r: int) -> int:
    return math.comb(2 * r + 1, r + 1)


def sharing_degree(a: Sequence[int], b: Sequence[int]) -> Fraction:
    sa, sb = set(a), set(b)
    if not sa or not sb:
        raise UndefinedDegreeError("sharing degree is undefined for an empty index set")
    return Fraction(len(sa & sb), min(len(sa), len(sb)))


# --- network-wide candidates -----------------------------------------------


@dataclass(frozen=True)
class SharedCombination:
    """Candidate k applies the k-th free-subset choice to every group."""

    def __str__(self) -> str:
        return "shared"


@dataclass(frozen=True)
class IndependentSampled:
    """M candidates with per-group free subsets drawn independently."""

    M: int
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("IndependentSampled needs M >= 1")

    def __str__(self) -> str:
        return f"sampled:{self.M}"


CandidatePolicy = SharedCombination | IndependentSampled


def parse_policy(text: str, seed: int = 0) -> CandidatePolicy:
    if text == "shared":
        return SharedCombination()
    if text.startswith("sampled:"):
        try:
            return IndependentSampled(int(text.split(":", 1)[1]), seed)
        except ValueError as exc:
            raise ValueError(f"bad policy {text!r}: {exc}") from None
    raise ValueError(f"unknown candidate policy {text!r}")


@dataclass(frozen=True)
class AssignmentPattern:
    """Network-wide unit selection: per group, base prefix and free units."""

    base: Mapping[str, IndexSet]
    free: Mapping[str, IndexSet]

    def units(self, group: str) -> IndexSet:
        return tuple(sorted(self.base[group] + self.free[group]))

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.base)

    def channels(self, plan: BinPlan) -> dict[str, np.ndarray]:
        """0-based supernet channel indices per group."""
        return {
            g: np.asarray(plan.channels_of_bins(g, self.units(g)), dtype=np.intp)
            for g in self.groups
        }

    def to_dict(self) -> dict[str, list[int]]:
        return {g: list(self.units(g)) for g in self.groups}

    def key(self) -> tuple:
        return tuple((g, self.units(g)) for g in sorted(self.groups))


def _pattern(choice: Mapping[str, IndexSet], counts: Mapping[str, int], r: int) -> AssignmentPattern:
    base, free = {}, {}
    for g, units in choice.items():
        cb = base_count(counts[g], r)
        base[g] = units[:cb]
        free[g] = units[cb:]
    return AssignmentPattern(base, free)


def candidate_subnets(
    widths: Mapping[str, int],
    plan: BinPlan,
    r: int,
    policy: CandidatePolicy | None = None,
) -> list[AssignmentPattern]:
    """Sub-networks that realise ``widths`` (given in channels)."""
    policy = policy or SharedCombination()
    counts = {g: plan.units_of(g, widths[g]) for g in plan.groups}
    per_group = {g: enumerate_assignments(counts[g], r, plan.bin_count(g)) for g in plan.groups}
    if isinstance(policy, SharedCombination):
        n = max(len(v) for v in per_group.values())
        return [
            _pattern({g: v[k % len(v)] for g, v in per_group.items()}, counts, r)
            for k in range(n)
        ]
    if isinstance(policy, IndependentSampled):
        rng = np.random.default_rng(policy.seed)
        out = []
        for _ in range(policy.M):
            out.append(_pattern(
                {g: v[int(rng.integers(len(v)))] for g, v in per_group.items()}, counts, r
            ))
        return out
    raise ValueError(f"invalid candidate policy {policy!r}")


def fixed_pattern(widths: Mapping[str, int], plan: BinPlan) -> AssignmentPattern:
    return candidate_subnets(widths, plan, 0)[0]


def full_pattern(plan: BinPlan) -> AssignmentPattern:
    return fixed_pattern({g: plan.max_width(g) for g in plan.groups}, plan)
