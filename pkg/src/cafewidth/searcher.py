"""Width search on a trained supernet plus the retraining baselines.

A width is scored by the best validation accuracy among its candidate
sub-networks (max-max selection). Search runs over bin-count vectors and
only ever scores widths whose FLOPs fit the budget.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import kendalltau

from .archgraph import NetworkGraph, WidthVector, network_flops
from .binplan import BinPlan, StageSchedule, plan_bins, widths_from_bins
from .data import Splits
from .errors import ConfigError, InfeasibleBudgetError
from .nnkernel import Batch, SupernetState, evaluate
from .sharing import CandidatePolicy, SharedCombination, candidate_subnets
from .trainer import TrainConfig, train_standalone, train_supernet


@dataclass
class EvoConfig:
    population: int = 40
    generations: int = 50
    mutation_prob: float = 0.1
    crossover_prob: float = 0.5
    elite_fraction: float = 0.125
    tournament: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("population must be >= 2")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        for name in ("mutation_prob", "crossover_prob", "elite_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.tournament < 1:
            raise ConfigError("tournament size must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EvoConfig":
        extra = set(doc) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown evo config keys {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WidthEval:
    accuracy: float
    candidate: int
    pattern: dict
    accuracies: list[float]


@dataclass
class SearchResult:
    best: WidthVector
    accuracy: float
    flops: int
    budget: int
    seed: int
    log: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)   # per generation

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "accuracy": self.accuracy,
            "flops": self.flops,
            "budget": self.budget,
            "seed": self.seed,
            "log": self.log,
            "history": self.history,
        }

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["generation", "best_acc", "best_flops"])
            for row in self.history:
                w.writerow([row["generation"], row["best_acc"], row["best_flops"]])


# --- max-max evaluation --------------------------------------------------------


def evaluate_width_detail(
    state: SupernetState,
    graph: NetworkGraph,
    plan: BinPlan,
    width: Mapping[str, int],
    r: int,
    policy: CandidatePolicy | None,
    val_data: Batch,
) -> WidthEval:
    if len(val_data) == 0:
        raise ValueError("empty validation set")
    cands = candidate_subnets(width, plan, r, policy or SharedCombination())
    accs = [evaluate(state, graph, c.channels(plan), val_data) for c in cands]
    k = int(np.argmax(accs))
    return WidthEval(accs[k], k, cands[k].to_dict(), accs)


def evaluate_width(state, graph, plan, width, r, policy, val_data) -> float:
    """Validation accuracy of the best candidate sub-network of ``width``."""
    return evaluate_width_detail(state, graph, plan, width, r, policy, val_data).accuracy


class _Scorer:
    """Caches max-max scores per bin-count vector within one search."""

    def __init__(self, state, graph, plan, r, policy, val_data, budget, workers=1):
        self.args = (state, graph, plan)
        self.r, self.policy, self.val = r, policy, val_data
        self.budget = budget
        self.cache: dict[tuple, tuple[float, int]] = {}
        self.log: list[dict] = []
        self.workers = workers

    def key(self, counts: Mapping[str, int]) -> tuple:
        return tuple(int(counts[g]) for g in self.args[2].groups)

    def flops(self, counts) -> int:
        graph, plan = self.args[1], self.args[2]
        return network_flops(graph, widths_from_bins(plan, counts))

    def feasible(self, counts) -> bool:
        return self.flops(counts) <= self.budget

    def score_many(self, many: Sequence[Mapping[str, int]]) -> list[float]:
        todo = []
        for c in many:
            k = self.key(c)
            if k not in self.cache and k not in [self.key(t) for t in todo]:
                todo.append(c)
        state, graph, plan = self.args

        def run(counts):
            width = widths_from_bins(plan, counts)
            return width, evaluate_width_detail(state, graph, plan, width, self.r, self.policy, self.val)

        if self.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as ex:
                results = list(ex.map(run, todo))
        else:
            results = [run(c) for c in todo]
        # merge in submission order so logs do not depend on scheduling
        for counts, (width, ev) in zip(todo, results):
            fl = network_flops(graph, width)
            self.cache[self.key(counts)] = (ev.accuracy, fl)
            self.log.append({
                "width": width.to_dict(), "bins": dict(counts), "accuracy": ev.accuracy,
                "flops": fl, "feasible": fl <= self.budget,
                "candidate": ev.candidate, "assignment": ev.pattern,
            })
        return [self.cache[self.key(c)][0] for c in many]

    def result(self, seed: int, history=None) -> SearchResult:
        plan = self.args[2]
        best_key, best = None, (-1.0, 0)
        for entry in self.log:
            if entry["feasible"] and entry["accuracy"] > best[0]:
                best_key, best = entry, (entry["accuracy"], entry["flops"])
        if best_key is None:
            raise InfeasibleBudgetError("no width satisfying the budget was evaluated")
        return SearchResult(
            WidthVector(best_key["width"]), best[0], best[1], self.budget, seed,
            self.log, history or [],
        )


def _search_workers() -> int:
    try:
        return max(1, int(os.environ.get("CAFEWIDTH_THREADS", "1")))
    except ValueError:
        return 1


def _uniform_counts(plan: BinPlan, rng) -> dict[str, int]:
    return {g: int(rng.integers(1, plan.bin_count(g) + 1)) for g in plan.groups}


def random_search(
    state: SupernetState,
    graph: NetworkGraph,
    plan: BinPlan,
    F_b: int,
    N: int,
    seed: int,
    val_data: Batch,
    r: int = 1,
    policy: CandidatePolicy | None = None,
) -> SearchResult:
    if N < 1:
        raise ConfigError("random search needs N >= 1")
    rng = np.random.default_rng(seed)
    scorer = _Scorer(state, graph, plan, r, policy, val_data, F_b, _search_workers())
    accepted, attempts = [], 0
    while len(accepted) < N and attempts < 100 * N:
        attempts += 1
        counts = _uniform_counts(plan, rng)
        if scorer.feasible(counts):
            accepted.append(counts)
    if not accepted:
        raise InfeasibleBudgetError(f"no width under {F_b} FLOPs found in {attempts} draws")
    scorer.score_many(accepted)
    return scorer.result(seed)


def _repair(counts: dict[str, int], scorer: _Scorer, graph, plan) -> dict[str, int] | None:
    """Shrink the group whose one-bin decrement saves the most FLOPs until feasible."""
    counts = dict(counts)
    while not scorer.feasible(counts):
        base = scorer.flops(counts)
        best_g, best_save = None, -1
        for g in plan.groups:
            if counts[g] > 1:
                trial = dict(counts, **{g: counts[g] - 1})
                save = base - scorer.flops(trial)
                if save > best_save:
                    best_g, best_save = g, save
        if best_g is None:
            return None
        counts[best_g] -= 1
    return counts


def evolutionary_search(
    state: SupernetState,
    graph: NetworkGraph,
    plan: BinPlan,
    F_b: int,
    config: EvoConfig,
    val_data: Batch,
    r: int = 1,
    policy: CandidatePolicy | None = None,
) -> SearchResult:
    rng = np.random.default_rng(config.seed)
    scorer = _Scorer(state, graph, plan, r, policy, val_data, F_b, _search_workers())
    groups = plan.groups
    minimal = {g: 1 for g in groups}
    if not scorer.feasible(minimal):
        raise InfeasibleBudgetError(f"even the narrowest width exceeds {F_b} FLOPs")

    population: list[dict] = []
    tries = 0
    while len(population) < config.population and tries < 100 * config.population:
        tries += 1
        counts = _uniform_counts(plan, rng)
        if scorer.feasible(counts):
            population.append(counts)
    while len(population) < config.population:
        population.append(_repair(_uniform_counts(plan, rng), scorer, graph, plan))

    n_elite = max(1, int(math.ceil(config.elite_fraction * config.population)))
    history = []
    best_acc = -1.0
    best_flops = 0
    for gen in range(config.generations):
        scores = scorer.score_many(population)
        for counts, s in zip(population, scores):
            if s > best_acc:
                best_acc, best_flops = s, scorer.flops(counts)
        history.append({"generation": gen, "best_acc": best_acc, "best_flops": best_flops})
        if gen == config.generations - 1:
            break
        order = sorted(range(len(population)), key=lambda i: (-scores[i], i))
        nxt = [population[i] for i in order[:n_elite]]
        seen = {scorer.key(c) for c in nxt}

        def pick():
            idx = rng.integers(len(population), size=config.tournament)
            return population[max(idx, key=lambda i: (scores[i], -i))]

        while len(nxt) < config.population:
            for _ in range(10):
                a, b = pick(), pick()
                if rng.random() < config.crossover_prob:
                    child = {g: (a[g] if rng.random() < 0.5 else b[g]) for g in groups}
                else:
                    child = dict(a)
                for g in groups:
                    if rng.random() < config.mutation_prob:
                        child[g] = int(rng.integers(1, plan.bin_count(g) + 1))
                child = _repair(child, scorer, graph, plan)
                # prefer widths never scored before; re-scoring adds nothing
                key = scorer.key(child)
                if key not in seen and key not in scorer.cache:
                    break
            seen.add(scorer.key(child))
            nxt.append(child)
        population = nxt
    return scorer.result(config.seed, history)


def exhaustive_search(state, graph, plan, F_b, val_data, r=1, policy=None) -> SearchResult:
    """Score every feasible width; the oracle for small spaces."""
    scorer = _Scorer(state, graph, plan, r, policy, val_data, F_b)
    space = [
        dict(zip(plan.groups, combo))
        for combo in itertools.product(*(range(1, plan.bin_count(g) + 1) for g in plan.groups))
    ]
    feasible = [c for c in space if scorer.feasible(c)]
    if not feasible:
        raise InfeasibleBudgetError("no feasible width")
    scorer.score_many(feasible)
    return scorer.result(0)


# --- multi-stage ---------------------------------------------------------------


@dataclass
class StageOutcome:
    stage: int
    budget: int
    beta: str
    plan: BinPlan
    maxima: dict
    result: SearchResult
    train_seconds: float

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "budget": self.budget, "beta": self.beta,
            "plan": self.plan.to_dict(), "maxima": self.maxima,
            "result": self.result.to_dict(),
        }


def multi_stage_search(
    graph: NetworkGraph,
    schedule: StageSchedule,
    train_config: TrainConfig,
    evo_config: EvoConfig,
    data: Splits,
    method: str = "evo",
    random_samples: int = 2000,
) -> tuple[list[StageOutcome], SearchResult]:
    """Train-then-search repeated over the schedule's stages.

    Each stage's supernet takes the previous winner as its maximum widths
    and is trained from a fresh initialisation.
    """
    current = graph
    outcomes = []
    for t in range(1, schedule.T + 1):
        budget, beta = schedule.stage(t)
        plan = plan_bins(current, beta)
        state = SupernetState.init(current, train_config.seed + t - 1)
        state, log = train_supernet(state, current, plan, train_config, data.train)
        policy = train_config.candidate_policy(train_config.seed)
        try:
            if method == "random":
                res = random_search(state, current, plan, budget, random_samples,
                                    evo_config.seed, data.val, train_config.offset, policy)
            else:
                res = evolutionary_search(state, current, plan, budget, evo_config,
                                          data.val, train_config.offset, policy)
        except InfeasibleBudgetError as exc:
            raise InfeasibleBudgetError(f"stage {t}: {exc}") from None
        outcomes.append(StageOutcome(
            t, budget, str(beta), plan, current.full_widths().to_dict(), res, sum(log.epoch_seconds)
        ))
        current = current.with_max_widths(res.best)
    return outcomes, outcomes[-1].result


# --- retraining and baselines -------------------------------------------------


def retrain_from_scratch(
    graph: NetworkGraph,
    width: Mapping[str, int],
    train_config: TrainConfig,
    data: Splits,
    split: str = "test",
) -> float:
    """Fresh standalone network at exactly ``width``, fully trained."""
    net = graph.with_max_widths(width)
    state, _ = train_standalone(net, train_config, data.train)
    return evaluate(state, net, None, getattr(data, split))


def uniform_baseline(graph: NetworkGraph, F_b: int) -> WidthVector:
    """Largest single scale factor on every group's width that meets ``F_b``."""
    groups = graph.searchable_groups

    def at(s: float) -> WidthVector:
        return WidthVector({g: max(1, min(graph.max_width(g), math.floor(s * graph.max_width(g) + 0.5))) for g in groups})

    if network_flops(graph, at(0.0)) > F_b:
        raise InfeasibleBudgetError(f"even the narrowest network exceeds {F_b} FLOPs")
    if network_flops(graph, at(1.0)) <= F_b:
        return at(1.0)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if network_flops(graph, at(mid)) <= F_b:
            lo = mid
        else:
            hi = mid
    return at(lo)


@dataclass
class RandomBaselineConfig:
    candidates: int = 20
    screen_epochs: int = 2


def random_baseline(
    graph: NetworkGraph,
    F_b: int,
    data: Splits,
    train_config: TrainConfig,
    seed: int,
    config: RandomBaselineConfig | None = None,
) -> tuple[float, WidthVector]:
    """Sample feasible widths, screen each briefly, finish training the best."""
    config = config or RandomBaselineConfig()
    if config.candidates < 1:
        raise ConfigError("random baseline needs at least one candidate")
    rng = np.random.default_rng(seed)
    groups = graph.searchable_groups
    widths = []
    for _ in range(1000 * config.candidates):
        if len(widths) == config.candidates:
            break
        w = WidthVector({g: int(rng.integers(1, graph.max_width(g) + 1)) for g in groups})
        if network_flops(graph, w) <= F_b:
            widths.append(w)
    if not widths:
        raise InfeasibleBudgetError(f"no random width under {F_b} FLOPs")
    screen = min(config.screen_epochs, train_config.epochs)
    best = None
    for w in widths:
        net = graph.with_max_widths(w)
        state, it = train_standalone(net, train_config, data.train, epochs=screen)
        acc = evaluate(state, net, None, data.val)
        if best is None or acc > best[0]:
            best = (acc, w, net, state, it)
    _, w, net, state, it = best
    state, _ = train_standalone(net, train_config, data.train,
                                epochs=train_config.epochs - screen, state=state, start_iter=it)
    return evaluate(state, net, None, data.test), w


def rank_correlation(
    state: SupernetState,
    graph: NetworkGraph,
    plan: BinPlan,
    widths: Sequence[Mapping[str, int]],
    oracle_accs: Sequence[float],
    val_data: Batch,
    r: int = 1,
    policy: CandidatePolicy | None = None,
) -> float:
    """Kendall tau-b between supernet scores and stand-alone accuracies."""
    if len(widths) != len(oracle_accs):
        raise ValueError("widths and oracle accuracies differ in length")
    if len(widths) < 2:
        raise ValueError("need at least two widths")
    scores = [evaluate_width(state, graph, plan, w, r, policy, val_data) for w in widths]
    return kendall_tau(scores, oracle_accs)


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    tau = kendalltau(a, b).statistic
    # constant input has no ranking information
    return 0.0 if math.isnan(tau) else float(tau)


def write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
