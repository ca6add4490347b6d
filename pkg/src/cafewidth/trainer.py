"""Stochastic supernet training with min-min candidate selection.

Every iteration draws one width uniformly from the bin-induced space,
scores each candidate sub-network of that width with a forward pass only,
and applies a single SGD update to the candidate with the lowest loss.
During the first ``warmup`` fraction of iterations a uniformly random
candidate is updated instead.
"""

from __future__ import annotations

import json
import math
import os
import time
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .archgraph import NetworkGraph, WidthVector
from .binplan import BinPlan, widths_from_bins
from .errors import ConfigError, TrainingError
from .nnkernel import Batch, SupernetState, backward_and_step, masked_forward
from .sharing import (
    CandidatePolicy,
    IndependentSampled,
    candidate_subnets,
    fixed_pattern,
    parse_policy,
)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    lr_min: float = 1e-4
    schedule: str = "cosine"           # "cosine" | "step"
    milestones: tuple[float, ...] = (0.5, 0.75)  # fractions of training, step schedule only
    momentum: float = 0.9
    weight_decay: float = 5e-5
    offset: int = 1
    policy: str = "shared"
    warmup: float = 0.0                # lambda: random-candidate fraction of iterations
    seed: int = 0
    reference: bool = True             # single-threaded, bitwise reproducible

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.warmup <= 1.0:
            raise ConfigError("warmup fraction must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.offset < 0:
            raise ConfigError("offset r must be >= 0")
        if self.schedule not in ("cosine", "step"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        self.milestones = tuple(self.milestones)
        try:
            parse_policy(self.policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def candidate_policy(self, seed: int = 0) -> CandidatePolicy:
        return parse_policy(self.policy, seed)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(config: TrainConfig, it: int, total: int) -> float:
    if config.schedule == "cosine":
        return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1 + math.cos(math.pi * it / total))
    passed = sum(it >= m * total for m in config.milestones)
    return config.lr * 0.1**passed


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _workers(config: TrainConfig) -> int:
    if config.reference:
        return 1
    try:
        return max(1, int(os.environ.get("CAFEWIDTH_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def sample_width(plan: BinPlan, rng: np.random.Generator) -> WidthVector:
    counts = {g: int(rng.integers(1, plan.bin_count(g) + 1)) for g in plan.groups}
    return widths_from_bins(plan, counts)


class StepResult(NamedTuple):
    index: int
    loss: float
    losses: tuple[float, ...]


def candidate_losses(state, graph, plan, candidates, batch, workers: int = 1) -> list[float]:
    """Forward-only loss of every candidate. Never mutates ``state``."""
    def one(cand):
        return masked_forward(state, graph, cand.channels(plan), batch)[0]

    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(candidates))) as ex:
            return list(ex.map(one, candidates))
    return [one(c) for c in candidates]


def _candidates(width, plan, config, rng):
    policy = config.candidate_policy()
    if isinstance(policy, IndependentSampled):
        policy = IndependentSampled(policy.M, int(rng.integers(2**31)))
    return candidate_subnets(width, plan, config.offset, policy)


def min_min_step(
    state: SupernetState,
    graph: NetworkGraph,
    width: Mapping[str, int],
    plan: BinPlan,
    config: TrainConfig,
    batch: Batch,
    lr: float | None = None,
    rng: np.random.Generator | None = None,
) -> StepResult:
    """Update only the lowest-loss candidate of ``width`` (ties: lowest index)."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    cands = _candidates(width, plan, config, rng)
    losses = candidate_losses(state, graph, plan, cands, batch, _workers(config))
    k = int(np.argmin(losses))
    loss = backward_and_step(
        state, graph, cands[k].channels(plan), batch,
        config.lr if lr is None else lr, config.momentum, config.weight_decay,
    )
    return StepResult(k, loss, tuple(losses))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _epoch_batches(data: Batch, config: TrainConfig, rng):
    return data.batches(config.batch_size, rng)


def train_supernet(
    state: SupernetState,
    graph: NetworkGraph,
    plan: BinPlan,
    config: TrainConfig,
    train_data: Batch,
    on_step: Callable[[int, dict], None] | None = None,
) -> tuple[SupernetState, TrainLog]:
    """Train ``state`` in place; returns it together with the per-iteration log."""
    if len(train_data) == 0:
        raise ConfigError("training data is empty")
    rng = np.random.default_rng(config.seed)
    total = config.epochs * iterations_per_epoch(len(train_data), config.batch_size)
    warm = int(math.floor(config.warmup * total))
    workers = _workers(config)
    log = TrainLog()
    it = 0
    for _ in range(config.epochs):
        t0 = time.perf_counter()
        for batch in _epoch_batches(train_data, config, rng):
            lr = learning_rate(config, it, total)
            width = sample_width(plan, rng)
            try:
                if it < warm:
                    cands = _candidates(width, plan, config, rng)
                    k = int(rng.integers(len(cands))) if len(cands) > 1 else 0
                    loss = backward_and_step(
                        state, graph, cands[k].channels(plan), batch,
                        lr, config.momentum, config.weight_decay,
                    )
                    losses = None
                else:
                    cands = _candidates(width, plan, config, rng)
                    losses = candidate_losses(state, graph, plan, cands, batch, workers)
                    k = int(np.argmin(losses))
                    loss = backward_and_step(
                        state, graph, cands[k].channels(plan), batch,
                        lr, config.momentum, config.weight_decay,
                    )
            except TrainingError as exc:
                raise TrainingError(f"iteration {it}: {exc}") from None
            if not math.isfinite(loss):
                raise TrainingError(f"iteration {it}: non-finite loss")
            rec = {
                "iter": it, "width": width.to_dict(), "candidate": k,
                "loss": loss, "lr": lr, "phase": "warmup" if it < warm else "minmin",
            }
            if losses is not None:
                rec["candidate_losses"] = losses
            log.records.append(rec)
            if on_step is not None:
                on_step(it, rec)
            it += 1
        log.epoch_seconds.append(time.perf_counter() - t0)
    return state, log


def train_fixed_pattern(
    state: SupernetState,
    graph: NetworkGraph,
    plan: BinPlan,
    config: TrainConfig,
    train_data: Batch,
) -> tuple[SupernetState, TrainLog]:
    """Baseline: sample a width and update its leftmost-channel sub-network."""
    rng = np.random.default_rng(config.seed)
    total = config.epochs * iterations_per_epoch(len(train_data), config.batch_size)
    log = TrainLog()
    it = 0
    for _ in range(config.epochs):
        t0 = time.perf_counter()
        for batch in _epoch_batches(train_data, config, rng):
            lr = learning_rate(config, it, total)
            width = sample_width(plan, rng)
            chans = fixed_pattern(width, plan).channels(plan)
            loss = backward_and_step(state, graph, chans, batch, lr, config.momentum, config.weight_decay)
            log.records.append({"iter": it, "width": width.to_dict(), "candidate": 0, "loss": loss, "lr": lr})
            it += 1
        log.epoch_seconds.append(time.perf_counter() - t0)
    return state, log


def replay_log(
    graph: NetworkGraph,
    plan: BinPlan,
    config: TrainConfig,
    train_data: Batch,
    log: TrainLog,
    init_seed: int,
) -> list[str]:
    """Re-run training from scratch and audit every min-min step.

    At each step the candidates are re-scored independently; the logged
    choice must be a minimiser, the logged loss must match, and the scan
    must leave the state digest unchanged. Returns a list of violations.
    """
    state = SupernetState.init(graph, init_seed)
    problems: list[str] = []
    expected = iter(log.records)

    rng = np.random.default_rng(config.seed)
    total = config.epochs * iterations_per_epoch(len(train_data), config.batch_size)
    warm = int(math.floor(config.warmup * total))
    it = 0
    for _ in range(config.epochs):
        for batch in _epoch_batches(train_data, config, rng):
            rec = next(expected)
            lr = learning_rate(config, it, total)
            width = sample_width(plan, rng)
            if width.to_dict() != rec["width"]:
                problems.append(f"iter {it}: width diverged")
                return problems
            cands = _candidates(width, plan, config, rng)
            if it < warm:
                k = int(rng.integers(len(cands))) if len(cands) > 1 else 0
            else:
                before = state.digest()
                losses = [masked_forward(state, graph, c.channels(plan), batch)[0] for c in cands]
                if state.digest() != before:
                    problems.append(f"iter {it}: forward scan mutated the state")
                k = rec["candidate"]
                if any(losses[k] > l for l in losses):
                    problems.append(f"iter {it}: candidate {k} is not a loss minimiser")
                if losses[k] != rec["loss"]:
                    problems.append(f"iter {it}: logged loss {rec['loss']} != replayed {losses[k]}")
            backward_and_step(state, graph, cands[k].channels(plan), batch, lr, config.momentum, config.weight_decay)
            it += 1
    return problems


def train_standalone(
    graph: NetworkGraph,
    config: TrainConfig,
    train_data: Batch,
    epochs: int | None = None,
    state: SupernetState | None = None,
    start_iter: int = 0,
) -> tuple[SupernetState, int]:
    """Plain full-width training of an ordinary (non-shared) network.

    Resumable: pass back the returned state and iteration counter together
    with a smaller ``epochs`` to continue the same cosine schedule.
    """
    state = state if state is not None else SupernetState.init(graph, config.seed)
    per_epoch = iterations_per_epoch(len(train_data), config.batch_size)
    total = config.epochs * per_epoch
    epochs = config.epochs if epochs is None else epochs
    it = start_iter
    for _ in range(epochs):
        # per-epoch streams make a split run identical to an uninterrupted one
        rng = np.random.default_rng([config.seed, it // per_epoch])
        for batch in train_data.batches(config.batch_size, rng):
            backward_and_step(
                state, graph, None, batch, learning_rate(config, it, total),
                config.momentum, config.weight_decay,
            )
            it += 1
    return state, it
