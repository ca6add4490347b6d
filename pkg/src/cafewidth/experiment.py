"""Experiment configuration, result envelopes and run manifests."""

from __future__ import annotations

import hashlib
import json
import platform
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .archgraph import NetworkGraph, supernet_flops
from .binplan import BinPlan, StageSchedule, make_schedule, plan_bins, plan_uniform_bins
from .data import Splits, load_dataset
from .errors import ConfigError
from .searcher import EvoConfig, RandomBaselineConfig
from .trainer import TrainConfig

RESULT_FORMAT = "cafewidth-result/1"


def _fraction(value, name: str) -> Fraction:
    try:
        out = Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{name} must be a rational number, got {value!r}") from None
    if out <= 0:
        raise ConfigError(f"{name} must be positive")
    return out


@dataclass
class ExperimentConfig:
    arch: dict | str
    dataset: dict | str
    data_seed: int = 0
    out: str = "runs/latest"
    train: TrainConfig = field(default_factory=TrainConfig)
    evo: EvoConfig = field(default_factory=EvoConfig)
    stages: int = 1
    beta0: str = "1"
    alpha: str = "2"
    budget_fraction: float | None = 0.5
    budget_flops: int | None = None
    offset: int = 1
    policy: str = "shared"
    seeds: list[int] = field(default_factory=lambda: [0])
    bins: str = "sensitive"             # or "uniform"
    uniform_bins: int = 4
    search_method: str = "evo"
    random_samples: int = 2000
    retrain: bool = True
    random_baseline: RandomBaselineConfig = field(default_factory=RandomBaselineConfig)
    r_values: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    lambda_values: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    rank_offsets: list[int] = field(default_factory=lambda: [0, 1])
    rank_max_widths: int = 16
    checkpoint_every: int = 0
    width: dict | None = None

    def __post_init__(self):
        if isinstance(self.train, Mapping):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.evo, Mapping):
            self.evo = EvoConfig.from_dict(self.evo)
        if isinstance(self.random_baseline, Mapping):
            self.random_baseline = RandomBaselineConfig(**self.random_baseline)
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        self.seeds = [int(s) for s in self.seeds]
        if self.budget_flops is None:
            if self.budget_fraction is None or not 0 < self.budget_fraction <= 1:
                raise ConfigError("budget_fraction must lie in (0, 1]")
        elif self.budget_flops < 0:
            raise ConfigError("budget_flops must be non-negative")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        self.beta0 = str(_fraction(self.beta0, "beta0"))
        self.alpha = str(_fraction(self.alpha, "alpha"))
        if self.bins not in ("sensitive", "uniform"):
            raise ConfigError(f"bins must be 'sensitive' or 'uniform', got {self.bins!r}")
        if self.uniform_bins < 1:
            raise ConfigError("uniform_bins must be >= 1")
        if self.search_method not in ("evo", "random"):
            raise ConfigError(f"unknown search method {self.search_method!r}")
        # offset and policy live at top level but drive the trainer
        self.train = TrainConfig.from_dict({**self.train.to_dict(), "offset": self.offset, "policy": self.policy})
        for p in (self.arch, self.dataset):
            if isinstance(p, str) and not Path(p).exists():
                raise ConfigError(f"referenced file {p} does not exist")

    # -- loading ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: Mapping, base: Path | None = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        for key in ("arch", "dataset"):
            if key not in doc:
                raise ConfigError(f"config is missing {key!r}")
        doc = dict(doc)
        if base is not None:
            for key in ("arch", "dataset"):
                if isinstance(doc[key], str):
                    doc[key] = str((base / doc[key]).resolve())
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc, base=path.parent)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, RandomBaselineConfig):
                v = {"candidates": v.candidates, "screen_epochs": v.screen_epochs}
            out[f.name] = v
        out["train"]["milestones"] = list(out["train"]["milestones"])
        return out

    def digest(self) -> str:
        """Hash of everything that can change results (the output path cannot)."""
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    # -- derived objects ----------------------------------------------------------

    def graph(self) -> NetworkGraph:
        if isinstance(self.arch, str):
            return NetworkGraph.load(self.arch)
        return NetworkGraph.from_dict(self.arch)

    def data(self) -> Splits:
        return load_dataset(self.dataset, seed=self.data_seed)

    def budget(self, graph: NetworkGraph) -> int:
        if self.budget_flops is not None:
            return int(self.budget_flops)
        return int(Fraction(str(self.budget_fraction)) * supernet_flops(graph))

    def plan(self, graph: NetworkGraph, beta: Fraction | None = None) -> BinPlan:
        if self.bins == "uniform":
            return plan_uniform_bins(graph, self.uniform_bins)
        return plan_bins(graph, Fraction(self.beta0) if beta is None else beta)

    def schedule(self, graph: NetworkGraph) -> StageSchedule:
        return make_schedule(supernet_flops(graph), self.budget(graph), self.stages,
                             Fraction(self.beta0), Fraction(self.alpha))

    def train_for(self, seed: int, **changes) -> TrainConfig:
        return TrainConfig.from_dict({**self.train.to_dict(), "seed": seed, **changes})

    def evo_for(self, seed: int) -> EvoConfig:
        return EvoConfig.from_dict({**self.evo.to_dict(), "seed": seed})


def plain(obj):
    """Convert numpy scalars, fractions and mappings to JSON-native values."""
    if isinstance(obj, Mapping):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Fraction):
        return str(obj)
    return obj


def dump(doc, path: Path) -> None:
    path.write_text(json.dumps(plain(doc), indent=2, sort_keys=True) + "\n")


def result_envelope(command: list[str], config: ExperimentConfig, result: dict) -> dict:
    return {
        "format": RESULT_FORMAT,
        "command": " ".join(command),
        "config_hash": config.digest(),
        "seeds": config.seeds,
        "result": result,
    }


def manifest(command: list[str], argv: list[str], config: ExperimentConfig, backend: str) -> dict:
    import scipy

    return {
        "command": command,
        "argv": argv,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "seeds": config.seeds,
        "kernels": backend,
        "versions": {
            "cafewidth": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
