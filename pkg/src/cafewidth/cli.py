"""Command-line harness: ``cafewidth <command> --config run.json``.

Each command writes ``result.json`` (deterministic), ``timing.json``
(wall-clock only) and ``manifest.json`` (enough to replay the run) into
the output directory. Failures exit non-zero with a JSON error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .archgraph import check_widths, sensitivities, supernet_flops
from .binplan import search_space_size, widths_from_bins
from .errors import CafeError, ConfigError
from .experiment import ExperimentConfig, dump, manifest, result_envelope
from .nnkernel import SupernetState, evaluate, kernels, save_checkpoint
from .nnkernel import load_checkpoint
from .searcher import (
    evolutionary_search,
    multi_stage_search,
    random_baseline,
    random_search,
    rank_correlation,
    retrain_from_scratch,
    uniform_baseline,
    write_json,
)
from .trainer import iterations_per_epoch, train_supernet

EXIT_USAGE = 64
EXIT_REPLAY_MISMATCH = 10
EXIT_INTERNAL = 1


class UsageError(Exception):
    pass


class ReplayMismatch(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def scientific(n: int) -> str:
    """Exact-integer friendly scientific notation (no float overflow)."""
    digits = str(abs(n))
    mant = digits[0] + ("." + digits[1:4] if len(digits) > 1 else "")
    return f"{'-' if n < 0 else ''}{mant}e+{len(digits) - 1:02d}"


class Run:
    """Shared state for one command invocation."""

    def __init__(self, config: ExperimentConfig, out: Path):
        self.cfg = config
        self.out = out
        self.graph = config.graph()
        self.timing: dict = {}
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = self.cfg.data()
        return self._data

    def path(self, name: str) -> Path:
        return self.out / name

    def train(self, seed: int, plan, **changes):
        tc = self.cfg.train_for(seed, **changes)
        state = SupernetState.init(self.graph, seed)
        every = self.cfg.checkpoint_every
        per_epoch = iterations_per_epoch(len(self.data.train), tc.batch_size)

        def on_step(it, rec):
            if every and (it + 1) % (every * per_epoch) == 0:
                save_checkpoint(state, self.path(f"supernet_seed{seed}_ep{(it + 1) // per_epoch}.cafw"))

        state, log = train_supernet(state, self.graph, plan, tc, self.data.train, on_step)
        return state, log, tc

    def search(self, state, plan, seed: int, tc, method: str | None = None):
        method = method or self.cfg.search_method
        F_b = self.cfg.budget(self.graph)
        policy = tc.candidate_policy(tc.seed)
        if method == "random":
            return random_search(state, self.graph, plan, F_b, self.cfg.random_samples, seed,
                                 self.data.val, tc.offset, policy)
        return evolutionary_search(state, self.graph, plan, F_b, self.cfg.evo_for(seed),
                                   self.data.val, tc.offset, policy)

    def retrain(self, width, seed: int) -> float | None:
        if not self.cfg.retrain:
            return None
        return retrain_from_scratch(self.graph, width, self.cfg.train_for(seed), self.data)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- commands ------------------------------------------------------------------


def cmd_plan_bins(run: Run, args) -> dict:
    plan = run.cfg.plan(run.graph)
    return {
        "flops0": supernet_flops(run.graph),
        "sensitivities": sensitivities(run.graph),
        "plan": plan.to_dict(),
        "bin_counts": plan.bin_counts(),
        "search_space": search_space_size([plan]),
    }


def cmd_analyze_space(run: Run, args) -> dict:
    cfg = run.cfg
    if cfg.stages == 1:
        plans = [cfg.plan(run.graph)]
        betas = [Fraction(cfg.beta0)]
    else:
        # later stages shrink the supernet to an unknown winner; bounded here by
        # planning every stage's beta on the original maxima
        betas = list(cfg.schedule(run.graph).betas)
        plans = [cfg.plan(run.graph, b) for b in betas]
    size = search_space_size(plans)
    print(size)
    print(scientific(size))
    return {
        "search_space": size,
        "search_space_scientific": scientific(size),
        "stages": [{"beta": str(b), "bin_counts": p.bin_counts(), "size": search_space_size([p])}
                   for b, p in zip(betas, plans)],
    }


def cmd_train(run: Run, args) -> dict:
    plan = run.cfg.plan(run.graph)
    rows = []
    for seed in run.cfg.seeds:
        state, log, _ = run.train(seed, plan)
        save_checkpoint(state, run.path(f"supernet_seed{seed}.cafw"))
        log.write_jsonl(run.path(f"train_log_seed{seed}.jsonl"))
        run.timing[f"seed{seed}"] = {"epoch_seconds": log.epoch_seconds}
        rows.append({
            "seed": seed,
            "iterations": len(log.records),
            "last_loss": log.records[-1]["loss"],
            "full_width_val_accuracy": evaluate(state, run.graph, None, run.data.val),
            "state_digest": state.digest(),
        })
    return {"plan": plan.to_dict(), "runs": rows}


def _search_summary(res, test_acc):
    return {
        "seed": res.seed, "best": res.best.to_dict(), "val_accuracy": res.accuracy,
        "flops": res.flops, "budget": res.budget, "evaluated": len(res.log),
        "test_accuracy": test_acc,
    }


def cmd_search(run: Run, args) -> dict:
    plan = run.cfg.plan(run.graph)
    rows = []
    for seed in run.cfg.seeds:
        if args.checkpoint:
            state = load_checkpoint(run.graph, args.checkpoint)
            tc = run.cfg.train_for(seed)
        else:
            state, log, tc = run.train(seed, plan)
            run.timing[f"seed{seed}"] = {"epoch_seconds": log.epoch_seconds}
        t0 = time.perf_counter()
        res = run.search(state, plan, seed, tc, args.method)
        run.timing.setdefault(f"seed{seed}", {})["search_seconds"] = time.perf_counter() - t0
        write_json(res.to_dict(), run.path(f"search_seed{seed}.json"))
        if args.method == "evo":
            res.write_history_csv(run.path(f"history_seed{seed}.csv"))
        rows.append(_search_summary(res, run.retrain(res.best, seed)))
    return {
        "method": args.method, "plan": plan.to_dict(), "runs": rows,
        "mean_test_accuracy": _mean(r["test_accuracy"] for r in rows),
    }


def cmd_multi_stage(run: Run, args) -> dict:
    schedule = run.cfg.schedule(run.graph)
    rows, csv_rows = [], []
    for seed in run.cfg.seeds:
        outcomes, final = multi_stage_search(
            run.graph, schedule, run.cfg.train_for(seed), run.cfg.evo_for(seed), run.data,
            run.cfg.search_method, run.cfg.random_samples,
        )
        run.timing[f"seed{seed}"] = {"stage_train_seconds": [o.train_seconds for o in outcomes]}
        for o in outcomes:
            csv_rows.append([seed, o.stage, o.budget, o.beta, o.result.accuracy, o.result.flops])
        rows.append({
            "seed": seed, "stages": [o.to_dict() | {"result": _search_summary(o.result, None)} for o in outcomes],
            "final": _search_summary(final, run.retrain(final.best, seed)),
        })
    _write_csv(run.path("stages.csv"), ["seed", "stage", "budget", "beta", "best_acc", "best_flops"], csv_rows)
    return {
        "schedule": schedule.to_dict(), "runs": rows,
        "mean_test_accuracy": _mean(r["final"]["test_accuracy"] for r in rows),
    }


def cmd_retrain(run: Run, args) -> dict:
    width = json.loads(args.width) if args.width else run.cfg.width
    if not width:
        raise ConfigError("retrain needs a width (config 'width' or --width JSON)")
    check_widths(run.graph, width)
    rows = [{"seed": s, "test_accuracy": retrain_from_scratch(run.graph, width, run.cfg.train_for(s), run.data)}
            for s in run.cfg.seeds]
    return {"width": dict(width), "runs": rows, "mean_test_accuracy": _mean(r["test_accuracy"] for r in rows)}


def cmd_baseline(run: Run, args) -> dict:
    F_b = run.cfg.budget(run.graph)
    rows = []
    if args.kind == "uniform":
        width = uniform_baseline(run.graph, F_b)
        for s in run.cfg.seeds:
            acc = retrain_from_scratch(run.graph, width, run.cfg.train_for(s), run.data)
            rows.append({"seed": s, "width": width.to_dict(), "test_accuracy": acc})
    else:
        for s in run.cfg.seeds:
            acc, width = random_baseline(run.graph, F_b, run.data, run.cfg.train_for(s), s,
                                         run.cfg.random_baseline)
            rows.append({"seed": s, "width": width.to_dict(), "test_accuracy": acc})
    return {"kind": args.kind, "budget": F_b, "runs": rows,
            "mean_test_accuracy": _mean(r["test_accuracy"] for r in rows)}


def _sweep(run: Run, name: str, values, changes_for) -> dict:
    plan = run.cfg.plan(run.graph)
    rows, csv_rows = [], []
    for v in values:
        for seed in run.cfg.seeds:
            state, log, tc = run.train(seed, plan, **changes_for(v))
            res = run.search(state, plan, seed, tc)
            test = run.retrain(res.best, seed)
            run.timing[f"{name}={v}/seed{seed}"] = {"train_seconds": sum(log.epoch_seconds)}
            rows.append({name: v, **_search_summary(res, test)})
            csv_rows.append([v, seed, res.accuracy, res.flops, test])
    _write_csv(run.path(f"ablate_{name}.csv"), [name, "seed", "val_accuracy", "flops", "test_accuracy"], csv_rows)
    means = {str(v): {"val_accuracy": _mean(r["val_accuracy"] for r in rows if r[name] == v),
                      "test_accuracy": _mean(r["test_accuracy"] for r in rows if r[name] == v)} for v in values}
    return {"parameter": name, "values": list(values), "runs": rows, "means": means}


def cmd_ablate_r(run: Run, args) -> dict:
    return _sweep(run, "r", run.cfg.r_values, lambda r: {"offset": r})


def cmd_ablate_lambda(run: Run, args) -> dict:
    return _sweep(run, "lambda", run.cfg.lambda_values, lambda lam: {"warmup": lam})


def cmd_ablate_bins(run: Run, args) -> dict:
    run.cfg.bins = args.kind
    plan = run.cfg.plan(run.graph)
    rows = []
    for seed in run.cfg.seeds:
        state, log, tc = run.train(seed, plan)
        res = run.search(state, plan, seed, tc)
        run.timing[f"seed{seed}"] = {"train_seconds": sum(log.epoch_seconds)}
        rows.append(_search_summary(res, run.retrain(res.best, seed)))
    _write_csv(run.path("ablate_bins.csv"), ["kind", "seed", "val_accuracy", "flops", "test_accuracy"],
               [[args.kind, r["seed"], r["val_accuracy"], r["flops"], r["test_accuracy"]] for r in rows])
    return {"kind": args.kind, "plan": plan.to_dict(), "search_space": search_space_size([plan]),
            "runs": rows, "mean_test_accuracy": _mean(r["test_accuracy"] for r in rows)}


def cmd_rank_corr(run: Run, args) -> dict:
    plan = run.cfg.plan(run.graph)
    space = [dict(zip(plan.groups, c))
             for c in itertools.product(*(range(1, plan.bin_count(g) + 1) for g in plan.groups))]
    if len(space) > run.cfg.rank_max_widths:
        pick = np.random.default_rng(run.cfg.data_seed).choice(len(space), run.cfg.rank_max_widths, replace=False)
        space = [space[i] for i in sorted(pick)]
    widths = [widths_from_bins(plan, c) for c in space]
    rows, table = [], {}
    for seed in run.cfg.seeds:
        oracle = [retrain_from_scratch(run.graph, w, run.cfg.train_for(seed), run.data, split="val") for w in widths]
        taus = {}
        for r in run.cfg.rank_offsets:
            state, _, tc = run.train(seed, plan, offset=r)
            taus[str(r)] = rank_correlation(state, run.graph, plan, widths, oracle, run.data.val, r,
                                            tc.candidate_policy(tc.seed))
        rows.append({"seed": seed, "tau": taus, "oracle": oracle})
        table[seed] = oracle
    _write_csv(run.path("rank_corr.csv"), ["seed", "width", "oracle_accuracy"],
               [[s, json.dumps(w.to_dict(), sort_keys=True), a] for s, accs in table.items()
                for w, a in zip(widths, accs)])
    mean_tau = {str(r): _mean(row["tau"][str(r)] for row in rows) for r in run.cfg.rank_offsets}
    return {"widths": [w.to_dict() for w in widths], "runs": rows, "mean_tau": mean_tau}


COMMANDS = {
    "plan-bins": cmd_plan_bins,
    "analyze-space": cmd_analyze_space,
    "train": cmd_train,
    "search": cmd_search,
    "multi-stage": cmd_multi_stage,
    "retrain": cmd_retrain,
    "baseline": cmd_baseline,
    "ablate-r": cmd_ablate_r,
    "ablate-lambda": cmd_ablate_lambda,
    "ablate-bins": cmd_ablate_bins,
    "rank-corr": cmd_rank_corr,
}


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="experiment JSON")
    common.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    common.add_argument("--reference", action="store_true", help="single-threaded, bitwise reproducible")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--budget-fraction", type=float, help="FLOPs budget as a fraction of the full network")
    common.add_argument("--stages", type=int)
    common.add_argument("--offset", type=int, help="free-zone offset r")
    common.add_argument("--policy", help="shared | sampled:M")

    parser = _Parser(prog="cafewidth", description="Network width search with locally free weight sharing.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("plan-bins", "analyze-space", "train", "multi-stage", "ablate-r", "ablate-lambda", "rank-corr"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("search", parents=[common])
    p.add_argument("method", choices=["random", "evo"])
    p.add_argument("--checkpoint", type=Path, help="search a saved supernet instead of training one")
    p = sub.add_parser("retrain", parents=[common])
    p.add_argument("--width", help='JSON width vector, e.g. \'{"g1": 8}\'')
    p = sub.add_parser("baseline", parents=[common])
    p.add_argument("kind", choices=["uniform", "random"])
    p = sub.add_parser("ablate-bins", parents=[common])
    p.add_argument("kind", choices=["uniform", "sensitive"])
    p = sub.add_parser("replay")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def _command_tokens(args) -> list[str]:
    tokens = [args.command]
    for extra in ("method", "kind"):
        if getattr(args, extra, None):
            tokens.append(getattr(args, extra))
    return tokens


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    doc = cfg.to_dict()
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    if args.budget_fraction is not None:
        doc["budget_fraction"], doc["budget_flops"] = args.budget_fraction, None
    if args.stages is not None:
        doc["stages"] = args.stages
    if args.offset is not None:
        doc["offset"] = args.offset
    if args.policy is not None:
        doc["policy"] = args.policy
    if args.reference:
        doc["train"]["reference"] = True
    if args.out is not None:
        doc["out"] = str(args.out)
    return ExperimentConfig.from_dict(doc)


def execute(tokens: list[str], cfg: ExperimentConfig, args, argv: list[str]) -> Path:
    """Run one command and write its three documents; returns the output directory."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    old_threads = os.environ.get("CAFEWIDTH_THREADS")
    if cfg.train.reference:
        os.environ["CAFEWIDTH_THREADS"] = "1"
    t0 = time.perf_counter()
    try:
        # one BLAS thread keeps gemm reduction order, hence results, fixed
        with threadpool_limits(limits=1 if cfg.train.reference else None):
            result = COMMANDS[tokens[0]](run, args)
    finally:
        if cfg.train.reference:
            if old_threads is None:
                os.environ.pop("CAFEWIDTH_THREADS", None)
            else:
                os.environ["CAFEWIDTH_THREADS"] = old_threads
    run.timing["total_seconds"] = time.perf_counter() - t0
    dump(result_envelope(tokens, cfg, result), out / "result.json")
    dump({"command": " ".join(tokens), **run.timing}, out / "timing.json")
    doc = manifest(tokens, argv, cfg, kernels.active())
    doc["args"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                   if k in ("method", "kind", "width", "checkpoint")}
    dump(doc, out / "manifest.json")
    return out


def replay(manifest_path: Path, out: Path | None) -> Path:
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}") from None
    original = manifest_path.parent / "result.json"
    out = out or manifest_path.parent / "replay"
    cfg = ExperimentConfig.from_dict({**doc["config"], "out": str(out)})
    if doc.get("kernels") in kernels.available():
        kernels.use(doc["kernels"])
    args = argparse.Namespace(**{"method": None, "kind": None, "width": None, "checkpoint": None, **doc.get("args", {})})
    if args.checkpoint:
        args.checkpoint = Path(args.checkpoint)
    execute(doc["command"], cfg, args, doc.get("argv", []))
    if original.exists() and original.read_bytes() != (out / "result.json").read_bytes():
        raise ReplayMismatch(f"replayed result differs from {original}")
    return out


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "replay":
            out = replay(args.manifest, args.out)
            print(f"replay identical: {out / 'result.json'}")
            return 0
        cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
        out = execute(_command_tokens(args), cfg, args, argv)
        if args.command != "analyze-space":
            print(out / "result.json")
        return 0
    except UsageError as exc:
        return _fail("UsageError", str(exc), EXIT_USAGE)
    except ReplayMismatch as exc:
        return _fail("ReplayMismatch", str(exc), EXIT_REPLAY_MISMATCH)
    except CafeError as exc:
        return _fail(type(exc).__name__, str(exc), exc.exit_code)
    except Exception as exc:  # noqa: BLE001 - last-resort structured report
        return _fail(type(exc).__name__, str(exc), EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
