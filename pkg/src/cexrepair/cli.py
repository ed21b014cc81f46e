"""Command-line entry points.

    cexrepair repair <task_dir> [--config file] [--out trace.json]
                     [--provider live|replay --fixtures dir]
                     [--runner shim|fixture --solver-fixtures dir]
    cexrepair bench <dataset> [--config ...] [--parallelism N] [--out report.json]
    cexrepair obfuscate <dataset> --strategy S [--out dir]
    cexrepair inject-bug <dataset> --strategy S [--out dir]
    cexrepair prune <task_dir>
    cexrepair classify <dataset>

Exit codes for `repair`: 0 on Pass, 1 on Fail, 2 on setup error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import bench, config as config_mod
from .cex_engine import FixtureRunner, ShimRunner
from .errors import CexRepairError, TaskSetupError
from .llm import CostLedger, LiveProvider, LLMClient, ReplayProvider
from .pipeline import ExternalVerifier, TaskInput, repair_task
from .source_model import parse_proof, prune_redundant_annotations

log = logging.getLogger(__name__)


def _add_provider_args(parser: argparse.ArgumentParser):
    parser.add_argument("--provider", choices=["live", "replay"], default="live")
    parser.add_argument("--fixtures", help="completion fixture dir for --provider replay")
    parser.add_argument("--runner", choices=["shim", "fixture"], default="shim")
    parser.add_argument("--solver-fixtures", help="report fixture dir for --runner fixture")


def _make_llm(args, cfg: dict) -> LLMClient:
    ledger = CostLedger(
        price_in_per_1k=config_mod.get(cfg, "llm.price_in_per_1k", 0.0),
        price_out_per_1k=config_mod.get(cfg, "llm.price_out_per_1k", 0.0),
    )
    if args.provider == "replay":
        if not args.fixtures:
            raise TaskSetupError("--provider replay requires --fixtures")
        return LLMClient(ReplayProvider(args.fixtures), ledger)
    model = config_mod.get(cfg, "llm.model", "deepseek-chat")
    return LLMClient(LiveProvider(model=model), ledger)


def _make_runner(args, cfg: dict):
    if args.runner == "fixture":
        if not args.solver_fixtures:
            raise TaskSetupError("--runner fixture requires --solver-fixtures")
        return FixtureRunner(args.solver_fixtures)
    return ShimRunner(shim_path=config_mod.resolve_shim_path(cfg))


def cmd_repair(args) -> int:
    cfg = config_mod.load_config(args.config)
    try:
        task = TaskInput.from_dir(args.task_dir)
        llm = _make_llm(args, cfg)
        runner = _make_runner(args, cfg)
        repair_cfg = config_mod.repair_config(cfg)
        verify_fn = ExternalVerifier(config=cfg, timeout=repair_cfg.verifier_timeout)
        trace = repair_task(task, repair_cfg, llm, runner, verify_fn)
    except (TaskSetupError, CexRepairError) as exc:
        log.error("setup failed: %s", exc)
        return 2
    out = args.out or os.path.join(args.task_dir, "trace.json")
    trace.write(out)
    print(f"{task.task_id}: {trace.final_status} "
          f"({len(trace.iterations)} iterations, trace at {out})")
    return 0 if trace.final_status == "Pass" else 1


def cmd_bench(args) -> int:
    cfg = config_mod.load_config(args.config)
    tasks = bench.load_dataset(args.dataset)
    if not tasks:
        log.error("no tasks found in %s", args.dataset)
        return 2
    repair_cfg = config_mod.repair_config(cfg)
    verify_fn = ExternalVerifier(config=cfg, timeout=repair_cfg.verifier_timeout)

    def llm_factory(task):
        return _make_llm(args, cfg)

    def runner_factory(task):
        return _make_runner(args, cfg)

    out = args.out or "bench_report.json"
    report = bench.run_bench(
        tasks, repair_cfg, args.parallelism, llm_factory, runner_factory,
        verify_fn, out_dir=os.path.dirname(out) or ".",
        prices=config_mod.prices(cfg))
    report.write(out)
    agg = report.aggregates
    print(f"{agg.get('passes', 0)}/{agg.get('tasks', 0)} passed "
          f"(success rate {agg.get('success_rate')}%), report at {out}")
    return 0


def cmd_obfuscate(args) -> int:
    cfg = config_mod.load_config(args.config)
    tasks = bench.load_dataset(args.dataset)
    llm = _make_llm(args, cfg)
    verify_fn = ExternalVerifier(config=cfg)
    strategy = bench.ObfuscationStrategy(args.strategy)
    out_dir = args.out or f"{args.dataset.rstrip('/')}_obfs"
    accepted = 0
    for task in tasks:
        result = bench.obfuscate_task(task, strategy, llm, verify_fn,
                                      max_repairs=args.max_repairs)
        if isinstance(result, bench.Rejected):
            print(f"{task.task_id}: rejected ({result.reason})")
            continue
        accepted += 1
        task_dir = os.path.join(out_dir, result.task_id)
        os.makedirs(task_dir, exist_ok=True)
        with open(os.path.join(task_dir, "unverified.rs"), "w", encoding="utf-8") as fh:
            fh.write(result.unverified_source)
        with open(os.path.join(task_dir, "verified.rs"), "w", encoding="utf-8") as fh:
            fh.write(result.ground_truth_source)
        print(f"{task.task_id}: accepted -> {task_dir}")
    print(f"{accepted}/{len(tasks)} obfuscations accepted")
    return 0


def cmd_inject_bug(args) -> int:
    cfg = config_mod.load_config(args.config)
    tasks = bench.load_dataset(args.dataset)
    llm = _make_llm(args, cfg)
    verify_fn = ExternalVerifier(config=cfg)
    strategy = bench.InjectionStrategy(args.strategy)
    out_dir = args.out or f"{args.dataset.rstrip('/')}_injected"
    accepted = 0
    for task in tasks:
        result = bench.inject_invariant_bug(task, strategy, llm, verify_fn)
        if isinstance(result, bench.Rejected):
            print(f"{task.task_id}: rejected ({result.reason})")
            continue
        accepted += 1
        task_dir = os.path.join(out_dir, result.task_id)
        os.makedirs(task_dir, exist_ok=True)
        with open(os.path.join(task_dir, "unverified.rs"), "w", encoding="utf-8") as fh:
            fh.write(result.unverified_source)
        with open(os.path.join(task_dir, "verified.rs"), "w", encoding="utf-8") as fh:
            fh.write(result.ground_truth_source)
        print(f"{task.task_id}: accepted -> {task_dir}")
    print(f"{accepted}/{len(tasks)} injections accepted")
    return 0


def cmd_prune(args) -> int:
    cfg = config_mod.load_config(args.config)
    verify_fn = ExternalVerifier(config=cfg)
    task = TaskInput.from_dir(args.task_dir)
    if task.ground_truth_source is None:
        log.error("task has no verified.rs to prune")
        return 2
    doc = parse_proof(task.ground_truth_source)
    pruned = prune_redundant_annotations(doc, verify_fn)
    out = args.out or os.path.join(args.task_dir, "verified.pruned.rs")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(pruned.source_text)
    print(f"pruned proof written to {out}")
    return 0


def cmd_classify(args) -> int:
    cfg = config_mod.load_config(args.config)
    verify_fn = ExternalVerifier(config=cfg)
    tasks = bench.load_dataset(args.dataset)
    rows = {}
    for task in tasks:
        if task.ground_truth_source is None:
            print(f"{task.task_id}: skipped (no ground truth)")
            continue
        label = bench.classify_difficulty(parse_proof(task.ground_truth_source), verify_fn)
        rows[task.task_id] = label.to_json()
        print(f"{task.task_id}: {label.invariant_bucket.value} "
              f"({label.invariant_count} invariants, "
              f"asserts={label.has_assertions}, proofs={label.has_proof_blocks})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=1, sort_keys=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cexrepair")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("repair", help="repair one task directory")
    p.add_argument("task_dir")
    p.add_argument("--config")
    p.add_argument("--out")
    _add_provider_args(p)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("bench", help="run a dataset and report metrics")
    p.add_argument("dataset")
    p.add_argument("--config")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out")
    _add_provider_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("obfuscate", help="build obfuscated variants of a dataset")
    p.add_argument("dataset")
    p.add_argument("--config")
    p.add_argument("--strategy", required=True,
                   choices=[s.value for s in bench.ObfuscationStrategy])
    p.add_argument("--max-repairs", type=int, default=5)
    p.add_argument("--out")
    _add_provider_args(p)
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("inject-bug", help="inject one-line invariant bugs")
    p.add_argument("dataset")
    p.add_argument("--config")
    p.add_argument("--strategy", required=True,
                   choices=[s.value for s in bench.InjectionStrategy])
    p.add_argument("--out")
    _add_provider_args(p)
    p.set_defaults(func=cmd_inject_bug)

    p = sub.add_parser("prune", help="remove redundant annotations from a verified proof")
    p.add_argument("task_dir")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("classify", help="difficulty labels for a dataset")
    p.add_argument("dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CexRepairError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
