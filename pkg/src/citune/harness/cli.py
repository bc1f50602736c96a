"""Command line entry point: ``citune run|pairwise|gradcheck|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from .. import __version__
from ..metrics import RunReport, matrix_from_csv, render_table
from ..strategies.config import STRATEGIES, StrategyConfig, profile
from .config import ExperimentConfig, default_benchmark
from .runner import output_root, run_pairwise, run_stream, write_run

log = logging.getLogger("citune")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which we reserve for validation errors
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--profile", choices=("desk", "paper"), help="hyperparameter profile (default: desk, or the config file)")
    p.add_argument("--seed", type=int, nargs="+", help="one or more run seeds")
    p.add_argument("--tasks", type=int, help="number of synthetic tasks")
    p.add_argument("--task-order", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--buffer", type=float, dest="buffer_fraction", help="replay buffer fraction per task")
    p.add_argument("--tir", action="store_true", help="similarity-weighted regularization")
    p.add_argument("--tir-constant", type=float, help="replace similarity weights by a constant (ablation)")
    p.add_argument("--eproj-oracle-ids", action="store_true", help="evaluate expansion with ground-truth task IDs")
    p.add_argument("--time-thres", type=float, dest="time_threshold")
    p.add_argument("--reuse-retrain", action="store_true", help="keep training a reused module")
    p.add_argument("--output", type=Path, help="output directory (default: $CITUNE_OUTPUT_ROOT or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="citune", description="Continual instruction tuning experiments at desk scale.")
    parser.add_argument("--version", action="version", version=f"citune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train a sequential task stream")
    _add_experiment_flags(run)
    run.add_argument("--joint-stage0", action="store_true", help="merge the first tasks into one joint stage")
    run.add_argument("--joint-tasks", type=int)
    run.add_argument("--checkpoints", action="store_true", help="save a checkpoint after every stage")
    run.add_argument("--resume", type=Path, help="resume from a stage checkpoint directory")

    pair = sub.add_parser("pairwise", help="transfer and forgetting over every ordered task pair")
    _add_experiment_flags(pair)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient oracle suite")
    grad.add_argument("--seeds", type=int, default=100)
    grad.add_argument("--tol", type=float, default=1e-4)

    rep = sub.add_parser("report", help="re-render a table from A.csv or summary.json")
    rep.add_argument("path", type=Path)
    rep.add_argument("--label")
    return parser


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    strategy_overrides = {
        k: getattr(args, k)
        for k in ("epochs", "batch_size", "lr", "lambda1", "lambda2", "buffer_fraction", "time_threshold")
        if getattr(args, k) is not None
    }
    if args.tir or args.tir_constant is not None:
        strategy_overrides["tir_enabled"] = True
    if args.tir_constant is not None:
        strategy_overrides["tir_constant_weight"] = args.tir_constant
    if args.eproj_oracle_ids:
        strategy_overrides["eproj_oracle_ids"] = True
    if args.reuse_retrain:
        strategy_overrides["reuse_retrain"] = True

    name = args.strategy or config.strategy.strategy
    if args.config and args.profile is None:
        base = config.strategy.to_dict()
        if name != base["strategy"]:
            base.update(strategy=name, importance_measure=None)
        strategy = StrategyConfig.from_dict({**base, **strategy_overrides})
    else:
        strategy = profile(args.profile or "desk", name, **strategy_overrides)
    config = replace(config, strategy=strategy)

    if args.tasks is not None:
        config = replace(config, benchmark=replace(default_benchmark(args.tasks), seed=config.benchmark.seed))
    if args.task_order is not None:
        config = replace(config, task_order=args.task_order)
    if args.seed is not None:
        config = replace(config, seeds=args.seed)
    if args.output is not None:
        config = replace(config, output_dir=str(args.output))
    if getattr(args, "joint_stage0", False):
        config = replace(config, joint_stage0=True)
    if getattr(args, "joint_tasks", None) is not None:
        config = replace(config, joint_tasks=args.joint_tasks)
    if getattr(args, "checkpoints", False):
        config = replace(config, save_checkpoints=True)
    config.order()
    return config


def _cmd_run(args) -> int:
    config = experiment_from_args(args)
    if args.resume is not None and len(config.seeds) != 1:
        raise ValueError("--resume needs exactly one seed")
    root = output_root(config) / config.run_label()
    for seed in config.seeds:
        started = datetime.now(timezone.utc)
        target = root / f"seed{seed}"
        ckpt = target / "checkpoints" if config.save_checkpoints else None
        report = run_stream(config, seed, checkpoint_dir=ckpt, resume_from=args.resume)
        write_run(report, target, started)
        print(render_table(report.summary()), end="")
        if report.retrieval:
            print("task-ID accuracy:", ", ".join(f"{k}={v:.3f}" for k, v in report.retrieval.items()))
        print(f"wrote {target}")
    return EXIT_OK


def _cmd_pairwise(args) -> int:
    config = experiment_from_args(args)
    root = output_root(config) / "pairwise"
    for seed in config.seeds:
        rep = run_pairwise(config, seed)
        target = root / f"seed{seed}"
        rep.export(target)
        print("transfer (row: trained on, column: evaluated on)")
        print(rep.to_csv(rep.transfer), end="")
        print("forgetting (row: first task, column: second task)")
        print(rep.to_csv(rep.forgetting), end="")
        print(f"wrote {target}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from ..model import model_loss_gradcheck
    from ..numkernel import gradcheck_suite

    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    worst = gradcheck_suite(args.seeds)
    worst["model_loss"] = model_loss_gradcheck(args.seeds)
    failed = False
    for name, err in sorted(worst.items()):
        ok = err <= args.tol
        failed |= not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:<24} max rel err {err:.2e}")
    return EXIT_INVALID if failed else EXIT_OK


def _cmd_report(args) -> int:
    path = args.path
    if path.is_dir():
        path = path / "summary.json" if (path / "summary.json").exists() else path / "A.csv"
    if not path.exists():
        raise FileNotFoundError(f"no report at {path}")
    if path.suffix == ".json":
        summary = json.loads(path.read_text(encoding="utf-8"))
        if args.label:
            summary["label"] = args.label
    else:
        matrix = matrix_from_csv(path.read_text(encoding="utf-8"))
        summary = RunReport(matrix, {}, seed=-1, label=args.label or path.parent.name).summary()
    print(render_table(summary), end="")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "pairwise": _cmd_pairwise, "gradcheck": _cmd_gradcheck, "report": _cmd_report}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"citune: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"citune: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())
