"""Command line entry point: ``metalearn list`` and ``metalearn run``."""
from __future__ import annotations

import argparse
import sys

from .benchmarks import list_tasksets
from .runner import ALGORITHMS, ConfigError, ExperimentConfig, run_experiment


def registry_text() -> str:
    return (f"tasksets: {' '.join(list_tasksets())}\n"
            f"algorithms: {' '.join(ALGORITHMS)}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metalearn", description="Meta-learning benchmarks on synthetic tasks.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="print the available tasksets and algorithms")

    run = sub.add_parser("run", help="meta-train and evaluate one configuration")
    d = ExperimentConfig()
    run.add_argument("--benchmark", required=True)
    run.add_argument("--algorithm", required=True)
    run.add_argument("--ways", type=int, default=d.ways)
    run.add_argument("--shots", type=int, default=d.shots)
    run.add_argument("--query-shots", type=int, default=d.query_shots)
    run.add_argument("--adapt-steps", type=int, default=d.adapt_steps)
    run.add_argument("--inner-lr", type=float, default=d.inner_lr)
    run.add_argument("--outer-lr", type=float, default=d.outer_lr)
    run.add_argument("--iterations", type=int, default=d.meta_iterations)
    run.add_argument("--task-batch", type=int, default=d.task_batch_size)
    run.add_argument("--seed", type=int, default=d.seed)
    run.add_argument("--output", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        sys.stdout.write(registry_text())
        return 0
    config = ExperimentConfig(
        benchmark=args.benchmark, algorithm=args.algorithm, ways=args.ways, shots=args.shots,
        query_shots=args.query_shots, adapt_steps=args.adapt_steps, inner_lr=args.inner_lr,
        outer_lr=args.outer_lr, meta_iterations=args.iterations, task_batch_size=args.task_batch,
        seed=args.seed, output=args.output)
    try:
        result = run_experiment(config)
    except ConfigError as exc:
        print(f"metalearn: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"metalearn: cannot write {args.output}: {exc}", file=sys.stderr)
        return 1
    s = result.summary
    print(f"{s['metric']}: pre {s['pre_adaptation_mean']:.4f}  post {s['post_adaptation_mean']:.4f} "
          f"+/- {s['post_adaptation_std']:.4f} over {s['eval_tasks']} tasks "
          f"({result.wall_clock_seconds:.1f}s) -> {args.output}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
