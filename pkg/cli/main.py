"""
Command-line interface.

    python afa.py run configs/two_task_synthetic.yaml --seed 1 --epochs-scale 0.5
    python afa.py run configs/two_task_synthetic.yaml --resume runs/<run>
    python afa.py eval runs/<run>/methods/afa/checkpoint.pt [data.yaml]
    python afa.py plot runs/<run>
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from .commands import EXIT_CONFIG, cmd_eval, cmd_plot, cmd_run

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(prog="afa", description="Continual learning with attention and semantic alignment")
  parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
  commands = parser.add_subparsers(dest="command", required=True)

  run = commands.add_parser("run", help="Run an experiment config")
  run.add_argument("config", help="YAML experiment config")
  run.add_argument("--seed", type=int)
  run.add_argument("--out", dest="out_dir", help="Output root (config out_dir)")
  run.add_argument("--methods", help="Comma separated method labels, e.g. finetune,lwf,afa")
  run.add_argument("--lambda1", type=float)
  run.add_argument("--lambda2", type=float)
  run.add_argument("--lambda3", type=float)
  run.add_argument("--epochs-scale", type=float)
  run.add_argument("--parallel-methods", type=int, help="Worker processes for independent methods")
  run.add_argument("--resume", metavar="RUN_DIR", help="Continue an interrupted run of the same config")

  evaluate = commands.add_parser("eval", help="Evaluate a checkpoint, print accuracies as JSON")
  evaluate.add_argument("checkpoint")
  evaluate.add_argument("data", nargs="?", help="Optional data descriptor (YAML/JSON); default: the checkpoint's")

  plot = commands.add_parser("plot", help="Write plot data (and images) from a results directory")
  plot.add_argument("results_dir")
  plot.add_argument("--no-render", action="store_true", help="Plot data files only")
  return parser


def main(argv: Optional[List[str]] = None) -> int:
  load_dotenv()
  args = build_parser().parse_args(argv)
  logging.basicConfig(
      level=logging.DEBUG if args.verbose else logging.INFO,
      format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
  )

  if args.command == "run":
    if args.resume and not Path(args.resume, "config.json").is_file():
      print(f"error: {args.resume} is not a run directory", file=sys.stderr)
      return EXIT_CONFIG
    overrides = {key: getattr(args, key) for key in ("seed", "out_dir", "methods", "lambda1", "lambda2", "lambda3",
                                                     "epochs_scale", "parallel_methods")}
    return cmd_run(args.config, {k: v for k, v in overrides.items() if v is not None}, run_dir=args.resume)
  if args.command == "eval":
    return cmd_eval(args.checkpoint, args.data)
  return cmd_plot(args.results_dir, render=not args.no_render)


if __name__ == "__main__":
  sys.exit(main())
