#!/usr/bin/env python3
"""Run the full synthetic benchmark: generate data, train the joint model and
the two-stage models, evaluate all three on the target test split, and print
the ordering summary. Results land under --workdir (reused if present).

    python scripts/run_benchmark.py --workdir runs/benchmark [--config cfg.yaml]
    python scripts/run_benchmark.py --workdir runs/benchmark --ablate-usage
"""

import argparse
import sys

from atlasmix.benchmark import run_benchmark
from atlasmix.config import validate_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None, help="flat YAML config; defaults otherwise")
    parser.add_argument("--workdir", default="runs/benchmark")
    parser.add_argument("--ablate-usage", action="store_true", help="also train without the usage term")
    parser.add_argument("--ablation-epochs", type=int, default=None)
    parser.add_argument("--fresh", action="store_true", help="ignore an existing summary.json")
    args = parser.parse_args()

    cfg = validate_config(args.config)
    result = run_benchmark(
        cfg,
        args.workdir,
        ablate_usage=args.ablate_usage,
        ablation_epochs=args.ablation_epochs,
        reuse=not args.fresh,
    )
    print(result.ordering_summary())
    print(f"(total {result.elapsed_s / 60:.1f} min; artifacts in {args.workdir})")
    gap = result.sf_dsc - result.sa_dsc
    margin = min(result.sa_dsc, result.sf_dsc) - result.no_adapt_dsc
    print(f"sf-sa gap: {gap:+.3f}; adaptation margin over baseline: {margin:+.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
