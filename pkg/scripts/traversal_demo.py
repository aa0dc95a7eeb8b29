#!/usr/bin/env python3
"""Decode manifold traversals from a trained checkpoint: a few inter-basis
paths plus source->target inter-image paths, and export the latent scatter.

    python scripts/traversal_demo.py --ckpt runs/benchmark/sa/best.pt \
        --data runs/benchmark/data --out runs/traversals
"""

import argparse
import sys

import torch

from atlasmix.data import load_dataset, split_samples
from atlasmix.evaluation import export_latents, traverse_inter_basis, traverse_inter_image
from atlasmix.training import load_checkpoint, to_arrays


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--out", default="runs/traversals")
    parser.add_argument("--steps", type=int, default=7)
    parser.add_argument("--pairs", type=int, default=3, help="number of inter-image rows")
    args = parser.parse_args()

    model, _ = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    source = to_arrays(split_samples(samples, "source_train"))
    target = to_arrays(split_samples(samples, "target_train"))

    m = model.cfg.num_bases
    for i in range(1, m):
        traverse_inter_basis(model, i, i + 1, args.steps, args.out)

    gen = torch.Generator().manual_seed(0)
    for p in range(args.pairs):
        i = int(torch.randint(len(source), (1,), generator=gen))
        j = int(torch.randint(len(target), (1,), generator=gen))
        traverse_inter_image(
            model, source.images[i], target.images[j], args.steps, args.out, tag=f"s{i}_t{j}"
        )

    export_latents(model, split_samples(samples, "source_train") + split_samples(samples, "target_train"), args.out)
    print(f"wrote traversal grids, weight paths, and latent scatter to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
