#!/usr/bin/env python3
"""Stress the streaming threshold estimator against full sorts.

Builds a dataset with a configurable number of values per unit (default
10^7), runs both estimators, and reports the true rank distance of each
streaming threshold inside the sorted population.
"""

import argparse
import math
import tempfile
import time
from pathlib import Path

import numpy as np

from dissect3d import dissection
from dissect3d.manifest import load_manifest


def build_dataset(root: Path, units: int, samples: int, side: int):
    from dissect3d.manifest import SampleEntry, save_manifest
    from dissect3d.tensor_io import save_tensor

    (root / "activations").mkdir(parents=True)
    entries = []
    for i in range(samples):
        rng = np.random.default_rng([2024, i])
        arr = rng.standard_normal((units, side, side, side)).astype(np.float32)
        save_tensor(root / "activations" / f"s{i:03d}.npy", arr)
        entries.append(
            SampleEntry(f"s{i:03d}", "T12", i % 2 == 0, 0.5, f"activations/s{i:03d}.npy",
                        None, "all")
        )
    save_manifest(entries, root / "manifest.jsonl")
    return load_manifest(root / "manifest.jsonl")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--units", type=int, default=4)
    parser.add_argument("--samples", type=int, default=40)
    parser.add_argument("--side", type=int, default=64)
    parser.add_argument("--q", type=float, default=0.005)
    parser.add_argument("--epsilon", type=float, default=1e-3)
    parser.add_argument("--workers", type=int, default=4)
    args = parser.parse_args()

    per_unit = args.samples * args.side**3
    print(f"{args.units} units x {per_unit:,} values per unit")
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        dataset = build_dataset(root, args.units, args.samples, args.side)

        t0 = time.perf_counter()
        exact = dissection.fit_thresholds(dataset, q=args.q, estimator="exact",
                                          workers=args.workers)
        t1 = time.perf_counter()
        streaming = dissection.fit_thresholds(
            dataset, q=args.q, estimator="streaming", workers=args.workers,
            epsilon=args.epsilon,
        )
        t2 = time.perf_counter()
        print(f"exact fit     {t1 - t0:7.2f}s")
        print(f"streaming fit {t2 - t1:7.2f}s")

        n = int(exact.population_count[0])
        target = dissection.nearest_rank(n, args.q)
        worst = 0
        for k in range(args.units):
            pooled = np.sort(
                np.concatenate(
                    [dissection.load_activation(e).units[k].ravel() for e in dataset]
                )
            )
            value = streaming.values[k]
            lo = int(np.searchsorted(pooled, value, side="left")) + 1
            hi = int(np.searchsorted(pooled, value, side="right"))
            dist = 0 if lo <= target <= hi else min(abs(target - lo), abs(target - hi))
            worst = max(worst, dist)
            print(
                f"unit {k}: exact={exact.values[k]:+.6f} "
                f"streaming={value:+.6f} rank_distance={dist}"
            )
        budget = math.floor(args.epsilon * n)
        print(f"worst rank distance {worst} (allowed {budget}): "
              f"{'OK' if worst <= budget else 'FAIL'}")


if __name__ == "__main__":
    main()
