#!/usr/bin/env python3
"""Train every ablation arm of the synthetic alignment benchmark over several
seeds and tabulate test accuracy plus alignment diagnostics.

This is the oracle run behind the acceptance thresholds: it reports the
full-vs-baseline gap (mean and pooled std) and the per-seed alignment-gap
movement so the frozen test bounds can be checked against fresh numbers.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from rca.experiments import (ARMS, BENCHMARK_SETTINGS, run_ablation,
                             summarize_ablation, synth_benchmark_corpus)
from rca.metrics import alignment_report


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--arms", default=",".join(ARMS))
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    arms = [a for a in args.arms.split(",") if a]

    t0 = time.time()
    results = run_ablation(synth_benchmark_corpus, BENCHMARK_SETTINGS, arms, seeds,
                           log=print)
    summary = summarize_ablation(results)
    print()
    for arm in arms:
        mean, std = summary[arm]
        print(f"arm={arm} mean={mean:.4f} std={std:.4f}")

    if "full" in summary and "baseline" in summary:
        gap = summary["full"][0] - summary["baseline"][0]
        pooled = float(np.sqrt((summary["full"][1] ** 2 + summary["baseline"][1] ** 2) / 2))
        print(f"\nfull_minus_baseline={100 * gap:.2f} points pooled_std={100 * pooled:.2f}")

    if "full" in arms:
        print("\nalignment gaps (init -> trained), full arm:")
        for r in results:
            if r.arm != "full":
                continue
            init = alignment_report(r.run.initial_model, r.run.test_set)
            final = alignment_report(r.run.model, r.run.test_set)
            print(f"seed={r.seed} domain_separation {init.domain_separation:+.4f} -> "
                  f"{final.domain_separation:+.4f}  category_alignment "
                  f"{init.category_alignment:+.4f} -> {final.category_alignment:+.4f}")

    print(f"\ntotal {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
