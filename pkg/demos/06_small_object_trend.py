"""Does context plus attention help small objects?  A scaled-down rerun of that comparison.

    python demos/06_small_object_trend.py [seeds] [steps]

Trains ssd and fa_ssd identically on 1000 synthetic images (60% small
objects) and compares small-bucket mAP on 200 held-out images.  With the
defaults (3 seeds, 5000 steps) this takes several hours on one core; pass
fewer steps for a quick look.
"""
import sys
import time

from ctxssd.experiments import small_object_trend

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 5000
t0 = time.perf_counter()


def progress(kind, step, total):
    if step % 500 == 0:
        print(f"  {kind:6s} step {step:5d} loss {total:7.3f}  ({(time.perf_counter() - t0) / 60:.0f} min)", flush=True)


wins = 0
for seed in range(seeds):
    print(f"seed {seed}")
    reps = small_object_trend(seed, steps=steps, callback=progress)
    row = {k: r.per_bucket for k, r in reps.items()}
    for kind, buckets in row.items():
        print(f"  {kind:6s} mAP {reps[kind].map:.3f}  small {buckets['small']:.3f}  "
              f"medium {buckets['medium']:.3f}  large {buckets['large']:.3f}")
    wins += row["fa_ssd"]["small"] >= row["ssd"]["small"]
print(f"fa_ssd matched or beat ssd on small objects in {wins}/{seeds} seeds")
