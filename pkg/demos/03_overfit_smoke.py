"""Train one variant on ten synthetic images until it memorises them, then score it on the same images.

    python demos/03_overfit_smoke.py fa_ssd [steps]

This is the overfit smoke check from the acceptance suite.  At the default
2000 steps each variant takes roughly 7-12 minutes on one CPU core.
"""
import sys

from ctxssd.experiments import overfit_smoke

kind = sys.argv[1] if len(sys.argv) > 1 else "fa_ssd"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else None


def progress(step, total):
    if step % 100 == 0:
        print(f"step {step:5d}  loss {total:8.4f}", flush=True)


res = overfit_smoke(kind, steps=steps, callback=progress)
print(f"\n{kind}: loss {res.initial_loss:.2f} -> {res.final_loss:.4f} in {res.seconds / 60:.1f} min")
print(res.report.to_table())
