#!/usr/bin/env python3
# %% [markdown]
# # Global, relational and fused models across seeds
#
# For every seed one backbone is trained and shared. Model A classifies
# with the backbone alone; B adds the plain relation network and C the
# identity-conditioned one, each joined to the global feature by a fusion
# layer. The relation networks' own heads give the PRN and PRN+ columns.
#
# ``python demos/03_variant_trend.py 0 1 2 3 4`` runs the five seeds of the
# acceptance check (about four minutes per seed on one core).

# %%
import sys
import time

from prnface.harness import gen_dataset
from prnface.harness.trend import trend_check

seeds = [int(s) for s in sys.argv[1:]] or [0, 1, 2]
data = gen_dataset()
start = time.perf_counter()


def progress(seed, accs):
    print(f"seed {seed} ({time.perf_counter() - start:.0f} s): "
          + ", ".join(f"{k} {v:.3f}" for k, v in accs.items()), flush=True)


# %%
report = trend_check(data, seeds, progress=progress)
print()
print("\n".join(report.lines()))
print("median backbone loss, first five epochs:",
      ", ".join(f"{v:.3f}" for v in report.median_backbone_loss(5)))
