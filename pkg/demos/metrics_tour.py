"""
Heatmap metrics on hand-made maps.

A quick look at how CNR, mIoU and Otsu react to a few synthetic heatmaps
placed against a single ground-truth box.
"""
# %%
import numpy as np

from gtune.atlas import BBox
from gtune.evaluation import apply_otsu, cnr, miou, oracle_heatmap, otsu_threshold, postprocess

rng = np.random.default_rng(0)
box = [BBox(64, 48, 160, 144)]
size = (256, 256)

# %% [markdown]
# The oracle puts a Gaussian on the box itself, so it is a fair upper reference.

# %%
oracle = oracle_heatmap(box, size)
print("oracle     CNR %.3f  mIoU %.3f" % (cnr(oracle, box), miou(oracle, box)))

# %%
# A coarse 16x16 attention-like map: bright patch near the box plus background clutter
raw = rng.uniform(0, 0.35, size=(16, 16))
raw[4:8, 5:9] += 0.6
hm = postprocess(raw, size)
print("raw map    CNR %.3f  mIoU %.3f" % (cnr(hm, box), miou(hm, box)))

# %%
t = otsu_threshold(hm.values)
cleaned = apply_otsu(hm.values)
print(f"otsu cut at {t:.4f}, keeps {np.mean(cleaned > 0):.1%} of pixels")
print("after otsu CNR %.3f  mIoU %.3f" % (cnr(cleaned, box), miou(cleaned, box)))

# %%
# Shifting the bright patch away from the box drives both numbers down
for shift in (0, 2, 4, 6):
    moved = np.roll(raw, shift, axis=1)
    h = postprocess(moved, size)
    print(f"shift {shift:>2} cells: CNR {cnr(h, box):6.3f}  mIoU {miou(h, box):.3f}")
