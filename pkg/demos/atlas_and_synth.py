"""
From region boxes to an atlas, and from lesion boxes back to prompts.
"""
# %%
from gtune.atlas import BBox, build_atlas, load_boxes
from gtune.config import load_config
from gtune.synth import BoxRecord, match_box, synth_prompts

cfg = load_config("toy")
atlas = build_atlas(load_boxes(cfg["inputs"]["boxes"]))
for name in ("left apical", "right lower", "bibasilar", "cardiomegaly"):
    g = atlas[name]
    print(f"{name:<14} mu=({g.mu_x:6.1f}, {g.mu_y:6.1f})  sigma=({g.sigma_x:5.1f}, {g.sigma_y:5.1f})")

# %%
# One lesion box, matched with its runner-up
m = match_box(BBox(300, 300, 420, 440), atlas)
print(m.matched_location, round(m.distance, 1), "| runner-up:", m.runner_up[0], round(m.runner_up[1], 1))

# %%
records = [
    BoxRecord("a", "Pneumonia", (BBox(320, 60, 430, 150),)),
    BoxRecord("b", "Atelectasis", (BBox(60, 330, 200, 440), BBox(320, 330, 450, 440))),
    BoxRecord("c", "Edema", ()),
    # a 1024 px image: boxes are rescaled to the 512 frame before matching
    BoxRecord("d", "Pneumothorax", (BBox(120, 100, 400, 400),), image_size=(1024, 1024)),
]
notes = []
for s in synth_prompts(records, atlas, diagnostics=notes):
    print(f"{s.image_id}: {s.prompt}")
print("skipped:", notes)
