"""
Tuning location tokens on the packaged toy problem.

Curates the toy sentences, builds the atlas, runs the optimizer and prints
how the localization loss and the contrast of the attention map move.
"""
# %%
import numpy as np

from gtune.atlas import build_atlas, load_boxes
from gtune.attention import forward, heatmap
from gtune.config import load_config
from gtune.curation import curate
from gtune.evaluation import cnr_region
from gtune.pipeline import make_backend, make_tune_config
from gtune.tensorio import read_jsonl
from gtune.tuning import Codebook, optimize, prepare_samples

cfg = load_config("toy")
samples, stats = curate(r for _, r, _ in read_jsonl(cfg["inputs"]["annotations"]))
print(stats["samples"], "prompts:", sorted({s.prompt for s in samples}))

# %%
atlas = build_atlas(load_boxes(cfg["inputs"]["boxes"]))
backend = make_backend(cfg)
codebook = Codebook.init(dim=backend.emb_dim, seed=cfg["seed"])
prepared = prepare_samples(samples, atlas, codebook.vocab, backend.side, backend.S)

# %%
tuned, trace = optimize(prepared, codebook, backend, make_tune_config(cfg))
for rec in trace[::40]:
    print(f"step {rec['step']:>3}  L_div {rec['L_div']:.4f}  L_loc {rec['L_loc']:.4f}")

# %%
s = prepared[0]
mask = s.grid > cfg["tune"]["eps_mask"]


def show(book):
    hm = heatmap(forward(backend.for_image(s.image_id), book, s.token_ids, s.special_mask))
    rows = ["".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row) for row in hm / hm.max()]
    return cnr_region(hm, mask)[0], "\n".join(rows)


for name, book in (("before", codebook), ("after", tuned)):
    value, art = show(book)
    print(f"\n{name}: CNR against the target mask {value:.3f}\n{art}")

# %%
print("\ntarget\n" + "\n".join("".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row)
                               for row in s.grid / s.grid.max()))
print("frozen rows untouched:",
      np.array_equal(tuned.embeddings[~codebook.trainable], codebook.embeddings[~codebook.trainable]))
