"""
Local sketch replacement
========================

Render a few synthetic people, turn them into pencil sketches with the
colour-dodge transform and paste a random rectangle of the sketch back into
the photo. The record of each replacement includes the global and local
difference norms; the local one can never exceed the global one.
"""

# %%
import tempfile

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from sketchreid import aa
from sketchreid.core import Modality
from sketchreid.data import SyntheticSpec, generate_synthetic, read_image

root = tempfile.mkdtemp()
manifest = generate_synthetic(SyntheticSpec(n_identities=8, n_episode_identities=6, n_eval_identities=1), root)
photos = [read_image(manifest.root / r.path) for r in manifest.select(modality=Modality.RGB)[::4][:4]]
drawn = [read_image(manifest.root / r.path) for r in manifest.select(modality=Modality.SKETCH)[::4][:4]]

# %%
# The photometric sketch is computed from the photo alone; the drawn sketch
# comes from the generator's outline renderer, so the two differ. That
# difference is the modality gap the augmentation only partly bridges.
rng = np.random.default_rng(0)
rows = []
for img in photos:
    local, sketch, rect = aa.augment(img, rng)
    g, l = aa.delta_norms(img, sketch, aa.rect_mask(rect, *img.shape[:2]))
    print(f"rect {rect}  global {g:6.2f}  local {l:6.2f}")
    rows.append((img, sketch, local))

fig, axes = plt.subplots(len(rows), 4, figsize=(5, 2.4 * len(rows)))
for (img, sketch, local), d, ax in zip(rows, drawn, axes):
    for a, im, title in zip(ax, (img, sketch, local, d), ("photo", "dodge sketch", "local replace", "drawn sketch")):
        a.imshow(im)
        a.set_title(title, fontsize=7)
        a.axis("off")
fig.tight_layout()
fig.savefig("augmentation.png", dpi=110)
