"""
Short training run and evaluation
=================================

Train the dual-path encoder episodically for a few cycles with and without
the augmentation and perturbation components, then retrieve held-out
identities' RGB images from their sketches and run the diagnostics.
Runs are kept short; the acceptance suite uses 200 cycles and five seeds.
"""

# %%
import tempfile

import numpy as np
import torch

from sketchreid import evaluation, metaloop
from sketchreid.core import TrainConfig
from sketchreid.data import SyntheticSpec, generate_synthetic, load_splits

torch.set_num_threads(1)
splits = load_splits(generate_synthetic(SyntheticSpec(), tempfile.mkdtemp()))
print(f"{splits.n_classes} training identities, {len(splits.eval_query)} held-out sketch queries, "
      f"{len(splits.gallery)} gallery images")

# %%
variants = {"baseline": dict(use_aa=False, use_ktc=False), "full": dict()}
trained = {}
for name, flags in variants.items():
    result = metaloop.run(TrainConfig(cycles=20, **flags), splits)
    trained[name] = result.state
    rep = evaluation.evaluate_retrieval(result.state.params, splits.eval_query, splits.gallery)
    last = result.records[-1]
    print(f"{name:9s} loss {last['total']:.3f}  Rank-1 {rep.rank_k[1]:.3f}  "
          f"Rank-5 {rep.rank_k[5]:.3f}  mAP {rep.map:.3f}")

# %%
# Diagnostics never modify the parameters they inspect.
state = trained["full"]
diag = evaluation.diagnose(state.params, splits.gallery, splits.eval_query, 8 / 255, np.random.default_rng(0))
for key, value in diag.as_dict().items():
    print(f"{key:18s} {value}")
