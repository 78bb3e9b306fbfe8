"""
Universal perturbation
======================

Fit one bounded perturbation shared by a whole batch with momentum
sign-gradient steps, in both update directions, and watch the batch-hard
triplet objective move. The perturbation never leaves the 8/255 box.
"""

# %%
import tempfile

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from sketchreid import metaloop
from sketchreid.core import TrainConfig
from sketchreid.data import SyntheticSpec, generate_synthetic, load_splits
from sketchreid.ktc import PerturbationState, optimize_perturbation

torch.set_num_threads(1)
spec = SyntheticSpec(n_identities=24, n_episode_identities=8, n_eval_identities=2)
splits = load_splits(generate_synthetic(spec, tempfile.mkdtemp()))

# %%
# A briefly trained encoder gives the objective some structure.
cfg = TrainConfig(cycles=5, use_ktc=False)
params = metaloop.run(cfg, splits).state.params
batch = splits.meta_train[:32]

fig, (ax_loss, ax_eta) = plt.subplots(1, 2, figsize=(7, 3))
for direction in (1, -1):
    run_cfg = TrainConfig(update_direction=direction, max_iter=40)
    state = PerturbationState.from_config(run_cfg, *splits.image_shape[:2])
    history = []
    state = optimize_perturbation(params, batch, batch, state, run_cfg, history)
    print(f"direction {direction:+d}: loss {history[0]:.4f} -> {history[-1]:.4f}, "
          f"max |eta| = {np.abs(state.eta).max() * 255:.2f}/255")
    ax_loss.plot(history, label=f"direction {direction:+d}")
    if direction == -1:
        ax_eta.imshow(0.5 + state.eta / (2 * run_cfg.epsilon_unit))
ax_loss.set_xlabel("iteration")
ax_loss.set_ylabel("triplet objective")
ax_loss.legend()
ax_eta.set_title("eta (rescaled)")
ax_eta.axis("off")
fig.tight_layout()
fig.savefig("perturbation.png", dpi=110)
