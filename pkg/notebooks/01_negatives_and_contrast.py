# %% [markdown]
# Negatives from a lagging copy of the student
#
# The student is pulled towards the teacher output and pushed away from
# reconstructions made by an older copy of itself. This script walks through
# the three pieces: the refresh schedule of that copy, the degraded inputs it
# reconstructs, and the ratio loss built from them.

# %%
import numpy as np
import torch

from dckd.dcr import (build_history_model, dynamic_contrastive_loss, generate_negatives, init_ema_state,
                      maybe_ema_update)
from dckd.data import make_toy_corpus, synth_pair, to_tensor
from dckd.encoder import default_encoder
from dckd.models import STUDENT_ARCH, RestorationModel, extract_params

# %% [markdown]
# Refresh schedule. The interval starts at 1000 steps and doubles after every
# refresh until it reaches the cap.

# %%
student = RestorationModel(STUDENT_ARCH, seed=1)
state = init_ema_state(student, alpha=0.1, initial_step=1000, step_growth=2.0, step_cap=4000)
for t in range(1, 20_001):
    state = maybe_ema_update(state, extract_params(student), t)
print("refreshes:", state.refresh_iters)

# %% [markdown]
# Five negatives for one toy image, each from a different noise level.

# %%
gt = make_toy_corpus(seed=3, count=1, size=32)[0]
lq = to_tensor(synth_pair(gt, 2).lq)
history = build_history_model(state, STUDENT_ARCH)
negs = generate_negatives(history, lq, num=5, policy="noise", rng=np.random.default_rng(0))
for spec, img in zip(negs.specs, negs.images):
    print(f"{spec.kind} sigma={spec.value * 255:5.1f}/255  mean={img.mean().item():.3f}")

# %% [markdown]
# The loss falls as the anchor moves from a negative towards the positive.

# %%
encoder = default_encoder()
positive = torch.nn.functional.interpolate(lq, scale_factor=2, mode="bilinear", align_corners=False)
for w in (0.0, 0.25, 0.5, 0.75, 1.0):
    anchor = (1 - w) * negs.images[0] + w * positive
    loss = dynamic_contrastive_loss(anchor, positive, negs, encoder)
    print(f"w={w:.2f}  loss={loss.item():.4f}")
