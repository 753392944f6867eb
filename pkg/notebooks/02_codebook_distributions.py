# %% [markdown]
# Per-pixel distributions over a fixed codebook
#
# Deep encoder features are soft-assigned to the 32 shipped code vectors. The
# teacher's assignment is the target and the student's is trained towards it
# with a pixel-wise cross-entropy.

# %%
import torch

from dckd.data import make_toy_corpus, synth_pair, to_tensor
from dckd.dmm import category_distribution, dmm_loss, entropy
from dckd.encoder import default_codebook, default_encoder

encoder, codebook = default_encoder(), default_codebook()
print(f"codebook: M={codebook.M}, d={codebook.d}")

# %%
gt = to_tensor(make_toy_corpus(seed=5, count=2, size=32))
feats = encoder.deepest_features(gt)
for temp in (0.25, 1.0, 4.0):
    cmap = category_distribution(feats, codebook, temperature=temp)
    top = cmap.probs.max(-1).values.mean().item()
    print(f"T={temp:<5} entropy={entropy(cmap).item():.3f} nats  mean max-prob={top:.3f}")

# %% [markdown]
# A blurrier output lands on different codes, so its cross-entropy against
# the sharp target is larger than the target's own entropy.

# %%
blurry = torch.nn.functional.interpolate(to_tensor([synth_pair(g, 2).lq for g in gt.permute(0, 2, 3, 1).numpy()]),
                                         scale_factor=2, mode="bilinear", align_corners=False)
print("CE(sharp, sharp) =", round(dmm_loss(gt, gt, encoder, codebook).item(), 4))
print("CE(sharp, blurry) =", round(dmm_loss(gt, blurry, encoder, codebook).item(), 4))
