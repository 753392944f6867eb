# %% [markdown]
# A short toy x2 super-resolution distillation
#
# Trains the 8-channel student three ways on the same data and teacher: L1 to
# ground truth only, plus L1 to the teacher, and the full objective. Lengths
# are cut down so the script finishes in about a minute; `dckd compare
# --methods scratch,logits,dckd configs/smoke.toml` runs the full version.

# %%
import os
import tempfile

import torch

from dckd.config import load_config, shipped_config
from dckd.experiments import METHOD_PRESETS, apply_overrides, compare

torch.set_num_threads(1)
os.environ.setdefault("DCKD_RUNS", tempfile.mkdtemp(prefix="dckd-"))

cfg = load_config(shipped_config("smoke.toml"), [
    "train.total_iterations=600", "teacher.pretrain_iterations=1500", "dcr.initial_step=100",
])
named = [(m, apply_overrides(cfg, METHOD_PRESETS[m])) for m in ("scratch", "logits", "dckd")]

# %%
result = compare(named)
print(result["table"])
