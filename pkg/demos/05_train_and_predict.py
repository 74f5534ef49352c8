"""
End-to-end: pretrain, fine-tune in two stages, predict
======================================================

A deliberately small run of the whole pipeline on three clips.  The numbers
are far from converged; the point is the flow of artifacts.  Expect a few
minutes on one CPU core.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np
import torch

from perceptflow import config as config_mod
from perceptflow import pipeline
from perceptflow.metrics import format_report
from perceptflow.perception import TASKS

torch.set_num_threads(1)

# %%
# Shrink every stage through config overrides; the same keys can be set from
# a YAML file or PERCEPTFLOW_* environment variables.
cfg = config_mod.load_config(overrides={
    "datagen": {"clips": 3},
    "codec": {"steps": 300},
    "pretrain": {"steps": 40},
    "latent": {"steps": 60},
    "ambient": {"steps": 20},
})
out = Path(tempfile.mkdtemp(prefix="demo05_"))
report = pipeline.run_pipeline(cfg, out)

# %%
# Every stage left a versioned artifact and the metrics log is one JSON line
# per step.
print(sorted(p.name for p in out.iterdir()))
print((out / "metrics.jsonl").read_text().splitlines()[-1])

# %%
# Scores on the training clips.
print(format_report(report).split("\n\n")[0])

# %%
# Inference on one clip writes rasters or keypoint tables plus panels
# (input | prediction | ground truth).
for task in ("normal", "kp2d"):
    pipeline.run_infer(task, out / "data" / "clip_0", out / "ambient.ckpt", out / "infer" / task)
print(sorted(p.name for p in (out / "infer" / "normal").iterdir()))
