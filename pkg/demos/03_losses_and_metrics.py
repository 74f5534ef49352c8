"""
Training objectives and evaluation metrics
==========================================

Small worked numbers for each loss and metric.
"""

# %%
import math

import numpy as np
import torch

from perceptflow.losses import l2_loss, normal_loss, rectified_flow_loss, ssi_depth_loss
from perceptflow.metrics import angular_error, depth_metrics, matting_metrics, pose_metrics

t = lambda x: torch.tensor(x, dtype=torch.float64)

# %%
# Normal loss: distance plus one minus cosine.  Orthogonal unit vectors give
# sqrt(2) + 1, opposite ones give 2 + 2.
print(normal_loss(t([[[[1.0, 0, 0]]]]), t([[[[0, 1.0, 0]]]])).item(), math.sqrt(2) + 1)
print(normal_loss(t([[[[0, 0, 1.0]]]]), t([[[[0, 0, -1.0]]]])).item())

# %%
# The scale-and-shift invariant disparity loss ignores positive affine maps.
d = torch.rand(2, 4, 4, dtype=torch.float64) + 0.1
print("ssi(3d+1, d) =", ssi_depth_loss(3 * d + 1, d).item())
print("ssi 2x2 case  =", ssi_depth_loss(t([[[1.0, 2], [3, 5]]]), t([[[1.0, 2], [3, 4]]])).item())

# %%
# Flow matching regresses v = eps - x0; L2 is a masked mean squared error.
x0, eps = torch.randn(4, 3), torch.randn(4, 3)
print("flow loss at target:", rectified_flow_loss(eps - x0, x0, eps).item())
print("l2 with offset 0.2:", l2_loss(x0 + 0.2, x0).item())

# %%
# Metrics.  Normals are scored in degrees, depth after least-squares
# alignment in disparity, mattes with the usual MAD/MSE/Grad/Conn/dtSSD and
# poses in millimetres.
rng = np.random.default_rng(0)
n = rng.normal(size=(2, 8, 8, 3))
n /= np.linalg.norm(n, axis=-1, keepdims=True)
print(angular_error(n, n))
z = rng.uniform(1, 4, size=(2, 8, 8))
print(depth_metrics(0.5 / z + 2.0, z))
a = rng.uniform(size=(3, 16, 16))
print(matting_metrics(np.clip(a + 0.05, 0, 1), a))
pose = rng.normal(size=(6, 16, 3))
print(pose_metrics(pose + 0.01 * rng.normal(size=pose.shape), pose, fps=24.0))
