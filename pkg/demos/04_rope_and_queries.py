"""
3D rotary positions, prompts and query tokens
=============================================

The backbone sees latent video tokens with 3D rotary positions, a task
prompt, and one learnable query token per source frame for keypoints.
"""

# %%
import numpy as np
import torch

from perceptflow.backbone import Backbone, BackboneConfig, apply_rope, interp_temporal_position, rope3d_angles

# %%
# Rotary angles split head pairs 2:1:1 over (time, height, width).  Rotations
# keep norms and make dot products depend on position differences only.
x, y = torch.randn(2, 32, dtype=torch.float64)
p, q = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), torch.tensor([4.0, 0.5, 2.0], dtype=torch.float64)
ang = lambda v: rope3d_angles(v[0], v[1], v[2], 32)
base = (apply_rope(x, ang(p)) @ apply_rope(y, ang(q))).item()
shift = torch.tensor([5.0, -2.0, 7.0], dtype=torch.float64)
print("norm kept:", torch.allclose(apply_rope(x, ang(p)).norm(), x.norm()))
print("shift invariant:", base, (apply_rope(x, ang(p + shift)) @ apply_rope(y, ang(q + shift))).item())

# %%
# Query tokens sit at interpolated temporal positions, so frame f of 17 maps
# onto the 5 latent frames as f * 4 / 16.
print([round(interp_temporal_position(f, 17, 5), 2) for f in range(17)])

# %%
# One forward returns the velocity for the video tokens and the query outputs.
model = Backbone(BackboneConfig(width=32, depth=2, heads=2, kp_hidden=32)).eval()
z = torch.randn(5, 8, 8, 8)
v, qo = model(z, "kp2d", 0.0, queries=True)
print("v", tuple(v.shape), "queries", tuple(qo.shape), "keypoints", tuple(model.keypoint_head(qo, "kp2d").shape))

# %%
# With query masking on, adding the queries leaves the video stream untouched.
v_plain, _ = model(z, "depth", 0.0)
v_masked, _ = model(z, "depth", 0.0, queries=True, mask_query_tokens=True)
print("video stream unchanged by masked queries:", torch.equal(v_plain, v_masked))
