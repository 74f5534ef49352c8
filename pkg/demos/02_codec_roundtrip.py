"""
Video codec round trip
======================

Fit the small causal video autoencoder on RGB and modality videos and see
what survives compression.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np
import torch

from perceptflow.codec import CodecTrainConfig, decode, dry_run_shapes, encode
from perceptflow.codec import train_codec
from perceptflow.datagen.io import ClipDataset, generate_dataset
from perceptflow.perception import DENSE_TASKS, encode_modality
from perceptflow.pipeline import codec_training_videos

torch.set_num_threads(1)

# %%
# Shape arithmetic first.  The first frame is kept whole, so 17 frames become
# 5 latent frames; 81x480x832 becomes 21x60x104 (checked without allocating).
print("desk :", dry_run_shapes(17, 64, 64)[0])
print("full scale:", dry_run_shapes(81, 480, 832)[0])

# %%
# A short fit on two clips.  Raise `steps` for a sharper codec.
root = Path(tempfile.mkdtemp(prefix="demo02_"))
generate_dataset(root, [0, 1])
ds = ClipDataset(root)
videos = codec_training_videos(ds)
codec = train_codec(videos, CodecTrainConfig(steps=300, log_every=100))
print(f"final loss {codec.final_loss:.4f}, rmse on clip 0 {codec.heldout_rmse:.3f}")

# %%
# Reconstruction error per modality on clip 0.
clip = ds[0]
for name, v in [("rgb", clip.rgb)] + [(t, encode_modality(clip.gt, t).values) for t in DENSE_TASKS]:
    grid = encode(v, codec)
    back = decode(grid, codec).numpy()
    print(f"{name:<13} latent {tuple(grid.values.shape)}  rmse {np.sqrt(((back - v) ** 2).mean()):.3f}")
