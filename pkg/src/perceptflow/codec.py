"""Deterministic spatiotemporal autoencoder between RGB-space video and latent grids.

Temporal compression keeps the first frame whole: ``T' = (T - 1) / f_t + 1``.
Spatial compression is exact: ``H' = H / f_s``.  Latents are standardized per
channel with statistics measured on the training videos.
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

CODEC_FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    latent_channels: int = 8
    f_t: int = 4
    f_s: int = 8
    stem: int = 16
    widths: tuple[int, ...] = (32, 48, 64)
    res_blocks: int = 0              # residual blocks per resolution stage

    def __post_init__(self):
        if self.latent_channels < 4:
            raise ValueError("latent_channels must be >= 4")
        for name, f in (("f_t", self.f_t), ("f_s", self.f_s)):
            if f < 1 or f & (f - 1):
                raise ValueError(f"{name} must be a power of two, got {f}")
        if self.f_t > self.f_s:
            raise ValueError("temporal factor may not exceed the spatial factor")
        if len(self.widths) != int(math.log2(self.f_s)):
            raise ValueError(f"need one width per spatial stage ({int(math.log2(self.f_s))})")


def latent_shape(T, H, W, f_t, f_s):
    """Latent grid size for a ``T x H x W`` video, validating divisibility."""
    if T < 1 or (T - 1) % f_t:
        raise ShapeError(f"frame count {T} must satisfy (T - 1) % {f_t} == 0")
    if H % f_s or W % f_s:
        raise ShapeError(f"height/width {H}x{W} must be divisible by {f_s}")
    return (T - 1) // f_t + 1, H // f_s, W // f_s


@dataclass
class LatentGrid:
    """Latents of shape ``[B,] T' x H' x W' x C`` plus the source video geometry."""
    values: torch.Tensor
    T: int
    H: int
    W: int
    f_t: int
    f_s: int

    def check(self):
        want = latent_shape(self.T, self.H, self.W, self.f_t, self.f_s)
        if tuple(self.values.shape[-4:-1]) != want:
            raise ShapeError(f"latent values {tuple(self.values.shape)} inconsistent with "
                             f"source {self.T}x{self.H}x{self.W} (expected {want} x C)")
        return self

    def replace(self, values):
        return LatentGrid(values, self.T, self.H, self.W, self.f_t, self.f_s)


class CausalConv3d(nn.Module):
    """3D conv whose temporal padding replicates the first frame (no look-ahead)."""

    def __init__(self, cin, cout, kernel=(3, 3, 3), stride=(1, 1, 1)):
        super().__init__()
        kt, kh, kw = kernel
        self.pad_t = kt - 1
        self.conv = nn.Conv3d(cin, cout, kernel, stride, padding=(0, kh // 2, kw // 2))

    def forward(self, x):
        if self.pad_t:
            x = torch.cat([x[:, :, :1].expand(-1, -1, self.pad_t, -1, -1), x], dim=2)
        return self.conv(x)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        groups = math.gcd(8, ch)
        self.n1 = nn.GroupNorm(groups, ch)
        self.c1 = CausalConv3d(ch, ch)
        self.n2 = nn.GroupNorm(groups, ch)
        self.c2 = CausalConv3d(ch, ch)
        # start as the identity so stacked blocks do not inflate activations
        nn.init.zeros_(self.c2.conv.weight)
        nn.init.zeros_(self.c2.conv.bias)

    def forward(self, x):
        return x + self.c2(F.silu(self.n2(self.c1(F.silu(self.n1(x))))))


def _upsample(x, temporal):
    x = F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
    if temporal:
        # T' -> 2T' - 1: the first latent frame expands to a single frame
        x = torch.repeat_interleave(x, 2, dim=2)[:, :, 1:]
    return x


class Codec(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or CodecConfig()
        n_s = len(cfg.widths)
        n_t = int(math.log2(cfg.f_t))
        # temporal stride lands on the deepest stages
        self.temporal = [i >= n_s - n_t for i in range(n_s)]

        chans = [cfg.stem, *cfg.widths]
        self.enc_in = CausalConv3d(3, cfg.stem, (1, 3, 3))
        self.enc_down = nn.ModuleList(
            CausalConv3d(chans[i], chans[i + 1], (3, 3, 3), (2 if self.temporal[i] else 1, 2, 2))
            for i in range(n_s))
        self.enc_res = nn.ModuleList(
            nn.Sequential(*[ResBlock(chans[i]) for _ in range(cfg.res_blocks)]) for i in range(n_s))
        self.enc_mid = ResBlock(chans[-1])
        self.enc_out = nn.Conv3d(chans[-1], cfg.latent_channels, 1)

        self.dec_in = nn.Conv3d(cfg.latent_channels, chans[-1], 1)
        self.dec_mid = ResBlock(chans[-1])
        self.dec_up = nn.ModuleList(
            CausalConv3d(chans[i + 1], chans[i], (3, 3, 3) if i > 0 else (1, 3, 3))
            for i in reversed(range(n_s)))
        self.dec_res = nn.ModuleList(
            nn.Sequential(*[ResBlock(chans[i]) for _ in range(cfg.res_blocks)]) for i in reversed(range(n_s)))
        self.dec_out = CausalConv3d(cfg.stem, 3, (1, 3, 3))

        self.register_buffer("latent_mean", torch.zeros(cfg.latent_channels))
        self.register_buffer("latent_std", torch.ones(cfg.latent_channels))

    # -- raw tensors, channels-first (B, C, T, H, W) --------------------------------
    def _encode(self, x):
        h = F.silu(self.enc_in(x))
        for res, conv in zip(self.enc_res, self.enc_down):
            h = F.silu(conv(res(h)))
        return self.enc_out(self.enc_mid(h))

    def _decode(self, z):
        h = self.dec_mid(self.dec_in(z))
        for conv, res, temporal in zip(self.dec_up, self.dec_res, reversed(self.temporal)):
            h = res(F.silu(conv(_upsample(h, temporal))))
        return self.dec_out(h)

    def _standardize(self, z):
        return (z - self.latent_mean[:, None, None, None]) / self.latent_std[:, None, None, None]

    def _unstandardize(self, z):
        return z * self.latent_std[:, None, None, None] + self.latent_mean[:, None, None, None]

    # -- channels-last public surface ---------------------------------------------
    def encode_tensor(self, video):
        """``(B, T, H, W, 3)`` -> standardized latents ``(B, T', H', W', C)``."""
        B, T, H, W, _ = video.shape
        latent_shape(T, H, W, self.config.f_t, self.config.f_s)
        z = self._standardize(self._encode(video.permute(0, 4, 1, 2, 3)))
        return z.permute(0, 2, 3, 4, 1)

    def decode_tensor(self, latents, clamp=True):
        """Standardized latents ``(B, T', H', W', C)`` -> video ``(B, T, H, W, 3)``."""
        x = self._decode(self._unstandardize(latents.permute(0, 4, 1, 2, 3)))
        x = x.permute(0, 2, 3, 4, 1)
        return x.clamp(0.0, 1.0) if clamp else x

    def decoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("dec_")]

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("enc_")]


def _as_batch(video, device=None, dtype=torch.float32):
    v = torch.as_tensor(np.asarray(video) if not torch.is_tensor(video) else video)
    v = v.to(dtype=dtype, device=device)
    return v[None] if v.ndim == 4 else v


def encode(video, codec):
    """Encode a ``T x H x W x 3`` (or batched) video into a :class:`LatentGrid`."""
    v = _as_batch(video, dtype=next(codec.parameters()).dtype)
    T, H, W = v.shape[1:4]
    if v.shape[-1] != 3:
        raise ShapeError(f"expected 3 channels, got {v.shape[-1]}")
    latent_shape(T, H, W, codec.config.f_t, codec.config.f_s)
    with torch.no_grad():
        z = codec.encode_tensor(v)
    if getattr(video, "ndim", None) == 4 or np.ndim(video) == 4:
        z = z[0]
    return LatentGrid(z, T, H, W, codec.config.f_t, codec.config.f_s)


def decode(latents, codec):
    """Decode a :class:`LatentGrid` back to video in ``[0, 1]``."""
    latents.check()
    if (latents.f_t, latents.f_s) != (codec.config.f_t, codec.config.f_s):
        raise ShapeError("latent grid factors do not match the codec")
    z = latents.values
    single = z.ndim == 4
    with torch.no_grad():
        out = codec.decode_tensor(z[None] if single else z)
    return out[0] if single else out


def dry_run_shapes(T, H, W, config=None):
    """Push a meta tensor of the given size through a codec; nothing is allocated."""
    cfg = config or CodecConfig()
    with torch.device("meta"):
        codec = Codec(cfg)
        x = torch.empty(1, T, H, W, 3)
        z = codec.encode_tensor(x)
        y = codec.decode_tensor(z)
    return tuple(z.shape[1:]), tuple(y.shape[1:])


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class CodecTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-3
    crop_frames: int = 9
    crop_size: int = 32
    seed: int = 0
    rmse_threshold: float = 0.05
    clip_norm: float = 1.0           # gradient-norm clip; the unnormalised convnet spikes without it
    log_every: int = 200
    codec: CodecConfig = field(default_factory=CodecConfig)


def _crop_batch(videos, rng, cfg, f_t, f_s):
    """Random crops aligned to the compression grid so latent cells line up."""
    T, H, W = videos.shape[1:4]
    ct = min(cfg.crop_frames, T)
    cs = min(cfg.crop_size, H, W)
    idx = rng.integers(0, len(videos), size=cfg.batch_size)
    t0 = rng.integers(0, (T - ct) // f_t + 1, size=cfg.batch_size) * f_t
    y0 = rng.integers(0, (H - cs) // f_s + 1, size=cfg.batch_size) * f_s
    x0 = rng.integers(0, (W - cs) // f_s + 1, size=cfg.batch_size) * f_s
    return np.stack([videos[i, t:t + ct, y:y + cs, x:x + cs]
                     for i, t, y, x in zip(idx, t0, y0, x0)])


def reconstruction_rmse(codec, videos, batch=2):
    """Per-pixel RMSE of ``decode(encode(v))`` over full videos."""
    sq, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(videos), batch):
            v = _as_batch(videos[i:i + batch])
            r = codec.decode_tensor(codec.encode_tensor(v))
            sq += float(((r - v) ** 2).sum())
            n += v.numel()
    return math.sqrt(sq / n)


def train_codec(videos, config=None, heldout=None):
    """Fit a codec to a stack of ``N x T x H x W x 3`` videos in [0, 1].

    After fitting, per-channel latent statistics over ``videos`` are frozen
    into the model.  ``heldout`` videos (defaults to the first training video)
    are used to report reconstruction RMSE against ``config.rmse_threshold``.
    """
    cfg = config or CodecTrainConfig()
    videos = np.asarray(videos, dtype=np.float32)
    if videos.ndim != 5 or len(videos) == 0:
        raise ValueError("train_codec needs a non-empty N x T x H x W x 3 stack of videos")
    latent_shape(*videos.shape[1:4], cfg.codec.f_t, cfg.codec.f_s)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    codec = Codec(cfg.codec)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / max(1, cfg.steps // 20)) * (0.1 ** (s / cfg.steps)))
    losses = []
    for step in range(cfg.steps):
        x = torch.from_numpy(_crop_batch(videos, rng, cfg, cfg.codec.f_t, cfg.codec.f_s))
        recon = codec.decode_tensor(codec._standardize(codec._encode(x.permute(0, 4, 1, 2, 3)))
                                    .permute(0, 2, 3, 4, 1), clamp=False)
        loss = F.mse_loss(recon, x)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"codec loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(codec.parameters(), cfg.clip_norm)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("codec step %d loss %.5f", step + 1, np.mean(losses[-cfg.log_every:]))
    codec.eval()
    _fit_latent_stats(codec, videos)
    check = videos[:1] if heldout is None else np.asarray(heldout, dtype=np.float32)
    codec.heldout_rmse = reconstruction_rmse(codec, check)
    codec.final_loss = losses[-1] if losses else float("nan")
    if codec.heldout_rmse > cfg.rmse_threshold:
        log.warning("codec held-out RMSE %.4f above threshold %.4f",
                    codec.heldout_rmse, cfg.rmse_threshold)
    return codec


def _fit_latent_stats(codec, videos):
    with torch.no_grad():
        zs = [codec._encode(_as_batch(v).permute(0, 4, 1, 2, 3)) for v in videos]
    z = torch.cat([q.transpose(0, 1).reshape(codec.config.latent_channels, -1) for q in zs], dim=1)
    codec.latent_mean.copy_(z.mean(dim=1))
    codec.latent_std.copy_(z.std(dim=1).clamp_min(1e-6))


def codec_checksum(codec):
    h = hashlib.sha256()
    for k, v in sorted(codec.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def codec_state(codec):
    return {"format_version": CODEC_FORMAT_VERSION, "kind": "codec",
            "config": asdict(codec.config), "state_dict": codec.state_dict()}


def codec_from_state(state):
    if state.get("kind") != "codec" or state.get("format_version") != CODEC_FORMAT_VERSION:
        raise ValueError(f"unsupported codec checkpoint (format {state.get('format_version')})")
    cfg = dict(state["config"])
    cfg["widths"] = tuple(cfg["widths"])
    codec = Codec(CodecConfig(**cfg))
    codec.load_state_dict(state["state_dict"])
    codec.eval()
    return codec


def save_codec(codec, path):
    # via a buffer: torch.save names the archive after the file, which would break byte equality
    buf = io.BytesIO()
    torch.save(codec_state(codec), buf)
    Path(path).write_bytes(buf.getvalue())
    return path


def load_codec(path):
    return codec_from_state(torch.load(path, weights_only=True))
