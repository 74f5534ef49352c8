"""Diffusion transformer over latent grids with 3D rotary positions and keypoint query tokens.

Conventions: ``t = 1`` is pure noise and ``t = 0`` clean latents, so
``x_t = (1 - t) x_0 + t eps`` and the network predicts ``v = eps - x_0``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .codec import ShapeError
from .perception import KEYPOINT_TASKS, TASKS, UnknownTaskError

BACKBONE_FORMAT_VERSION = 1
GENERATE = "generate"
PROMPT_KEYS = TASKS + (GENERATE,)


class RopeConfigError(ValueError):
    pass


# -- rotary embeddings --------------------------------------------------------------

def rope_pairs(head_dim, split=(2, 1, 1)):
    """Number of rotation pairs given to the (t, h, w) axes."""
    if head_dim % 2:
        raise RopeConfigError(f"head_dim {head_dim} must be even")
    pairs = head_dim // 2
    if pairs % sum(split):
        raise RopeConfigError(f"head_dim {head_dim} gives {pairs} pairs, not divisible "
                              f"by the axis split {split}")
    unit = pairs // sum(split)
    return tuple(s * unit for s in split)


def rope_frequencies(head_dim, split=(2, 1, 1), base=10000.0, dtype=torch.float64):
    """Per-axis frequency vectors ``base ** (-2 i / d_axis)``."""
    return [base ** (-2.0 * torch.arange(n, dtype=dtype) / (2 * n)) for n in rope_pairs(head_dim, split)]


def rope3d_angles(t_pos, h_pos, w_pos, head_dim, split=(2, 1, 1), base=10000.0):
    """Rotation angles for tokens at (t, h, w); shape ``[...,] head_dim / 2``.

    The first block of pairs encodes time, then height, then width.
    """
    pos = [torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
           for p in (t_pos, h_pos, w_pos)]
    freqs = rope_frequencies(head_dim, split, base, dtype=pos[0].dtype)
    return torch.cat([p[..., None] * f.to(p) for p, f in zip(pos, freqs)], dim=-1)


def apply_rope(x, angles):
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` of ``x`` by ``angles[i]``."""
    if x.shape[-1] != 2 * angles.shape[-1]:
        raise RopeConfigError(f"token width {x.shape[-1]} != 2 x {angles.shape[-1]} angles")
    a, b = x[..., 0::2], x[..., 1::2]
    cos, sin = torch.cos(angles).to(x.dtype), torch.sin(angles).to(x.dtype)
    return torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1).flatten(-2)


def interp_temporal_position(frame, T, T_latent):
    """Map a source frame index onto the latent time axis: ``frame * (T' - 1) / (T - 1)``."""
    return frame * (T_latent - 1) / (T - 1)


# -- model ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 8
    width: int = 128
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    frames: int = 17                 # query tokens, one per source frame
    latent_grid: tuple[int, int, int] = (5, 8, 8)
    num_keypoints: int = 16
    kp_hidden: int = 256
    rope_base: float = 10000.0
    rope_split: tuple[int, int, int] = (2, 1, 1)
    mask_query_tokens: bool = True   # video tokens may not attend to query tokens
    perception_timestep: float = 0.0  # t fed at perception time; 0 is the clean end
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        rope_pairs(self.width // self.heads, self.rope_split)


@dataclass
class PromptEmbedding:
    task: str
    vector: torch.Tensor


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class QueryTokenBank(nn.Module):
    """One learnable token per source frame with learnable spatial RoPE positions."""

    def __init__(self, frames, width, latent_grid, generator=None):
        super().__init__()
        Tl, Hl, Wl = latent_grid
        self.tokens = nn.Parameter(torch.randn(frames, width, generator=generator) * 0.02)
        lo = torch.zeros(2)
        hi = torch.tensor([Hl - 1.0, Wl - 1.0])
        self.spatial_pos = nn.Parameter(lo + (hi - lo) * torch.rand(frames, 2, generator=generator))
        self.register_buffer("temporal_pos", torch.tensor(
            [interp_temporal_position(f, frames, Tl) for f in range(frames)]))

    def __len__(self):
        return self.tokens.shape[0]


class Block(nn.Module):
    def __init__(self, width, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(approximate="tanh"),
                                 nn.Linear(mlp_ratio * width, width))
        self.ada = nn.Linear(width, 6 * width)

    def _qkv(self, h, rope):
        B, N, D = h.shape
        q, k, v = self.qkv(h).view(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        return apply_rope(q, rope), apply_rope(k, rope), v

    @staticmethod
    def _attend(q, k, v):
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return (w @ v).transpose(1, 2).flatten(2)

    def forward(self, main, query, cond, rope_main, rope_query, mask_queries):
        # main and query streams go through separate calls so that a masked query
        # stream cannot perturb the main stream's arithmetic
        s1, c1, g1, s2, c2, g2 = self.ada(F.silu(cond)).chunk(6, dim=-1)
        qm, km, vm = self._qkv(_modulate(self.norm1(main), s1, c1), rope_main)
        if query is None:
            am = self._attend(qm, km, vm)
        else:
            qq, kq, vq = self._qkv(_modulate(self.norm1(query), s1, c1), rope_query)
            k_all, v_all = torch.cat([km, kq], dim=2), torch.cat([vm, vq], dim=2)
            am = self._attend(qm, km, vm) if mask_queries else self._attend(qm, k_all, v_all)
            aq = self._attend(qq, k_all, v_all)
            query = query + g1[:, None] * self.proj(aq)
            query = query + g2[:, None] * self.mlp(_modulate(self.norm2(query), s2, c2))
        main = main + g1[:, None] * self.proj(am)
        main = main + g2[:, None] * self.mlp(_modulate(self.norm2(main), s2, c2))
        return main, query


class Backbone(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        gen = torch.Generator().manual_seed(cfg.seed)
        D = cfg.width
        self.head_dim = D // cfg.heads
        self.patch = nn.Linear(cfg.latent_channels, D)
        self.prompt_table = nn.Embedding(len(PROMPT_KEYS), D)
        self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(D, 2 * D)
        self.final = nn.Linear(D, cfg.latent_channels)
        self.query_norm = nn.LayerNorm(D, eps=1e-6)
        self.queries = QueryTokenBank(cfg.frames, D, cfg.latent_grid, gen)
        K = cfg.num_keypoints
        self.kp_heads = nn.ModuleDict({
            "kp2d": nn.Sequential(nn.Linear(D, cfg.kp_hidden), nn.GELU(), nn.Linear(cfg.kp_hidden, K * 2)),
            "kp3d": nn.Sequential(nn.Linear(D, cfg.kp_hidden), nn.GELU(), nn.Linear(cfg.kp_hidden, K * 3)),
        })
        self._init_weights(gen)
        self.forward_calls = 0

    def _init_weights(self, gen):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                bound = math.sqrt(6.0 / (m.in_features + m.out_features))
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
        with torch.no_grad():
            self.prompt_table.weight.normal_(0.0, 1.0, generator=gen)
            for b in self.blocks:  # adaLN-zero: blocks start as identities
                b.ada.weight.zero_()
                b.ada.bias.zero_()
            self.final_ada.weight.zero_()
            self.final_ada.bias.zero_()
            self.final.weight.zero_()
            self.final.bias.zero_()
            # keypoint heads start at the root (3D) and the image centre (2D); random
            # metre-scale outputs give gradient norms above the drop threshold
            for head in self.kp_heads.values():
                head[-1].weight.zero_()
                head[-1].bias.zero_()

    # -- prompts ------------------------------------------------------------------
    def task_index(self, task):
        if task not in PROMPT_KEYS:
            raise UnknownTaskError(task, PROMPT_KEYS)
        return PROMPT_KEYS.index(task)

    def prompt_embedding(self, task):
        idx = torch.tensor([self.task_index(task)])
        return PromptEmbedding(task, self.prompt_table(idx)[0])

    def _prompt_vectors(self, prompt, batch):
        if isinstance(prompt, PromptEmbedding):
            return prompt.vector.expand(batch, -1)
        if isinstance(prompt, str):
            prompt = [prompt] * batch
        idx = torch.tensor([self.task_index(p) for p in prompt])
        return self.prompt_table(idx)

    # -- positions ------------------------------------------------------------------
    def grid_angles(self, Tl, Hl, Wl, dtype):
        t, h, w = torch.meshgrid(torch.arange(Tl, dtype=dtype), torch.arange(Hl, dtype=dtype),
                                 torch.arange(Wl, dtype=dtype), indexing="ij")
        ang = rope3d_angles(t.flatten(), h.flatten(), w.flatten(), self.head_dim,
                            self.config.rope_split, self.config.rope_base)
        zero = torch.zeros(1, ang.shape[-1], dtype=dtype)
        return torch.cat([zero, ang])  # prompt token sits at the origin

    def query_angles(self, dtype):
        q = self.queries
        return rope3d_angles(q.temporal_pos.to(dtype), q.spatial_pos[:, 0], q.spatial_pos[:, 1],
                             self.head_dim, self.config.rope_split, self.config.rope_base)

    # -- forward -------------------------------------------------------------------
    def forward(self, latents, prompt, t, queries=False, mask_query_tokens=None):
        """Predict ``v`` for ``latents`` (``[B,] T' x H' x W' x C``).

        Returns ``(v_pred, query_out)``; ``query_out`` is ``[B,] T x width`` when
        ``queries`` is set, else ``None``.  ``mask_query_tokens`` defaults to
        the config value.
        """
        self.forward_calls += 1
        if mask_query_tokens is None:
            mask_query_tokens = self.config.mask_query_tokens
        single = latents.ndim == 4
        x = latents[None] if single else latents
        if x.ndim != 5 or x.shape[-1] != self.config.latent_channels:
            raise ShapeError(f"latents must be [B,] T' x H' x W' x {self.config.latent_channels}, "
                             f"got {tuple(latents.shape)}")
        B, Tl, Hl, Wl, C = x.shape
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(B)
        if torch.any((t < 0) | (t > 1)):
            raise ValueError("timestep must lie in [0, 1]")

        pv = self._prompt_vectors(prompt, B).to(x.dtype)
        cond = self.time_mlp(timestep_embedding(t, self.config.width)) + pv
        main = torch.cat([pv[:, None], self.patch(x.reshape(B, Tl * Hl * Wl, C))], dim=1)
        rope_main = self.grid_angles(Tl, Hl, Wl, x.dtype)

        query = rope_query = None
        if queries:
            query = self.queries.tokens.to(x.dtype)[None].expand(B, -1, -1)
            rope_query = self.query_angles(x.dtype)
        for blk in self.blocks:
            main, query = blk(main, query, cond, rope_main, rope_query, mask_query_tokens)

        shift, scale = self.final_ada(F.silu(cond)).chunk(2, dim=-1)
        v = self.final(_modulate(self.final_norm(main[:, 1:]), shift, scale)).reshape(B, Tl, Hl, Wl, C)
        q_out = self.query_norm(query) if query is not None else None
        if single:
            v = v[0]
            q_out = q_out[0] if q_out is not None else None
        return v, q_out

    def keypoint_head(self, query_out, task):
        """Decode query outputs into per-frame keypoints.

        ``kp2d`` is sigmoid-bounded to [0, 1]; ``kp3d`` is made root-relative
        (joint 0 at the origin).
        """
        if task not in KEYPOINT_TASKS:
            raise UnknownTaskError(task, KEYPOINT_TASKS)
        K = self.config.num_keypoints
        out = self.kp_heads[task](query_out)
        if task == "kp2d":
            return torch.sigmoid(out.unflatten(-1, (K, 2)))
        out = out.unflatten(-1, (K, 3))
        return out - out[..., :1, :]


def backbone_state(model, codec_checksum=None):
    return {"format_version": BACKBONE_FORMAT_VERSION, "kind": "backbone",
            "config": asdict(model.config), "prompt_keys": list(PROMPT_KEYS),
            "codec_checksum": codec_checksum, "state_dict": model.state_dict()}


def backbone_from_state(state):
    if state.get("kind") != "backbone" or state.get("format_version") != BACKBONE_FORMAT_VERSION:
        raise ValueError(f"unsupported backbone checkpoint (format {state.get('format_version')})")
    if tuple(state["prompt_keys"]) != PROMPT_KEYS:
        raise ValueError("checkpoint prompt table does not match the registered tasks")
    cfg = dict(state["config"])
    for k in ("latent_grid", "rope_split"):
        cfg[k] = tuple(cfg[k])
    model = Backbone(BackboneConfig(**cfg))
    model.load_state_dict(state["state_dict"])
    return model

