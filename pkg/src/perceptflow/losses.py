"""Training objectives.  All functions take torch tensors and are differentiable."""
from __future__ import annotations

import logging

import torch

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
MAD_EPS = 1e-8


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _pixel_mask(mask, shape):
    """Boolean mask over the leading pixel dims of ``shape``."""
    if mask is None:
        return torch.ones(shape, dtype=torch.bool)
    m = torch.as_tensor(mask)
    m = m > 0.5 if m.dtype != torch.bool else m
    m = m.expand(shape)
    if not m.any():
        raise ValueError("mask selects no pixels; the mean is undefined")
    return m


def rectified_flow_loss(v_pred, x0, eps):
    """Mean squared error between the predicted and true velocity ``eps - x0``."""
    _check_same(v_pred, x0)
    _check_same(x0, eps)
    return ((v_pred - (eps - x0)) ** 2).mean()


def normal_cosine_term(pred, gt, mask=None):
    """Masked mean of ``1 - cos(pred, gt)`` alone."""
    _check_same(pred, gt)
    m = _pixel_mask(mask, pred.shape[:-1])
    p, g = pred[m], gt[m]
    denom = torch.linalg.vector_norm(p, dim=-1).clamp_min(NORM_EPS) * torch.linalg.vector_norm(g, dim=-1)
    return (1.0 - (p * g).sum(-1) / denom).mean()


def normal_loss(pred, gt, mask=None):
    """Masked mean of ``|y - y_hat|_2 + (1 - cos(y, y_hat))`` over pixels.

    ``pred`` is used raw (not renormalized) in the distance term.
    """
    _check_same(pred, gt)
    m = _pixel_mask(mask, pred.shape[:-1])
    p, g = pred[m], gt[m]
    dist = torch.linalg.vector_norm(p - g, dim=-1)
    denom = torch.linalg.vector_norm(p, dim=-1).clamp_min(NORM_EPS) * torch.linalg.vector_norm(g, dim=-1)
    return (dist + 1.0 - (p * g).sum(-1) / denom).mean()


def median(x):
    """Median of a flat tensor; even counts average the two middle values."""
    return torch.quantile(x, 0.5, interpolation="midpoint")


def disparity_stats(d):
    """(median, mean absolute deviation from the median) of a flat tensor."""
    t = median(d)
    return t, (d - t).abs().mean()


def ssi_normalize(d):
    t, s = disparity_stats(d)
    return (d - t) / s.clamp_min(MAD_EPS)


def ssi_depth_loss(pred_disp, gt_disp, mask=None):
    """Scale-and-shift invariant disparity loss.

    Prediction and target are each centred by their median and scaled by their
    mean absolute deviation, computed once over the masked pixels of the whole
    video, then compared by mean absolute difference.
    """
    _check_same(pred_disp, gt_disp)
    m = _pixel_mask(mask, pred_disp.shape)
    p, g = pred_disp[m], gt_disp[m]
    tp, sp = disparity_stats(p)
    tg, sg = disparity_stats(g)
    if sp < MAD_EPS and sg < MAD_EPS:
        return (p * 0).sum()
    p_star = (p - tp) / sp.clamp_min(MAD_EPS)
    g_star = (g - tg) / sg.clamp_min(MAD_EPS)
    return (p_star - g_star).abs().mean()


def l2_loss(pred, gt, mask=None):
    """Masked mean squared error; ``mask`` covers the leading pixel dims."""
    _check_same(pred, gt)
    m = _pixel_mask(mask, pred.shape[:mask.ndim] if mask is not None else pred.shape)
    diff = (pred - gt)[m]
    return (diff ** 2).mean()


def keypoint_loss(pred, gt):
    """Mean squared coordinate error between two :class:`KeypointSet`-like objects.

    2D sets are restricted to joints visible in ``gt``; 3D sets are compared
    root-relative on both sides.
    """
    if pred.space != gt.space:
        raise ValueError(f"keypoint space mismatch: {pred.space} vs {gt.space}")
    p = torch.as_tensor(pred.coords)
    g = torch.as_tensor(gt.coords).to(p)
    _check_same(p, g)
    if gt.space == "root_relative":
        p = p - p[..., :1, :]
        g = g - g[..., :1, :]
        return ((p - g) ** 2).mean()
    vis = gt.visibility
    if vis is None:
        return ((p - g) ** 2).mean()
    vis = torch.as_tensor(vis).to(torch.bool)
    if not vis.any():
        log.warning("keypoint_loss: no visible joints, returning 0")
        return (p * 0).sum()
    return ((p - g) ** 2)[vis].mean()
