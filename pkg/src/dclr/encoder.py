"""Small factorized (2+1)D video encoder plus activation-map utilities."""
from __future__ import annotations

import logging

import torch
import torch.nn as nn

from .config import EncoderConfig
from .errors import ShapeError

log = logging.getLogger(__name__)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    if kind == "group":
        return nn.GroupNorm(min(4, channels), channels)
    return nn.Identity()


class Conv2Plus1D(nn.Sequential):
    """Spatial 1x3x3 conv followed by temporal 3x1x1 conv, each with norm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, spatial_stride: int = 1, temporal_stride: int = 1, norm: str = "batch"):
        mid = max(in_ch, out_ch)
        bias = norm == "none"
        super().__init__(
            nn.Conv3d(in_ch, mid, (1, 3, 3), (1, spatial_stride, spatial_stride), (0, 1, 1), bias=bias),
            _norm(norm, mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(mid, out_ch, (3, 1, 1), (temporal_stride, 1, 1), (1, 0, 0), bias=bias),
            _norm(norm, out_ch),
            nn.ReLU(inplace=True),
        )


class VideoEncoder(nn.Module):
    """Shared backbone for RGB clips, static frames and frame differences.

    ``forward`` returns the final feature map ``[B, C', T', H', W']`` (taken after the
    last ReLU) and the projected embedding ``[B, D]``.
    """

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        cfg.validate()
        stages = []
        in_ch = cfg.in_channels
        for w, ss, ts in zip(cfg.channel_widths, cfg.spatial_strides, cfg.temporal_strides):
            stages.append(Conv2Plus1D(in_ch, w, ss, ts, cfg.norm))
            in_ch = w
        self.backbone = nn.Sequential(*stages)
        self.feature_dim = in_ch
        self.head = nn.Sequential(
            nn.Linear(in_ch, cfg.projection_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.projection_hidden, cfg.embed_dim),
        )

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B, {self.cfg.in_channels}, T, H, W], got {tuple(x.shape)}")
        fmap = self.backbone(x)
        if min(fmap.shape[2:]) < 1:
            raise ShapeError(f"input {tuple(x.shape)} too small for the configured strides")
        return fmap

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fmap = self.feature_map(x)
        return fmap, self.head(fmap.mean(dim=(2, 3, 4)))

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.head(pooled)

    @torch.no_grad()
    def pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-projection global-average-pooled features, used by probes."""
        return self.feature_map(x).mean(dim=(2, 3, 4))


def activation_map(fmap: torch.Tensor) -> torch.Tensor:
    """Channel-sum of absolute feature values: [..., C, T, H, W] -> [..., T, H, W]."""
    if fmap.ndim < 4:
        raise ShapeError(f"feature map needs [C, T, H, W] trailing axes, got {tuple(fmap.shape)}")
    return fmap.abs().sum(dim=-4)


def minmax_normalize(amap: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Min-max normalize over the trailing (T, H, W) axes; constant maps become zeros."""
    flat = amap.flatten(start_dim=-3)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    degenerate = span <= eps
    out = (flat - lo) / torch.where(degenerate, torch.ones_like(span), span)
    out = torch.where(degenerate, torch.zeros_like(out), out)
    return out.view_as(amap)


def weighted_pool(fmap: torch.Tensor, amap: torch.Tensor) -> torch.Tensor:
    """Per-channel average of ``fmap`` [..., C, T, H, W] weighted by ``amap`` [..., T, H, W].

    Maps summing to zero fall back to the unweighted mean.
    """
    if fmap.shape[-3:] != amap.shape[-3:] or fmap.shape[:-4] != amap.shape[:-3]:
        raise ShapeError(f"feature map {tuple(fmap.shape)} and activation map {tuple(amap.shape)} disagree")
    w = amap.unsqueeze(-4)
    total = w.sum(dim=(-3, -2, -1))
    empty = total <= 0
    if bool(empty.any()):
        log.warning("activation map sums to zero for %d sample(s); using the unweighted mean", int(empty.sum()))
        w = torch.where(empty[..., None, None, None], torch.ones_like(w), w)
        total = w.sum(dim=(-3, -2, -1))
    return (fmap * w).sum(dim=(-3, -2, -1)) / total
