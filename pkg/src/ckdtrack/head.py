"""Centre-map tracking head, box decoding and the tracking task loss.

The head predicts, on the ``G x G`` search grid, a target-centre score, the
sub-cell centre offset and the box size as a fraction of the search crop.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BBox, CropTransform
from .errors import ContractError, NumericError

FOCAL_WEIGHT = 1.0
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0


@dataclass
class HeadOutput:
    score_logits: torch.Tensor   # (B, G, G)
    offset_map: torch.Tensor     # (B, 2, G, G), (x, y) in (0, 1)
    size_map: torch.Tensor       # (B, 2, G, G), (w, h) / search size

    @property
    def score_map(self) -> torch.Tensor:
        return torch.sigmoid(self.score_logits)

    @property
    def grid(self) -> int:
        return self.score_logits.shape[-1]


def _branch(cin, mid, cout):
    return nn.Sequential(
        nn.Conv2d(cin, mid, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(mid, mid, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(mid, cout, 1))


class TrackingHead(nn.Module):
    def __init__(self, in_channels: int, channels: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Conv2d(in_channels, channels, 1)
        self.score = _branch(channels, channels // 2, 1)
        self.offset = _branch(channels, channels // 2, 2)
        self.size = _branch(channels, channels // 2, 2)

    def forward(self, x: torch.Tensor) -> HeadOutput:
        x = F.relu(self.proj(x))
        return HeadOutput(self.score(x)[:, 0], torch.sigmoid(self.offset(x)),
                          torch.sigmoid(self.size(x)))


def tokens_to_map(tokens: torch.Tensor, grid: int) -> torch.Tensor:
    """``(B, G*G, D)`` row-major tokens -> ``(B, D, G, G)``."""
    b, n, d = tokens.shape
    if n != grid * grid:
        raise ContractError(f"{n} tokens do not form a {grid}x{grid} grid")
    return tokens.transpose(1, 2).reshape(b, d, grid, grid)


def fuse_student_features(rgb: torch.Tensor, tir: torch.Tensor, grid: int) -> torch.Tensor:
    """Channel-concatenate dense student search features, RGB first -> ``(B, 2D, G, G)``."""
    if rgb.shape != tir.shape:
        raise ContractError(f"student grids differ: {tuple(rgb.shape)} vs {tuple(tir.shape)}")
    return torch.cat([tokens_to_map(rgb, grid), tokens_to_map(tir, grid)], dim=1)


def head_forward(features: torch.Tensor, head: TrackingHead) -> HeadOutput:
    out = head(features)
    for name in ("score_logits", "offset_map", "size_map"):
        if not torch.isfinite(getattr(out, name)).all():
            raise NumericError(f"non-finite head output {name}")
    return out


def boxes_at_cells(out: HeadOutput, rows: torch.Tensor, cols: torch.Tensor,
                   patch: int, search_size: int) -> torch.Tensor:
    """Regressed ``(x, y, w, h)`` crop-coordinate boxes read at the given cells."""
    idx = torch.arange(out.offset_map.shape[0])
    off = out.offset_map[idx, :, rows, cols]
    size = out.size_map[idx, :, rows, cols] * search_size
    cx = (cols.to(off.dtype) + off[:, 0]) * patch
    cy = (rows.to(off.dtype) + off[:, 1]) * patch
    return torch.stack([cx - size[:, 0] / 2, cy - size[:, 1] / 2, size[:, 0], size[:, 1]], dim=1)


def decode_boxes(out: HeadOutput, patch: int, search_size: int) -> torch.Tensor:
    """Argmax decoding (first maximum in row-major order) -> ``(B, 4)`` crop boxes."""
    g = out.grid
    flat = out.score_logits.reshape(out.score_logits.shape[0], -1)
    best = torch.argmax(flat, dim=1)
    return boxes_at_cells(out, best // g, best % g, patch, search_size)


def decode_box(out: HeadOutput, crop_transform: CropTransform, patch: int,
               search_size: int) -> BBox:
    """Decode the first sample of ``out`` to a frame-coordinate box."""
    box = decode_boxes(out, patch, search_size)[0].tolist()
    return crop_transform.to_frame(BBox(*box))


def giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalised IoU of ``(..., 4)`` ``(x, y, w, h)`` boxes."""
    ax2, ay2 = a[..., 0] + a[..., 2], a[..., 1] + a[..., 3]
    bx2, by2 = b[..., 0] + b[..., 2], b[..., 1] + b[..., 3]
    iw = (torch.minimum(ax2, bx2) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(ay2, by2) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    hull = ((torch.maximum(ax2, bx2) - torch.minimum(a[..., 0], b[..., 0]))
            * (torch.maximum(ay2, by2) - torch.minimum(a[..., 1], b[..., 1])))
    return inter / union - (hull - union) / hull


def gaussian_target(gt: torch.Tensor, grid: int, patch: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Centre heat map with value 1 at the gt-centre cell.

    Std per axis is a quarter of the box size in cells, at least one cell.
    Returns ``(heatmap (B, G, G), rows, cols)``.
    """
    cx = (gt[:, 0] + gt[:, 2] / 2) / patch
    cy = (gt[:, 1] + gt[:, 3] / 2) / patch
    cols = cx.floor().long().clamp(0, grid - 1)
    rows = cy.floor().long().clamp(0, grid - 1)
    sx = (gt[:, 2] / patch / 4).clamp(min=1.0)
    sy = (gt[:, 3] / patch / 4).clamp(min=1.0)
    ar = torch.arange(grid, dtype=gt.dtype)
    dx = (ar[None, :] - cols[:, None].to(gt.dtype)) / sx[:, None]
    dy = (ar[None, :] - rows[:, None].to(gt.dtype)) / sy[:, None]
    heat = torch.exp(-0.5 * (dy[:, :, None] ** 2 + dx[:, None, :] ** 2))
    return heat, rows, cols


def focal_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """CenterNet-style penalty-reduced focal loss, averaged over positives."""
    pos = (target == 1).to(logits.dtype)
    log_p, log_1mp = F.logsigmoid(logits), F.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    pos_loss = -((1 - p) ** 2) * log_p * pos
    neg_loss = -((1 - target) ** 4) * p ** 2 * log_1mp * (1 - pos)
    return (pos_loss.sum() + neg_loss.sum()) / pos.sum().clamp(min=1)


@dataclass
class TaskLossParts:
    focal: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return FOCAL_WEIGHT * self.focal + L1_WEIGHT * self.l1 + GIOU_WEIGHT * self.giou


def task_loss_parts(out: HeadOutput, gt: torch.Tensor, patch: int, search_size: int) -> TaskLossParts:
    gt = gt.to(out.score_logits.dtype)
    if gt.dim() == 1:
        gt = gt.unsqueeze(0)
    if (gt[:, 2:] <= 0).any():
        raise ContractError("degenerate ground-truth box")
    heat, rows, cols = gaussian_target(gt, out.grid, patch)
    pred = boxes_at_cells(out, rows, cols, patch, search_size)

    def xyxy(b):
        return torch.cat([b[:, :2], b[:, :2] + b[:, 2:]], dim=1) / search_size

    l1 = (xyxy(pred) - xyxy(gt)).abs().mean()
    g = (1 - giou(pred, gt)).mean()
    return TaskLossParts(focal_loss(out.score_logits, heat), l1, g)


def task_loss(out: HeadOutput, gt_in_search: torch.Tensor, patch: int, search_size: int) -> torch.Tensor:
    """``focal + 5 * L1 + 2 * (1 - GIoU)`` with the box read at the gt-centre cell."""
    return task_loss_parts(out, gt_in_search, patch, search_size).total
