"""Style/content decoupling and the distillation losses.

"Style" is the per-channel mean and standard deviation over tokens; "content"
is what is left after instance-normalising those statistics away.  Layer
features are sequences of ``(B, N, D)`` (or ``(N, D)``) tensors, one per block.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ContractError


@dataclass(frozen=True)
class DistillConfig:
    lambda_sd: float = 2.0
    lambda_cd: float = 1.0
    epsilon: float = 1e-5


@dataclass
class StyleStats:
    mu: torch.Tensor      # (L, B, D)
    sigma: torch.Tensor   # (L, B, D)

    @property
    def layers(self) -> int:
        return self.mu.shape[0]


def _batched(f: torch.Tensor) -> torch.Tensor:
    return f.unsqueeze(0) if f.dim() == 2 else f


def _check_pair(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor], same_tokens: bool):
    if len(a) != len(b) or not len(a):
        raise ContractError(f"layer counts differ or are empty: {len(a)} vs {len(b)}")
    for l, (x, y) in enumerate(zip(a, b)):
        x, y = _batched(x), _batched(y)
        ok = x.shape == y.shape if same_tokens else (x.shape[0], x.shape[-1]) == (y.shape[0], y.shape[-1])
        if not ok:
            raise ContractError(f"layer {l}: shapes {tuple(x.shape)} and {tuple(y.shape)} differ")


def style_stats(features: Sequence[torch.Tensor]) -> StyleStats:
    """Token-wise mean and population std per layer and channel (no epsilon)."""
    mus, sigmas = [], []
    for f in features:
        f = _batched(f)
        mu = f.mean(dim=1)
        mus.append(mu)
        sigmas.append(((f - mu.unsqueeze(1)) ** 2).mean(dim=1).sqrt())
    return StyleStats(torch.stack(mus), torch.stack(sigmas))


def style_distance(a: StyleStats, b: StyleStats) -> torch.Tensor:
    """Per-layer ``mean_d (dmu)^2 + mean_d (dsigma)^2``, averaged over the batch -> ``(L,)``."""
    return (((a.mu - b.mu) ** 2).mean(dim=-1) + ((a.sigma - b.sigma) ** 2).mean(dim=-1)).mean(dim=-1)


def style_distill_loss(rgb: Sequence[torch.Tensor], tir: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mutual style loss between the two students; gradients reach both."""
    _check_pair(rgb, tir, same_tokens=False)
    return style_distance(style_stats(rgb), style_stats(tir)).mean()


def instance_normalize(features: Sequence[torch.Tensor], epsilon: float = 1e-5) -> list:
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    out = []
    for f in features:
        mu = f.mean(dim=-2, keepdim=True)
        var = ((f - mu) ** 2).mean(dim=-2, keepdim=True)
        out.append((f - mu) / torch.sqrt(var + epsilon))
    return out


def content_distill_loss(teacher: Sequence[torch.Tensor], student: Sequence[torch.Tensor],
                         epsilon: float = 1e-5) -> torch.Tensor:
    """MSE between instance-normalised teacher and student features, averaged over layers.

    Teacher features are detached.
    """
    _check_pair(teacher, student, same_tokens=True)
    t_hat = instance_normalize([t.detach() for t in teacher], epsilon)
    s_hat = instance_normalize(student, epsilon)
    return torch.stack([((t - s) ** 2).mean() for t, s in zip(t_hat, s_hat)]).mean()


def feature_distill_loss(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> torch.Tensor:
    """Plain per-layer MSE on raw features (the non-decoupled ablation)."""
    _check_pair(a, b, same_tokens=True)
    return torch.stack([((x - y) ** 2).mean() for x, y in zip(a, b)]).mean()


# ---------------------------------------------------------------- gap report


@dataclass
class GapReport:
    """Per-layer modality-gap numbers between the two student branches.

    ``pre_in``/``post_in`` are the channel-averaged squared differences of the
    token means before and after instance normalisation.
    """
    mu_rgb: torch.Tensor      # (L, D), averaged over samples
    sigma_rgb: torch.Tensor
    mu_tir: torch.Tensor
    sigma_tir: torch.Tensor
    style_distance: torch.Tensor   # (L,)
    pre_in: torch.Tensor           # (L,)
    post_in: torch.Tensor          # (L,)

    @property
    def mean_style_distance(self) -> float:
        return float(self.style_distance.mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "channel", "mu_rgb", "sigma_rgb", "mu_tir", "sigma_tir"])
        n_layers, n_ch = self.mu_rgb.shape
        for l in range(n_layers):
            for d in range(n_ch):
                w.writerow([l + 1, d] + [repr(float(t[l, d])) for t in
                                         (self.mu_rgb, self.sigma_rgb, self.mu_tir, self.sigma_tir)])
        w.writerow(["summary", "style_distance", repr(self.mean_style_distance), "", "", ""])
        return buf.getvalue()

    def layer_rows(self) -> list[dict]:
        return [dict(layer=l + 1, style_distance=float(self.style_distance[l]),
                     pre_in=float(self.pre_in[l]), post_in=float(self.post_in[l]))
                for l in range(len(self.style_distance))]


def gap_between(rgb: Sequence[torch.Tensor], tir: Sequence[torch.Tensor],
                epsilon: float = 1e-5) -> GapReport:
    _check_pair(rgb, tir, same_tokens=False)
    with torch.no_grad():
        rgb = [_batched(f) for f in rgb]
        tir = [_batched(f) for f in tir]
        sr, st = style_stats(rgb), style_stats(tir)
        pre = ((sr.mu - st.mu) ** 2).mean(dim=-1).mean(dim=-1)
        nr, nt = style_stats(instance_normalize(rgb, epsilon)), style_stats(instance_normalize(tir, epsilon))
        post = ((nr.mu - nt.mu) ** 2).mean(dim=-1).mean(dim=-1)
        return GapReport(sr.mu.mean(1), sr.sigma.mean(1), st.mu.mean(1), st.sigma.mean(1),
                         style_distance(sr, st), pre, post)
