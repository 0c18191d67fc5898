"""Inference-time candidate elimination of search tokens.

Scores come from template-query to search-key attention.  The multi-modal
variant takes the elementwise max of the RGB and TIR score distributions so
a token survives if either modality finds it relevant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ContractError

MODES = ("none", "ce", "ce_rgb_only", "mce")


@dataclass(frozen=True)
class EliminationConfig:
    layers: tuple = (2,)
    keep_ratio: float = 0.7
    mode: str = "mce"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"elim.mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"elim.keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))


def modality_scores(attn: torch.Tensor, n_search: int) -> torch.Tensor:
    """Template->search attention averaged over heads and template queries.

    ``attn`` is ``(B, H, N, N)`` with queries on dim 2.  Returns ``(B, n_search)``
    renormalised to sum to one over the search tokens.
    """
    if attn.dim() != 4 or attn.shape[-1] != attn.shape[-2] or attn.shape[-1] <= n_search:
        raise ContractError(f"attention of shape {tuple(attn.shape)} incompatible with "
                            f"{n_search} search tokens")
    s = attn[:, :, n_search:, :n_search].mean(dim=(1, 2))
    return s / s.sum(dim=-1, keepdim=True)


def candidate_scores(attn_rgb: torch.Tensor, attn_tir: torch.Tensor,
                     n_search: int, n_search_tir: int | None = None) -> torch.Tensor:
    """Per-token score ``h = max(score_rgb, score_tir)``."""
    if n_search_tir is not None and n_search_tir != n_search:
        raise ContractError("modalities disagree on the number of search tokens")
    if attn_rgb.shape != attn_tir.shape:
        raise ContractError(f"attention shapes differ: {tuple(attn_rgb.shape)} "
                            f"vs {tuple(attn_tir.shape)}")
    return torch.maximum(modality_scores(attn_rgb, n_search), modality_scores(attn_tir, n_search))


def keep_count(n: int, keep_ratio: float) -> int:
    # the epsilon stops e.g. 0.3 * 10 = 3.0000000000000004 from rounding up to 4
    return max(1, min(n, math.ceil(keep_ratio * n - 1e-9)))


def top_k_keep(h: torch.Tensor, keep_ratio: float) -> torch.Tensor:
    """Indices of the ``ceil(keep_ratio * N)`` largest scores, ascending.

    Ties go to the smaller index.  Works on ``(N,)`` or ``(B, N)`` scores.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    k = keep_count(h.shape[-1], keep_ratio)
    order = torch.sort(-h, dim=-1, stable=True).indices
    return torch.sort(order[..., :k], dim=-1).values


def filter_and_record(seq, kept_local: torch.Tensor, global_index: torch.Tensor):
    """Keep the selected search tokens and compose the map back to the original grid.

    ``kept_local`` indexes the current search tokens; ``global_index`` maps
    current search positions to original ones.  Template tokens are untouched.
    """
    from .backbone import TokenSeq

    if kept_local.dim() == 1:
        kept_local = kept_local.unsqueeze(0).expand(seq.tokens.shape[0], -1)
    if kept_local.numel() and (kept_local.min() < 0 or kept_local.max() >= seq.n_search):
        raise ContractError(f"kept index out of range for {seq.n_search} search tokens")
    d = seq.tokens.shape[-1]
    search = torch.gather(seq.search, 1, kept_local.unsqueeze(-1).expand(-1, -1, d))
    tokens = torch.cat([search, seq.template], dim=1)
    return (TokenSeq(tokens, kept_local.shape[1], seq.n_template),
            torch.gather(global_index, 1, kept_local))


def scatter_back(search_tokens: torch.Tensor, global_index: torch.Tensor,
                 n_search: int) -> torch.Tensor:
    """Place kept rows at their original grid positions; dropped positions are zero."""
    b, k, d = search_tokens.shape
    if global_index.shape != (b, k):
        raise ContractError("index shape does not match tokens")
    if k > 1 and (global_index[:, 1:] <= global_index[:, :-1]).any():
        raise ContractError("kept indices must be unique and ascending")
    if k and (global_index.min() < 0 or global_index.max() >= n_search):
        raise ContractError("kept index outside the search grid")
    out = search_tokens.new_zeros(b, n_search, d)
    return out.scatter(1, global_index.unsqueeze(-1).expand(-1, -1, d), search_tokens)
