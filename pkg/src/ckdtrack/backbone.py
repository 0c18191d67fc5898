"""One-stream transformer branches and the four-branch forward pass.

Each branch embeds a search crop and a template crop into tokens, concatenates
them (search first) and runs pre-norm transformer blocks, recording the output
of every block.  Students may have search tokens replaced by a learnable mask
embedding; at inference they may drop low-scoring search tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .elimination import EliminationConfig, candidate_scores, filter_and_record, modality_scores, top_k_keep
from .errors import ConfigError, ContractError, NumericError

BRANCHES = ("teacher_rgb", "teacher_tir", "student_rgb", "student_tir")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 8
    mlp_ratio: float = 2.0
    template_size: int = 32
    search_size: int = 64
    head_dim: int = 64
    # instance-normalise student outputs before the fused head (content-only ablation)
    student_in: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for side in (self.template_size, self.search_size):
            if side % self.patch:
                raise ConfigError(f"crop side {side} not divisible by patch {self.patch}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.search_size // self.patch

    @property
    def n_search(self) -> int:
        return self.grid ** 2

    @property
    def n_template(self) -> int:
        return (self.template_size // self.patch) ** 2


@dataclass
class TokenSeq:
    """Tokens ``(B, N, D)`` with the first ``n_search`` rows from the search crop."""
    tokens: torch.Tensor
    n_search: int
    n_template: int

    def __post_init__(self):
        if self.tokens.shape[1] != self.n_search + self.n_template:
            raise ContractError(
                f"token count {self.tokens.shape[1]} != {self.n_search} + {self.n_template}")

    @property
    def search(self) -> torch.Tensor:
        return self.tokens[:, :self.n_search]

    @property
    def template(self) -> torch.Tensor:
        return self.tokens[:, self.n_search:]


def patchify(image: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, (H/p)*(W/p), p*p*C)`` in row-major patch order."""
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    x = image.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def to_three_channels(image: torch.Tensor) -> torch.Tensor:
    return image.expand(-1, 3, -1, -1) if image.shape[1] == 1 else image


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


def block_forward(seq: TokenSeq, block: Block) -> tuple[TokenSeq, torch.Tensor]:
    """Run one block; returns the new tokens and attention weights ``(B, H, N, N)``."""
    out, attn = block(seq.tokens)
    if not torch.isfinite(out).all():
        raise NumericError("non-finite block output")
    return TokenSeq(out, seq.n_search, seq.n_template), attn


class Branch(nn.Module):
    """Patch embedding, position embeddings, transformer blocks and a mask token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_proj = nn.Linear(cfg.patch * cfg.patch * 3, d)
        self.pos_search = nn.Parameter(torch.zeros(cfg.n_search, d))
        self.pos_template = nn.Parameter(torch.zeros(cfg.n_template, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)

    def pos_embed(self, region: str) -> torch.Tensor:
        if region == "search":
            return self.pos_search
        if region == "template":
            return self.pos_template
        raise ValueError(f"unknown region {region!r}")


def patch_embed(image: torch.Tensor, branch: Branch, region: str = "search") -> torch.Tensor:
    """Linear patch projection plus learnable position embeddings -> ``(B, N, D)``."""
    patches = patchify(to_three_channels(image), branch.cfg.patch)
    pos = branch.pos_embed(region)
    if patches.shape[1] != pos.shape[0]:
        raise ConfigError(f"{region} image gives {patches.shape[1]} patches, "
                          f"model expects {pos.shape[0]}")
    return branch.patch_proj(patches) + pos


def embed(search: torch.Tensor, template: torch.Tensor, branch: Branch) -> TokenSeq:
    s = patch_embed(search, branch, "search")
    t = patch_embed(template, branch, "template")
    return TokenSeq(torch.cat([s, t], dim=1), s.shape[1], t.shape[1])


def sample_mask(n_search: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 vector with exactly ``floor(ratio * n_search)`` ones at uniformly random places."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    k = math.floor(ratio * n_search + 1e-9)
    bits = np.zeros(n_search, dtype=np.int8)
    if k:
        bits[rng.choice(n_search, size=k, replace=False)] = 1
    return bits


def apply_mask(seq: TokenSeq, mask, branch: Branch) -> TokenSeq:
    """Replace masked search tokens by ``mask_token + position embedding``."""
    mask = torch.as_tensor(mask, device=seq.tokens.device)
    if mask.dim() == 1:
        mask = mask.unsqueeze(0).expand(seq.tokens.shape[0], -1)
    if mask.shape != (seq.tokens.shape[0], seq.n_search):
        raise ContractError(f"mask shape {tuple(mask.shape)} does not match "
                            f"{seq.tokens.shape[0]} x {seq.n_search} search tokens")
    m = mask.to(seq.tokens.dtype).unsqueeze(-1)
    fill = (branch.mask_token + branch.pos_search).unsqueeze(0)
    search = seq.search * (1 - m) + fill * m
    return TokenSeq(torch.cat([search, seq.template], dim=1), seq.n_search, seq.n_template)


@dataclass
class BranchOutput:
    features: list                  # per-block outputs, each (B, N_l, D)
    kept: torch.Tensor              # (B, k) indices into the original search grid
    final: TokenSeq                 # normed last-layer tokens
    attentions: list = field(default_factory=list)
    patches: Optional[torch.Tensor] = None   # pre-projection search patches


def _identity_index(b, n, device):
    return torch.arange(n, device=device).unsqueeze(0).expand(b, n)


def _check_elim(elim: Optional[EliminationConfig], depth: int):
    if elim is None or elim.mode == "none":
        return None
    bad = [l for l in elim.layers if not 1 <= l <= depth]
    if bad:
        raise ConfigError(f"elimination layers {bad} outside [1, {depth}]")
    return elim


def forward_branch(seq: TokenSeq, branch: Branch,
                   elim: Optional[EliminationConfig] = None) -> BranchOutput:
    """Run all blocks of one branch, optionally with single-modality elimination."""
    return forward_pair([seq], [branch], elim)[0]


def forward_pair(seqs: list, branches: list,
                 elim: Optional[EliminationConfig] = None) -> list:
    """Run one or two branches block by block so elimination can see both attentions.

    With ``elim.mode == "mce"`` and two branches, both drop the same tokens,
    chosen from the elementwise max of their score distributions.  With
    ``"ce"`` each branch decides from its own attention; ``"ce_rgb_only"``
    applies the first branch's decision to both.
    """
    elim = _check_elim(elim, branches[0].cfg.depth)
    b = seqs[0].tokens.shape[0]
    device = seqs[0].tokens.device
    kept = [_identity_index(b, s.n_search, device) for s in seqs]
    feats = [[] for _ in seqs]
    attns = [[] for _ in seqs]
    cur = list(seqs)
    for layer in range(branches[0].cfg.depth):
        for i, br in enumerate(branches):
            cur[i], a = block_forward(cur[i], br.blocks[layer])
            feats[i].append(cur[i].tokens)
            attns[i].append(a)
        if elim is not None and (layer + 1) in elim.layers:
            keep_local = _elimination_indices(cur, [a[-1] for a in attns], elim)
            for i in range(len(cur)):
                cur[i], kept[i] = filter_and_record(cur[i], keep_local[i], kept[i])
    outs = []
    for i, br in enumerate(branches):
        final = TokenSeq(br.norm(cur[i].tokens), cur[i].n_search, cur[i].n_template)
        outs.append(BranchOutput(feats[i], kept[i], final, attns[i]))
    return outs


def _elimination_indices(cur, attns, elim):
    n_s = [s.n_search for s in cur]
    if elim.mode == "mce" and len(cur) == 2:
        h = candidate_scores(attns[0], attns[1], n_s[0], n_s[1])
        idx = top_k_keep(h, elim.keep_ratio)
        return [idx, idx]
    if elim.mode == "ce_rgb_only" or (elim.mode == "mce" and len(cur) == 1):
        idx = top_k_keep(modality_scores(attns[0], n_s[0]), elim.keep_ratio)
        return [idx] * len(cur)
    if elim.mode == "ce":
        return [top_k_keep(modality_scores(a, n), elim.keep_ratio) for a, n in zip(attns, n_s)]
    raise ConfigError(f"unknown elimination mode {elim.mode!r}")


def forward_ckd(batch: dict, model, mode: str = "train", masks: Optional[dict] = None,
                elim: Optional[EliminationConfig] = None) -> dict:
    """Four-branch (train) or two-student (infer) forward pass.

    ``batch`` holds ``(B, C, H, W)`` tensors under ``template_rgb``,
    ``template_tir``, ``search_rgb`` and ``search_tir``.  ``masks`` maps
    ``"student_rgb"``/``"student_tir"`` to ``(B, N_search)`` 0/1 tensors.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" and masks:
        raise ContractError("masks are only applied in train mode")
    names = BRANCHES if mode == "train" else BRANCHES[2:]
    seqs, patches = {}, {}
    for name in names:
        mod = name.split("_")[1]
        search, template = batch[f"search_{mod}"], batch[f"template_{mod}"]
        br = model.branches[name]
        seq = embed(search, template, br)
        if masks and masks.get(name) is not None:
            seq = apply_mask(seq, masks[name], br)
        seqs[name] = seq
        patches[name] = patchify(to_three_channels(search), br.cfg.patch)
    out = {}
    if mode == "train":
        for name in names:
            out[name] = forward_branch(seqs[name], model.branches[name])
    else:
        pair = forward_pair([seqs[n] for n in names], [model.branches[n] for n in names], elim)
        out = dict(zip(names, pair))
    for name in names:
        out[name].patches = patches[name]
    return out
