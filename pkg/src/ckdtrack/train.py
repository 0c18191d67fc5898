"""Four-branch model, joint optimisation, checkpoints and gradient checking."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import BRANCHES, Branch, ModelConfig, forward_ckd, sample_mask
from .data import FrameSample, SampleSource
from .distill import DistillConfig, content_distill_loss, feature_distill_loss, instance_normalize, style_distill_loss
from .elimination import EliminationConfig, scatter_back
from .errors import CheckpointError, ConfigError, NumericError
from .head import HeadOutput, TrackingHead, fuse_student_features, head_forward, task_loss, tokens_to_map

CHECKPOINT_FORMAT = "ckdtrack-checkpoint"
CHECKPOINT_VERSION = 1
HEADS = ("fused", "teacher_rgb", "teacher_tir")


@dataclass(frozen=True)
class VariantFlags:
    sd: bool = False
    cd: bool = False
    mm: bool = False
    fd: bool = False
    student_in: bool = False


VARIANTS = {
    "baseline": VariantFlags(),
    "sd": VariantFlags(sd=True),
    "sd+cd": VariantFlags(sd=True, cd=True),
    "sd+cd+mm": VariantFlags(sd=True, cd=True, mm=True),
    "ckd": VariantFlags(sd=True, cd=True, mm=True),
    "in": VariantFlags(student_in=True),
    "fd": VariantFlags(fd=True),
}


def variant_flags(name: str) -> VariantFlags:
    try:
        return VARIANTS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    mask_ratio: float = 0.25
    lambda_cd: float = 1.0
    lambda_sd: float = 2.0
    epsilon: float = 1e-5
    lr_backbone: float = 2e-4
    lr_head: float = 2e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    variant: str = "ckd"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.lambda_cd < 0 or self.lambda_sd < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        variant_flags(self.variant)

    @property
    def flags(self) -> VariantFlags:
        return variant_flags(self.variant)

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(self.lambda_sd, self.lambda_cd, self.epsilon)

    @property
    def effective_mask_ratio(self) -> float:
        return self.mask_ratio if self.flags.mm else 0.0


class FourBranchModel(nn.Module):
    """Two teacher and two student branches with three tracking heads."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleDict({name: Branch(cfg) for name in BRANCHES})
        self.heads = nn.ModuleDict({
            "fused": TrackingHead(2 * cfg.dim, cfg.head_dim),
            "teacher_rgb": TrackingHead(cfg.dim, cfg.head_dim),
            "teacher_tir": TrackingHead(cfg.dim, cfg.head_dim),
        })

    def backbone_parameters(self):
        return self.branches.parameters()

    def head_parameters(self):
        return self.heads.parameters()

    def teacher_parameters(self):
        for name in ("teacher_rgb", "teacher_tir"):
            yield from self.branches[name].parameters()

    def fused_head(self, outs: dict) -> HeadOutput:
        g, n = self.cfg.grid, self.cfg.n_search
        dense = []
        for name in ("student_rgb", "student_tir"):
            final = outs[name].final
            tokens = final.tokens
            if self.cfg.student_in:
                tokens = instance_normalize([tokens])[0]
            dense.append(scatter_back(tokens[:, :final.n_search], outs[name].kept, n))
        return head_forward(fuse_student_features(dense[0], dense[1], g), self.heads["fused"])

    def teacher_head(self, outs: dict, name: str) -> HeadOutput:
        return head_forward(tokens_to_map(outs[name].final.search, self.cfg.grid), self.heads[name])

    def track(self, batch: dict, elim: Optional[EliminationConfig] = None) -> HeadOutput:
        """Inference path: the two students and the fused head."""
        outs = forward_ckd(batch, self, "infer", elim=elim)
        return self.fused_head(outs)


def init_weights(model: nn.Module, std: float = 0.02):
    """Truncated-normal projections and position embeddings; zero biases and mask tokens."""
    for name, p in model.named_parameters():
        if name.endswith("mask_token") or name.endswith("bias"):
            nn.init.zeros_(p)
        elif "pos_" in name:
            nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0,
                dtype: torch.dtype = torch.float32) -> FourBranchModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = FourBranchModel(cfg)
        init_weights(model)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def collate(samples: Sequence[FrameSample], dtype: torch.dtype = torch.float32) -> dict:
    """Stack samples into ``(B, C, H, W)`` image tensors plus ``gt`` boxes ``(B, 4)``."""
    def stack(attr):
        arr = np.stack([getattr(s, attr) for s in samples]).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)

    batch = {k: stack(k) for k in ("template_rgb", "template_tir", "search_rgb", "search_tir")}
    batch["gt"] = torch.tensor([s.gt_in_search.as_tuple() for s in samples], dtype=dtype)
    return batch


@dataclass
class LossBreakdown:
    step: int
    task: float
    cd: float
    sd: float
    total: float

    def row(self) -> list:
        return [self.step, repr(self.task), repr(self.cd), repr(self.sd), repr(self.total)]


def total_loss(task, cd, sd, cfg: DistillConfig = DistillConfig()):
    """``task + lambda_cd * cd + lambda_sd * sd``."""
    for name, v in (("task", task), ("cd", cd), ("sd", sd)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise NumericError(f"non-finite {name} loss: {value}")
    return task + cfg.lambda_cd * cd + cfg.lambda_sd * sd


def draw_masks(batch_size: int, n_search: int, ratio: float, rng: np.random.Generator) -> dict:
    """Independent masks per student and per sample."""
    return {name: torch.from_numpy(np.stack([sample_mask(n_search, ratio, rng) for _ in range(batch_size)]))
            for name in ("student_rgb", "student_tir")}


@dataclass
class LossTerms:
    task: torch.Tensor
    cd: torch.Tensor
    sd: torch.Tensor
    total: torch.Tensor


def compute_losses(model: FourBranchModel, batch: dict, cfg: TrainConfig,
                   masks: Optional[dict] = None) -> LossTerms:
    """Forward all four branches and assemble the combined objective."""
    flags = cfg.flags
    mc = model.cfg
    outs = forward_ckd(batch, model, "train", masks)
    gt = batch["gt"]
    task = task_loss(model.fused_head(outs), gt, mc.patch, mc.search_size)
    for name in ("teacher_rgb", "teacher_tir"):
        task = task + task_loss(model.teacher_head(outs, name), gt, mc.patch, mc.search_size)
    zero = task.new_zeros(())
    cd = sd = zero
    feats = {name: o.features for name, o in outs.items()}
    if flags.cd:
        cd = (content_distill_loss(feats["teacher_rgb"], feats["student_rgb"], cfg.epsilon)
              + content_distill_loss(feats["teacher_tir"], feats["student_tir"], cfg.epsilon))
    if flags.sd:
        sd = style_distill_loss(feats["student_rgb"], feats["student_tir"])
    elif flags.fd:
        sd = feature_distill_loss(feats["student_rgb"], feats["student_tir"])
    return LossTerms(task, cd, sd, total_loss(task, cd, sd, cfg.distill))


def make_optimizer(model: FourBranchModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW([
        {"params": list(model.backbone_parameters()), "lr": cfg.lr_backbone},
        {"params": list(model.head_parameters()), "lr": cfg.lr_head},
    ], betas=(0.9, 0.999), weight_decay=cfg.weight_decay)


def train_step(model: FourBranchModel, optimizer: torch.optim.Optimizer, batch: dict,
               cfg: TrainConfig, rng: np.random.Generator, step: int = 0) -> LossBreakdown:
    """One optimiser update on a collated batch; masks are drawn from ``rng``."""
    b = batch["gt"].shape[0]
    if b == 0:
        raise ConfigError("empty batch")
    ratio = cfg.effective_mask_ratio
    masks = draw_masks(b, model.cfg.n_search, ratio, rng) if ratio > 0 else None
    model.train()
    terms = compute_losses(model, batch, cfg, masks)
    optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossBreakdown(step, terms.task.item(), terms.cd.item(), terms.sd.item(), terms.total.item())


class Trainer:
    """Seeded training loop over a :class:`SampleSource`.

    The data stream and the mask stream use separate generators derived from
    ``cfg.seed`` so toggling masking does not change which samples are seen.
    """

    def __init__(self, source: SampleSource, cfg: TrainConfig = TrainConfig(),
                 model_cfg: ModelConfig = ModelConfig(), model: Optional[FourBranchModel] = None):
        self.cfg = cfg
        self.source = source
        if model is None:
            model_cfg = replace(model_cfg, student_in=cfg.flags.student_in)
            model = build_model(model_cfg, seed=cfg.seed)
        self.model = model
        self.optimizer = make_optimizer(model, cfg)
        self.data_rng = np.random.default_rng([cfg.seed, 1])
        self.mask_rng = np.random.default_rng([cfg.seed, 2])
        self.step_count = 0
        self.history: list[LossBreakdown] = []

    def next_batch(self) -> dict:
        return collate(self.source.batch(self.data_rng, self.cfg.batch_size))

    def step(self) -> LossBreakdown:
        rec = train_step(self.model, self.optimizer, self.next_batch(), self.cfg,
                         self.mask_rng, self.step_count)
        self.step_count += 1
        self.history.append(rec)
        return rec

    def run(self, steps: Optional[int] = None, log_path=None,
            callback: Optional[Callable[[LossBreakdown], None]] = None) -> list[LossBreakdown]:
        steps = self.cfg.steps if steps is None else steps
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "task", "cd", "sd", "total"])
        try:
            for _ in range(steps):
                rec = self.step()
                if writer:
                    writer.writerow(rec.row())
                if callback:
                    callback(rec)
        finally:
            if fh:
                fh.close()
        return self.history


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: FourBranchModel, path) -> Path:
    """Write every named parameter plus a JSON header to an ``.npz`` archive.

    Keys are the ``state_dict`` names; ``__meta__`` holds the format tag,
    version, model config and the shape/dtype of each array.
    """
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "params": {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in arrays.items()},
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> FourBranchModel:
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
        meta = json.loads(str(archive["__meta__"]))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {meta.get('version')} != {CHECKPOINT_VERSION}")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in meta["model_config"].items() if k in known})
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match expected {expected}")
    model = FourBranchModel(cfg)
    state = {}
    for name, info in meta["params"].items():
        try:
            arr = archive[name]
        except KeyError:
            raise CheckpointError(f"{path}: missing array {name}") from None
        if list(arr.shape) != info["shape"] or str(arr.dtype) != info["dtype"]:
            raise CheckpointError(f"{path}: array {name} does not match its header")
        state[name] = torch.from_numpy(arr.copy())
    dtypes = {a.dtype for a in state.values()}
    if len(dtypes) == 1:
        model = model.to(next(iter(state.values())).dtype)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model


# ------------------------------------------------------------ gradient check


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
               eps: float = 1e-5, n_coords: int = 200, seed: int = 0,
               floor: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` recomputes the scalar loss from the current ``params``.
    Coordinates are drawn uniformly without replacement across all params;
    the relative error denominator is ``max(|analytic|, |numeric|, floor)``.
    """
    params = list(params)
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            i = int(flat - offsets[pi])
            view = params[pi].data.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            plus = float(loss_fn())
            view[i] = orig - eps
            minus = float(loss_fn())
            view[i] = orig
            num = (plus - minus) / (2 * eps)
            ana = float(analytic[pi].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
