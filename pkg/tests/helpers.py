"""Loss closures for gradient checks on the tiny double-precision model."""
import numpy as np
import torch

from ckdtrack.backbone import forward_ckd
from ckdtrack.distill import content_distill_loss, feature_distill_loss, style_distill_loss
from ckdtrack.head import task_loss


def student_params(model):
    return [p for n in ("student_rgb", "student_tir") for p in model.branches[n].parameters()]


def feats(model, batch, masks=None):
    return {k: o.features for k, o in forward_ckd(batch, model, "train", masks).items()}


def sd_closure(model, batch):
    def f():
        x = feats(model, batch)
        return style_distill_loss(x["student_rgb"], x["student_tir"])
    return f


def cd_closure(model, batch, masks=None):
    def f():
        x = feats(model, batch, masks)
        return (content_distill_loss(x["teacher_rgb"], x["student_rgb"])
                + content_distill_loss(x["teacher_tir"], x["student_tir"]))
    return f


def fd_closure(model, batch):
    def f():
        x = feats(model, batch)
        return feature_distill_loss(x["student_rgb"], x["student_tir"])
    return f


def task_closure(model, batch):
    def f():
        outs = forward_ckd(batch, model, "train")
        mc = model.cfg
        return task_loss(model.fused_head(outs), batch["gt"], mc.patch, mc.search_size)
    return f


def tiny_masks(batch, n_search, ratio=0.25, seed=0):
    from ckdtrack.train import draw_masks
    return draw_masks(batch["gt"].shape[0], n_search, ratio, np.random.default_rng(seed))


def perturb(model, scale=0.3, seed=0):
    """Move away from the small-init regime so gradients are generic."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


# ------------------------------------------------------------ acceptance log

ACCEPTANCE: dict = {}


class criterion:
    """Record the outcome of one acceptance criterion; re-raises failures."""

    def __init__(self, key: str, title: str):
        self.key, self.title = key, title
        self.details: list = []

    def note(self, text: str):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else exc_type.__name__
            detail = f"{detail}; {first}" if detail else first
        line = f"{self.key} {status} {self.title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE[self.key] = line
        print(line)
        return False


# --------------------------------------------------------- desk-scale runs

_DESK: dict = {}
DESK_STEPS = 2000


def desk_benchmark():
    from ckdtrack.data import synthetic_benchmark
    if "data" not in _DESK:
        _DESK["data"] = synthetic_benchmark(n_train=20, n_test=5, length=50, canvas=128, seed=0)
    return _DESK["data"]


def desk_run(variant: str, seed: int, steps: int = DESK_STEPS) -> dict:
    """Train one variant with the default run configuration and measure it (cached per session)."""
    import time

    from ckdtrack.config import RunConfig
    from ckdtrack.data import SampleSource
    from ckdtrack.evaluate import CKDTracker, evaluate, gap_report
    from ckdtrack.train import Trainer

    key = (variant, seed, steps)
    if key in _DESK:
        return _DESK[key]
    train, test = desk_benchmark()
    cfg = RunConfig({"train.variant": variant, "seed": seed, "train.steps": steps})
    held_out = SampleSource(test, cfg.crop()).batch(np.random.default_rng(123), 32)
    t0 = time.perf_counter()
    trainer = Trainer(SampleSource(train, cfg.crop()), cfg.train(), cfg.model())
    gap_start = gap_report(trainer.model, held_out)
    trainer.run()
    gap_end = gap_report(trainer.model, held_out)
    train_seconds = time.perf_counter() - t0
    model, crop = trainer.model, cfg.crop()
    elim = cfg.elim()
    result = {
        "model": model,
        "history": trainer.history,
        "gap_start": gap_start,
        "gap_end": gap_end,
        "seconds": train_seconds,
        "metrics": evaluate(lambda: CKDTracker(model, crop, elim), test).aggregate,
        "metrics_no_elim": evaluate(lambda: CKDTracker(model, crop, None), test).aggregate,
    }
    _DESK[key] = result
    return result
