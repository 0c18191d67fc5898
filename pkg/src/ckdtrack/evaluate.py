"""One-pass evaluation, PR/NPR/SR metrics and the modality-gap report."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence as Seq

import numpy as np
import torch

from .backbone import embed, forward_branch
from .data import BBox, CropConfig, FramePair, FrameSample, Sequence, make_sample
from .distill import GapReport, gap_between
from .elimination import EliminationConfig
from .errors import ContractError
from .head import decode_box

NPR_THRESHOLDS = np.arange(51) / 100.0      # 0, 0.01, ..., 0.5
SR_THRESHOLDS = np.arange(21) / 20.0        # 0, 0.05, ..., 1.0
DEFAULT_TAU = 20.0
SMALL_OBJECT_TAU = 5.0


# ------------------------------------------------------------------ metrics


def _pair(preds, gts):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if preds.shape != gts.shape:
        raise ContractError(f"{len(preds)} predictions for {len(gts)} ground-truth boxes")
    return preds, gts


def center_errors(preds, gts) -> np.ndarray:
    preds, gts = _pair(preds, gts)
    d = (preds[:, :2] + preds[:, 2:] / 2) - (gts[:, :2] + gts[:, 2:] / 2)
    return np.hypot(d[:, 0], d[:, 1])


def normalized_center_errors(preds, gts) -> np.ndarray:
    preds, gts = _pair(preds, gts)
    if (gts[:, 2:] <= 0).any():
        raise ContractError("ground-truth boxes must have positive width and height")
    d = ((preds[:, :2] + preds[:, 2:] / 2) - (gts[:, :2] + gts[:, 2:] / 2)) / gts[:, 2:]
    return np.hypot(d[:, 0], d[:, 1])


def iou(preds, gts) -> np.ndarray:
    preds, gts = _pair(preds, gts)
    x1 = np.maximum(preds[:, 0], gts[:, 0])
    y1 = np.maximum(preds[:, 1], gts[:, 1])
    x2 = np.minimum(preds[:, 0] + preds[:, 2], gts[:, 0] + gts[:, 2])
    y2 = np.minimum(preds[:, 1] + preds[:, 3], gts[:, 1] + gts[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = preds[:, 2] * preds[:, 3] + gts[:, 2] * gts[:, 3] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def precision_rate(preds, gts, tau: float = DEFAULT_TAU) -> float:
    """Fraction of frames whose centre error is at most ``tau`` pixels."""
    err = center_errors(preds, gts)
    return float(np.mean(err <= tau)) if len(err) else 0.0


def normalized_precision(preds, gts, thresholds=NPR_THRESHOLDS) -> float:
    """Mean over thresholds in [0, 0.5] of the fraction within the size-normalised distance."""
    err = normalized_center_errors(preds, gts)
    if not len(err):
        return 0.0
    return float(np.mean(err[None, :] <= np.asarray(thresholds)[:, None]))


def success_curve(preds, gts, thresholds=SR_THRESHOLDS) -> np.ndarray:
    ov = iou(preds, gts)
    if not len(ov):
        return np.zeros(len(thresholds))
    return np.mean(ov[None, :] > np.asarray(thresholds)[:, None], axis=1)


def success_auc(preds, gts, thresholds=SR_THRESHOLDS) -> float:
    """Area under the success curve: mean over IoU thresholds of ``mean(IoU > t)``."""
    return float(np.mean(success_curve(preds, gts, thresholds)))


# -------------------------------------------------------------------- OPE


class Tracker:
    def initialize(self, frame: FramePair, box: BBox):
        raise NotImplementedError

    def track(self, frame: FramePair) -> BBox:
        raise NotImplementedError


class EchoTracker(Tracker):
    """Returns each frame's own annotation; a harness check, not a tracker."""

    def initialize(self, frame, box):
        pass

    def track(self, frame):
        return frame.gt


class CKDTracker(Tracker):
    """Student branches + fused head, search region centred on the last estimate."""

    def __init__(self, model, crop: CropConfig = CropConfig(),
                 elim: Optional[EliminationConfig] = None):
        self.model = model
        self.crop = crop
        self.elim = elim
        self.dtype = next(model.parameters()).dtype

    def initialize(self, frame, box):
        self.template_frame = frame
        self.template_box = box
        self.box = box

    def predict_sample(self, sample: FrameSample) -> BBox:
        from .train import collate

        mc = self.model.cfg
        self.model.eval()
        with torch.no_grad():
            out = self.model.track(collate([sample], self.dtype), self.elim)
        return decode_box(out, sample.crop_transform, mc.patch, mc.search_size)

    def track(self, frame):
        sample = make_sample(frame, self.template_frame, self.box, self.crop,
                             fallback=self.template_box, template_box=self.template_box)
        width, height = frame.size
        box = self.predict_sample(sample).clip(width, height)
        if box.valid:
            self.box = box
        return self.box


@dataclass
class OpeResult:
    name: str
    boxes: np.ndarray                       # (n, 4)
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))


def run_ope(tracker: Tracker, sequence: Sequence) -> OpeResult:
    """Initialise on frame 1's annotation and track every later frame once."""
    if len(sequence) < 2:
        raise ContractError(f"sequence {sequence.name} has fewer than 2 frames")
    first = sequence.frames[0]
    tracker.initialize(first, first.gt)
    boxes, times = [first.gt.as_array()], [0.0]
    for i, frame in enumerate(sequence.frames[1:], start=1):
        t0 = time.perf_counter()
        try:
            box = tracker.track(frame)
        except Exception as exc:
            msg = f"{sequence.name} frame {i}: {exc}"
            try:
                err = type(exc)(msg)
            except TypeError:
                err = RuntimeError(msg)
            raise err from exc
        times.append(time.perf_counter() - t0)
        boxes.append(box.as_array())
    return OpeResult(sequence.name, np.stack(boxes), np.array(times))


def sequence_metrics(result: OpeResult, sequence: Sequence, tau: float = DEFAULT_TAU) -> dict:
    """PR/NPR/SR with the initialisation frame left out."""
    preds, gts = result.boxes[1:], sequence.boxes[1:]
    return {"pr": precision_rate(preds, gts, tau), "npr": normalized_precision(preds, gts),
            "sr": success_auc(preds, gts)}


@dataclass
class MetricReport:
    per_sequence: dict
    aggregate: dict
    tau: float

    def thresholds(self) -> dict:
        return {"pr_tau": self.tau, "npr": NPR_THRESHOLDS.tolist(), "sr": SR_THRESHOLDS.tolist()}

    def to_json(self) -> str:
        return json.dumps({"thresholds": self.thresholds(), "sequences": self.per_sequence,
                           "aggregate": self.aggregate}, indent=2, sort_keys=True)


def evaluate(make_tracker: Callable[[], Tracker], sequences: Seq[Sequence],
             tau: float = DEFAULT_TAU) -> MetricReport:
    """Run OPE on every sequence; the aggregate is the mean over sequences."""
    per_seq = {}
    for seq in sequences:
        per_seq[seq.name] = sequence_metrics(run_ope(make_tracker(), seq), seq, tau)
    keys = ("pr", "npr", "sr")
    agg = {k: float(np.mean([m[k] for m in per_seq.values()])) if per_seq else 0.0 for k in keys}
    return MetricReport(per_seq, agg, tau)


# ------------------------------------------------------------------- gap


def student_features(model, batch: dict) -> tuple[list, list]:
    feats = []
    model.eval()
    with torch.no_grad():
        for mod in ("rgb", "tir"):
            br = model.branches[f"student_{mod}"]
            seq = embed(batch[f"search_{mod}"], batch[f"template_{mod}"], br)
            feats.append(forward_branch(seq, br).features)
    return feats[0], feats[1]


def gap_report(model, samples, epsilon: float = 1e-5) -> GapReport:
    """Style statistics of the two students on held-out samples.

    ``samples`` is a list of :class:`FrameSample` or an already collated batch.
    """
    from .train import collate

    if not isinstance(samples, dict):
        if not samples:
            raise ContractError("gap report needs at least one sample")
        samples = collate(samples, next(model.parameters()).dtype)
    rgb, tir = student_features(model, samples)
    return gap_between(rgb, tir, epsilon)
