"""Train a small CKD model for a few hundred steps and track a test sequence.

    python3 demos/train_and_track.py            # ~1.5 min on one core
    python3 demos/train_and_track.py 2000       # the desk-scale setting
"""
import sys

import numpy as np

from ckdtrack.data import SampleSource, synthetic_benchmark
from ckdtrack.elimination import EliminationConfig
from ckdtrack.evaluate import CKDTracker, evaluate, iou, run_ope
from ckdtrack.train import TrainConfig, Trainer

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
train, test = synthetic_benchmark(n_train=20, n_test=5)

trainer = Trainer(SampleSource(train), TrainConfig(variant="ckd", seed=0))


def show(rec):
    if rec.step % 100 == 0:
        print(f"step {rec.step:5d}  task {rec.task:.3f}  cd {rec.cd:.3f}  sd {rec.sd:.5f}")


trainer.run(steps, callback=show)
model = trainer.model

seq = test[0]
result = run_ope(CKDTracker(model), seq)
overlap = iou(result.boxes[1:], seq.boxes[1:])
print(f"\n{seq.name}: mean IoU {overlap.mean():.3f}, "
      f"{(overlap >= 0.5).mean():.0%} of frames with IoU >= 0.5, "
      f"{1000 * result.times[1:].mean():.1f} ms/frame")

for label, elim in [("no elimination", None), ("MCE keep 0.7", EliminationConfig(mode="mce")),
                    ("CE rgb only", EliminationConfig(mode="ce_rgb_only"))]:
    agg = evaluate(lambda: CKDTracker(model, elim=elim), test).aggregate
    print(f"{label:16s} PR@20 {agg['pr']:.3f}  NPR {agg['npr']:.3f}  SR {agg['sr']:.3f}")
