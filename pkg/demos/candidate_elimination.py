"""Which search tokens survive multi-modal candidate elimination?

Builds the score h = max(rgb, tir) from the template->search attention of
both students and draws the kept cells of the 8x8 search grid as a map.
The target sits in the middle of the crop.

    python3 demos/candidate_elimination.py
"""
import numpy as np
import torch

from ckdtrack.backbone import embed, forward_pair
from ckdtrack.data import SampleSource, generate_synthetic_sequence
from ckdtrack.elimination import EliminationConfig
from ckdtrack.train import build_model, collate

seq = generate_synthetic_sequence(3, length=10)
sample = SampleSource([seq], center_jitter=0.0, scale_jitter=0.0).draw(np.random.default_rng(0))
batch = collate([sample])
model = build_model(seed=0).eval()
cfg = model.cfg

names = ("student_rgb", "student_tir")
seqs = [embed(batch[f"search_{m}"], batch[f"template_{m}"], model.branches[n])
        for n, m in zip(names, ("rgb", "tir"))]
branches = [model.branches[n] for n in names]

for mode in ("ce", "mce"):
    with torch.no_grad():
        outs = forward_pair(seqs, branches, EliminationConfig(layers=(2,), keep_ratio=0.5, mode=mode))
    for name, out in zip(names, outs):
        grid = np.full(cfg.n_search, ".")
        grid[out.kept[0].numpy()] = "#"
        print(f"{mode} / {name}: {out.kept.shape[1]} of {cfg.n_search} kept")
        print("\n".join(" ".join(row) for row in grid.reshape(cfg.grid, cfg.grid)))
        print()
# with "mce" both branches keep the same cells: a token survives if either modality wants it
