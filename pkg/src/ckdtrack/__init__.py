"""Coupled style/content distillation for RGB-thermal tracking at desk scale."""
from .backbone import ModelConfig, apply_mask, forward_branch, forward_ckd, patch_embed, sample_mask
from .data import (BBox, CropConfig, FramePair, FrameSample, SampleSource, Sequence,
                   generate_synthetic_sequence, load_dataset, make_sample, synthetic_benchmark)
from .distill import (DistillConfig, content_distill_loss, feature_distill_loss, instance_normalize,
                      style_distill_loss, style_stats)
from .elimination import EliminationConfig, candidate_scores, scatter_back, top_k_keep
from .evaluate import (CKDTracker, gap_report, normalized_precision, precision_rate, run_ope,
                       success_auc)
from .train import (FourBranchModel, TrainConfig, Trainer, build_model, grad_check, load_checkpoint,
                    save_checkpoint, total_loss, train_step)

__version__ = "0.1.0"
