"""Explainability-guided binary image classification.

CAM heatmaps from a GAP-linear conv classifier drive three techniques:
SnapMix augmentation, the contrastive patch embedding loss, and CAM-directed
test-time masking with a supporting-vote flip rule.
"""

from .cam import Box, Heatmap, box_cam_ratio, compute_cam, patch_cam_sums
from .cpe import PatchSelection, cpe_loss, select_patches
from .data import Dataset, SynthConfig, load_dataset, split, synth_generate
from .model import ModelConfig, build_model, cell_to_patch, forward, load_checkpoint, save_checkpoint
from .snapmix import VirtualSample, mixed_bce_loss, sample_box, snapmix
from .training import Metrics, TrainConfig, evaluate, sweep_k, sweep_theta, train, train_step
from .tta import TtaConfig, VoteRecord, make_masked_images, rank_patches, vote

__version__ = "0.1.0"
