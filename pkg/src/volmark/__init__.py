"""Volumetric landmark detection with bi-level routing attention, on a numpy autodiff tape."""

from .anchors import AnchorGrid, AnchorTargets, build_grid, decode_predictions, encode_targets
from .data import Volume, load_landmarks, load_volume, normalize_intensity, random_crop, save_landmarks, \
    save_volume, synth_generate
from .gradcheck import grad_check
from .heatmap import HeatmapVolume, decode_peaks, encode_heatmaps
from .landmarks import LandmarkSet
from .losses import LossWeights, cls_loss, heatmap_loss, offset_loss, total_loss
from .metrics import EvalReport, mre, sdr
from .network import (ModelConfig, ModelState, build_model, forward_anchor_based, forward_anchor_free, fuse,
                      load_checkpoint, save_checkpoint)
from .tensor import NonFiniteError, ShapeError, Tensor, backward, grad
from .vbra import VbraConfig, dense_attention, vbra_attention, vbra_block

__version__ = "0.1.0"
