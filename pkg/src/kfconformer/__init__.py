"""Key-frame mechanisms (KFSA / KFDS) for two-encoder Conformer CTC models."""

from .ctc import BLANK_ID, CtcPosterior, LabelSeq, ctc_greedy_decode, ctc_loss, edit_distance
from .keyframe import (AttentionMask, FrameSelection, KeyFrameSet, MaskMode, build_kfsa_mask,
                       check_ctc_feasible, drop_ratio_stats, extract_key_frames, select_kfds_frames)
from .model import KeyFrameConformer, ModelConfig, joint_loss
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "BLANK_ID", "CtcPosterior", "LabelSeq", "ctc_greedy_decode", "ctc_loss", "edit_distance",
    "AttentionMask", "FrameSelection", "KeyFrameSet", "MaskMode", "build_kfsa_mask", "check_ctc_feasible",
    "drop_ratio_stats", "extract_key_frames", "select_kfds_frames",
    "KeyFrameConformer", "ModelConfig", "joint_loss", "Tensor",
]
