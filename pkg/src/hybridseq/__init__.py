"""Desk-scale hybrid Mamba-2/attention sequence model with in-model vision-token compression."""

from .blocking import BlockingConfig, build_blocking_mask
from .config import LayerSpec, ModelConfig, load_config, parse_config
from .model import CaptureTrace, HybridModel, build_model, generate, model_forward
from .sequence import Segment, TokenSequence
from .ssm import SsmParams, SsmState, ssm_scan
from .tome import FrameTokens, assemble_sequence, synthetic_frames, synthetic_sequence, tome_merge
from .transv import CompressionSchedule, TransVParams, TransVSpec, parse_schedule, token_drop, transv_apply

__version__ = "0.1.0"

__all__ = [
    "BlockingConfig", "build_blocking_mask", "LayerSpec", "ModelConfig", "load_config", "parse_config",
    "CaptureTrace", "HybridModel", "build_model", "generate", "model_forward", "Segment", "TokenSequence",
    "SsmParams", "SsmState", "ssm_scan", "FrameTokens", "assemble_sequence", "synthetic_frames",
    "synthetic_sequence", "tome_merge", "CompressionSchedule", "TransVParams", "TransVSpec", "parse_schedule",
    "token_drop", "transv_apply",
]
