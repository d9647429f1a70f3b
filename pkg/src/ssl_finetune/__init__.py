"""Self-supervised speech encoders, pretraining objectives and fine-tuning recipes."""

from .config import CNNLayer, MaskPolicy, ModelConfig
from .masking import MaskSpec, apply_mask, sample_mask
from .model import EncoderParams, FrameSequence, SpeechEncoder

__all__ = [
    "CNNLayer",
    "EncoderParams",
    "FrameSequence",
    "MaskPolicy",
    "MaskSpec",
    "ModelConfig",
    "SpeechEncoder",
    "apply_mask",
    "sample_mask",
]

__version__ = "0.1.0"
