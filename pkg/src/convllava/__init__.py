"""Hierarchical ConvNeXt visual encoding for multimodal LMs, at desk scale."""

from .encoder import EncoderConfig, EncoderState, VisualTokens, build_encoder, encode, freeze_mask
from .pipeline import ConvLLaVA, MultimodalBatch, ProjectorConfig, ToyLMConfig, build_model, lm_loss
from .tensor import Tensor, grad

__version__ = "0.1.0"

__all__ = [
    "ConvLLaVA", "EncoderConfig", "EncoderState", "MultimodalBatch", "ProjectorConfig", "Tensor",
    "ToyLMConfig", "VisualTokens", "build_encoder", "build_model", "encode", "freeze_mask", "grad", "lm_loss",
]
