"""Tokenizer, tiny multimodal transformer, LoRA adapters, generation, checkpoints."""

from .checkpoint import CheckpointError, load_model, load_tensors, save_model, save_tensors
from .transformer import (
    DEFAULT_LORA_TARGETS,
    ForwardOut,
    Generation,
    LoraAdapter,
    ModelConfig,
    PolicyModel,
    Sampling,
    generate,
    generate_batch,
)
from .vocab import TokenizerError, Vocab

__all__ = [
    "CheckpointError",
    "DEFAULT_LORA_TARGETS",
    "ForwardOut",
    "Generation",
    "LoraAdapter",
    "ModelConfig",
    "PolicyModel",
    "Sampling",
    "TokenizerError",
    "Vocab",
    "generate",
    "generate_batch",
    "load_model",
    "load_tensors",
    "save_model",
    "save_tensors",
]
