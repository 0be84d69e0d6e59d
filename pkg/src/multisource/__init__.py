"""Multi-source sequence-to-sequence Transformer with serial, parallel, flat
and hierarchical cross-attention combination."""

from .combination import EncoderBundle, EncoderState, Strategy
from .model import ModelConfig, MultiSourceTransformer, load_checkpoint, save_checkpoint
from .tensor import Prng, Tensor

__all__ = [
    "EncoderBundle",
    "EncoderState",
    "ModelConfig",
    "MultiSourceTransformer",
    "Prng",
    "Strategy",
    "Tensor",
    "load_checkpoint",
    "save_checkpoint",
]
