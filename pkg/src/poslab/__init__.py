"""poslab: a desk-scale positional-bias distillation laboratory.

Induces measurable positional bias in a small from-scratch transformer
on synthetic multi-document tasks, then distills the advantaged-position
behaviour into the trivial positions and quantifies the bias reduction.
"""
from .model import ModelConfig, TransformerLM
from .tasks import RetrievalInstance, ReasoningInstance, PromptLayout

__all__ = [
    "ModelConfig",
    "TransformerLM",
    "RetrievalInstance",
    "ReasoningInstance",
    "PromptLayout",
]
__version__ = "0.1.0"
