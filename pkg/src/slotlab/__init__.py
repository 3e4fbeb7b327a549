"""Slot-attention object discovery with a finetuned encoder, on a numpy autodiff engine."""
from . import autodiff, checkpoint, evaluate, metrics, model, rng, scenes, train

__version__ = "0.1.0"

__all__ = ["autodiff", "checkpoint", "evaluate", "metrics", "model", "rng", "scenes", "train"]
