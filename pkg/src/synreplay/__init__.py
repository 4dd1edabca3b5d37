"""Continual learning testbed: a toy dual-encoder VLM finetuned task by task,
kept stable with synthetic replay from a class-conditional diffusion
generator that is steered back toward each task with low-rank adapters and
two stages of confidence-based sample selection."""

__version__ = "0.1.0"
