"""Efficient multi-task learning via MoEfied LoRA, quality retaining and router fading."""

__version__ = "0.1.0"
