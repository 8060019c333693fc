"""Behavior-cloning trajectories to visuomotor instruction-tuning conversations."""

__version__ = "0.1.0"
