"""Desk-scale RLVR laboratory: single-rollout Beta-baseline training with
entropy-based advantage shaping, next to group-based estimators."""

__version__ = "0.1.0"
