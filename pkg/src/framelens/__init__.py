"""Measure and correct how question framing shifts a VLM's visual attention.

The core math lives in :mod:`framelens.rollout` and :mod:`framelens.metrics`;
higher layers are imported from their own subpackages (``framelens.steering``,
``framelens.consistency``, ``framelens.reframe``, ``framelens.tuner``,
``framelens.harness``).
"""

from __future__ import annotations

from .errors import FrameLensError
from .layout import BoxRegion, Span, TokenLayout, map_bbox_to_patches
from .metrics import VisualStats, compute_stats, cqv, visual_energy
from .rollout import AttentionStack, RolloutResult, rollout

__version__ = "0.1.0"

__all__ = [
    "FrameLensError", "BoxRegion", "Span", "TokenLayout", "map_bbox_to_patches", "VisualStats",
    "compute_stats", "cqv", "visual_energy", "AttentionStack", "RolloutResult", "rollout", "__version__",
]
