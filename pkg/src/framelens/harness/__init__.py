"""Adapters, the toy model, dumps and plots.

``framelens.harness.config`` and ``framelens.harness.cli`` are not imported
here because they depend on the tuner and reframe subpackages.
"""

from __future__ import annotations

from .adapter import ALL_CAPS, Encoded, Forward, Generation, ModelAdapter, require, supports
from .dump import FORMAT_VERSION, load_dump, save_dump
from .scripted import ScriptedAdapter
from .toy import ToyAdapter, ToyConfig, ToyVLM, toy_triplets

__all__ = [
    "ALL_CAPS", "Encoded", "Forward", "Generation", "ModelAdapter", "require", "supports",
    "FORMAT_VERSION", "load_dump", "save_dump", "ScriptedAdapter", "ToyAdapter", "ToyConfig", "ToyVLM",
    "toy_triplets",
]
