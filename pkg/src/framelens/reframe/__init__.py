"""Reframing VQA items among open-ended, yes/no and multiple-choice framings."""

from .client import CannedClient, ChatClient, HTTPChatClient
from .items import (
    DEFAULT_INSTRUCTIONS,
    FRAMINGS,
    MCQ,
    OPEN,
    YESNO,
    FramingTriplet,
    QAItem,
    ReframeConfig,
    mcq_to_open,
    strip_embedded_options,
)
from .parsing import parse_reframe_response
from .pipeline import Drop, Journal, load_items, load_triplets, reframe_dataset, reframe_one, save_triplets
from .prompts import build_prompt, polarity_for, template_text

__all__ = [
    "CannedClient", "ChatClient", "HTTPChatClient", "DEFAULT_INSTRUCTIONS", "FRAMINGS", "MCQ", "OPEN", "YESNO",
    "FramingTriplet", "QAItem", "ReframeConfig", "mcq_to_open", "strip_embedded_options",
    "parse_reframe_response", "Drop", "Journal", "load_items", "load_triplets", "reframe_dataset",
    "reframe_one", "save_triplets", "build_prompt", "polarity_for", "template_text",
]
