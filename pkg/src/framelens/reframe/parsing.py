"""Strict parsing of reframing responses.

No repair is attempted beyond removing surrounding prose and code fences; a
response that fails any check raises :class:`ReframeParseError` and the caller
drops the sample.
"""

from __future__ import annotations

import json
import re

from ..errors import ReframeParseError
from .items import normalize_yesno

_FENCE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)

EXPECTED_KEYS = {
    "open": ("yes_no", "mcq"),
    "yesno": ("mcq", "open_ended"),
}


def extract_json_text(text: str) -> str:
    m = _FENCE.search(text)
    if m:
        text = m.group(1)
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise ReframeParseError("no JSON object in response")
    return text[start : end + 1]


def _str(d: dict, key: str, where: str) -> str:
    v = d.get(key)
    if not isinstance(v, str) or not v.strip():
        raise ReframeParseError(f"{where}.{key} must be a non-empty string")
    return v.strip()


def _mcq(block) -> dict:
    if not isinstance(block, dict):
        raise ReframeParseError("mcq must be an object")
    question = _str(block, "question", "mcq")
    options = block.get("options")
    if not isinstance(options, list) or len(options) != 4:
        raise ReframeParseError("mcq must have exactly 4 options")
    if not all(isinstance(o, str) and o.strip() for o in options):
        raise ReframeParseError("mcq options must be non-empty strings")
    options = [o.strip() for o in options]
    if len(set(o.lower() for o in options)) != 4:
        raise ReframeParseError("mcq options must be distinct")
    answer = _str(block, "answer_text", "mcq")
    matches = [o for o in options if o.lower() == answer.lower()]
    if not matches:
        raise ReframeParseError(f"answer_text {answer!r} not among options")
    return {"question": question, "options": options, "answer": matches[0]}


def parse_reframe_response(text: str, direction: str = "open") -> dict[str, dict]:
    """Return ``{"yesno": {...}, "mcq": {...}}`` or ``{"mcq": {...}, "open": {...}}``."""
    if direction not in EXPECTED_KEYS:
        raise ReframeParseError(f"unknown direction {direction!r}")
    try:
        data = json.loads(extract_json_text(text))
    except json.JSONDecodeError as exc:
        raise ReframeParseError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ReframeParseError("top level must be an object")
    for key in EXPECTED_KEYS[direction]:
        if key not in data:
            raise ReframeParseError(f"missing key {key!r}")

    out = {"mcq": _mcq(data["mcq"])}
    if direction == "open":
        yn = data["yes_no"]
        if not isinstance(yn, dict):
            raise ReframeParseError("yes_no must be an object")
        answer = normalize_yesno(_str(yn, "answer", "yes_no"))
        if answer is None:
            raise ReframeParseError("yes_no answer must be yes or no")
        out["yesno"] = {"question": _str(yn, "question", "yes_no"), "answer": answer}
    else:
        oe = data["open_ended"]
        if not isinstance(oe, dict):
            raise ReframeParseError("open_ended must be an object")
        answer = _str(oe, "answer", "open_ended")
        if normalize_yesno(answer) is not None:
            raise ReframeParseError("open-ended answer must not be yes/no")
        out["open"] = {"question": _str(oe, "question", "open_ended"), "answer": answer}
    return out
