"""Reframing prompts rendered from the packaged templates."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import jinja2

from ..errors import FramingError, TemplateError
from .items import MCQ, OPEN, YESNO, QAItem

# direction name -> (source framing, template file)
DIRECTIONS = {
    "open": (OPEN, "open_to_yn_mcq.txt"),
    "yesno": (YESNO, "yn_to_open_mcq.txt"),
}


@lru_cache(maxsize=None)
def _template(name: str) -> jinja2.Template:
    text = resources.files(__package__).joinpath("templates", name).read_text(encoding="utf-8")
    env = jinja2.Environment(undefined=jinja2.StrictUndefined, keep_trailing_newline=True, autoescape=False)
    return env.from_string(text)


def template_text(direction: str) -> str:
    _, name = DIRECTIONS[direction]
    return resources.files(__package__).joinpath("templates", name).read_text(encoding="utf-8")


def polarity_for(index: int, policy: str) -> str:
    if policy == "alternate":
        return "affirm" if index % 2 == 0 else "negate"
    return policy


def _require(value, name: str, item: QAItem) -> str:
    if value is None or (isinstance(value, str) and not value.strip()):
        raise TemplateError(f"item {item.id}: missing value for {name}")
    return value


def build_prompt(
    item: QAItem,
    direction: str,
    *,
    polarity: str = "affirm",
    options: list[str] | None = None,
) -> str:
    """Fill the template for ``direction`` ("open" or "yesno") from ``item``.

    ``options`` supplies an option list for open items derived from an MCQ
    (the "options exist" branch); it defaults to ``item.options``.
    """
    if direction not in DIRECTIONS:
        raise TemplateError(f"unknown direction {direction!r}")
    source, name = DIRECTIONS[direction]
    if item.framing != source and not (direction == "open" and item.framing == MCQ):
        raise FramingError(f"direction {direction} expects a {source} item, got {item.framing}")
    if polarity not in ("affirm", "negate"):
        raise TemplateError(f"polarity must be affirm or negate, got {polarity!r}")

    tpl = _template(name)
    if direction == "open":
        opts = options if options is not None else item.options
        return tpl.render(
            original_question=_require(item.question, "original_question", item),
            correct_answer=_require(item.answer, "correct_answer", item),
            options=", ".join(opts) if opts else "",
            polarity=polarity,
            scene_graph=item.scene_graph or "",
        )
    return tpl.render(
        original_question=_require(item.question, "original_question", item),
        original_answer=_require(item.answer, "original_answer", item),
        original_full_answer=_require(item.full_answer, "original_full_answer", item),
        scene_graph=item.scene_graph or "",
    )
