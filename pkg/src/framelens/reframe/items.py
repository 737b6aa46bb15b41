"""VQA items in the three framings and the triplets that bind them."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

from ..errors import FramingError

OPEN, YESNO, MCQ = "open", "yesno", "mcq"
FRAMINGS = (OPEN, YESNO, MCQ)
LETTERS = "ABCD"

DEFAULT_INSTRUCTIONS = {
    OPEN: "Answer the question using a single word or phrase.",
    YESNO: "Please answer yes or no.",
    MCQ: "Answer with the option's letter from the given choices directly.",
}


def normalize_yesno(text: str) -> str | None:
    t = re.sub(r"[^a-z]", "", str(text).lower())
    return t if t in ("yes", "no") else None


@dataclass
class QAItem:
    """One question in one framing.

    For MCQ items ``answer`` holds the text of the correct option and ``gold``
    its letter. ``bbox`` is a single ``(x, y, w, h)`` box or a list of them.
    """

    id: str
    image_ref: str
    framing: str
    question: str
    answer: str
    options: list[str] | None = None
    scene_graph: str | None = None
    bbox: Any = None
    full_answer: str | None = None
    category: str | None = None
    instruction: str | None = None

    def __post_init__(self):
        if self.framing not in FRAMINGS:
            raise FramingError(f"unknown framing {self.framing!r}")
        if self.framing == MCQ:
            if not self.options or len(self.options) != 4:
                raise FramingError(f"mcq item {self.id} needs exactly 4 options")
            if self.answer not in self.options:
                letter = self.answer.strip().rstrip(".").upper()
                if len(letter) == 1 and letter in LETTERS:
                    self.answer = self.options[LETTERS.index(letter)]
                else:
                    raise FramingError(f"mcq item {self.id}: answer {self.answer!r} not among options")
        elif self.framing == YESNO:
            yn = normalize_yesno(self.answer)
            if yn is None:
                raise FramingError(f"yes/no item {self.id}: answer {self.answer!r} is not yes/no")
            self.answer = yn

    @property
    def gold(self) -> str:
        if self.framing == MCQ:
            return LETTERS[self.options.index(self.answer)]
        return self.answer

    @property
    def instruction_text(self) -> str:
        return self.instruction if self.instruction is not None else DEFAULT_INSTRUCTIONS[self.framing]

    def rendered_question(self) -> str:
        """Question text as shown to the model (options listed for MCQ)."""
        if self.framing != MCQ:
            return self.question
        lines = [self.question] + [f"{LETTERS[i]}. {opt}" for i, opt in enumerate(self.options)]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "QAItem":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class FramingTriplet:
    open: QAItem
    yesno: QAItem
    mcq: QAItem
    source_id: str
    provenance: str = ""

    def __post_init__(self):
        for slot in FRAMINGS:
            item = getattr(self, slot)
            if item.framing != slot:
                raise FramingError(f"triplet slot {slot} holds a {item.framing} item")
        refs = {self.open.image_ref, self.yesno.image_ref, self.mcq.image_ref}
        if len(refs) != 1:
            raise FramingError(f"triplet {self.source_id} mixes images {sorted(refs)}")

    def items(self) -> tuple[QAItem, QAItem, QAItem]:
        return self.open, self.yesno, self.mcq

    def __getitem__(self, framing: str) -> QAItem:
        if framing not in FRAMINGS:
            raise FramingError(f"unknown framing {framing!r}")
        return getattr(self, framing)

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "provenance": self.provenance,
            **{slot: getattr(self, slot).to_dict() for slot in FRAMINGS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FramingTriplet":
        return cls(
            open=QAItem.from_dict(d["open"]),
            yesno=QAItem.from_dict(d["yesno"]),
            mcq=QAItem.from_dict(d["mcq"]),
            source_id=d["source_id"],
            provenance=d.get("provenance", ""),
        )


@dataclass
class ReframeConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-5.1"
    api_key_env: str = "REFRAME_API_KEY"
    yn_polarity: str = "alternate"
    max_retries: int = 3
    timeout_s: float = 60.0
    temperature: float = 0.0
    max_concurrency: int = 4
    backoff_s: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.yn_polarity not in ("affirm", "negate", "alternate"):
            raise ValueError(f"unknown polarity {self.yn_polarity!r}")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


# "(A) red (B) blue", "A. red B. blue", "A) red", one per line or inline,
# optionally introduced by "Options:" / "Choices:"
_OPTION_BLOCK = re.compile(
    r"""
    (?:\s*(?:options|choices|candidates)\s*:?)?      # optional lead-in
    \s*(?:\(A\)|\bA[.):])\s*\S.*$                    # first option and everything after
    """,
    re.IGNORECASE | re.VERBOSE | re.DOTALL,
)
_ENUM_CHECK = re.compile(r"(?:\(B\)|\bB[.):])")


def strip_embedded_options(question: str) -> str:
    """Remove an inline option list (A-D) from a question string."""
    m = _OPTION_BLOCK.search(question)
    if m is None or not _ENUM_CHECK.search(question[m.start():]):
        return question.strip()
    return question[: m.start()].strip().rstrip(" \n\t,;:")


def mcq_to_open(item: QAItem) -> QAItem:
    """Drop the options from an MCQ item; the correct option's text becomes the answer."""
    if item.framing != MCQ:
        raise FramingError(f"expected an mcq item, got {item.framing}")
    return replace(
        item,
        framing=OPEN,
        question=strip_embedded_options(item.question),
        answer=item.answer,
        options=None,
        instruction=None,
    )


def with_framing_instructions(items: Sequence[QAItem], instruction: str | None) -> list[QAItem]:
    return [replace(it, instruction=instruction) for it in items]
