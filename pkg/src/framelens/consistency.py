"""Cross-framing inconsistency protocol and answer matching.

A model is asked the open-ended version of each question first. Only the items
it answers correctly survive; those are reframed into yes/no and
multiple-choice versions and asked again. The inconsistency rate is the share
of survivors that fail at least one of the reframed versions.
"""

from __future__ import annotations

import json
import re
import string
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import EmptyDenominatorError
from .harness.adapter import CAP_GENERATE, CAP_SCORE, CAP_TOKENIZE, require
from .reframe.items import LETTERS, MCQ, OPEN, YESNO, FramingTriplet, QAItem, ReframeConfig, mcq_to_open, normalize_yesno
from .reframe.pipeline import Drop, reframe_dataset

MODES = ("generate", "rank")

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
_ARTICLES = {"a", "an", "the"}
# "A", "A.", "A)", "A:", "(A)" at the start of the reply
_LETTER = re.compile(r"^\s*(?:\(([A-D])\)|([A-D])(?:[.):]|\s*$))")


class MatchResult(NamedTuple):
    matched: bool
    rule: str


def normalize_answer(text: str) -> str:
    """Lowercase, replace punctuation by spaces, drop leading articles."""
    words = _PUNCT.sub(" ", text.lower()).split()
    while words and words[0] in _ARTICLES:
        words.pop(0)
    return " ".join(words)


def extract_letter(prediction: str) -> str | None:
    m = _LETTER.match(prediction)
    if not m:
        return None
    return m.group(1) or m.group(2)


def _match_yesno(prediction: str, gold: str) -> MatchResult:
    want = normalize_yesno(gold)
    for word in normalize_answer(prediction).split():
        if word in ("yes", "no"):
            return MatchResult(word == want, "yesno-keyword")
    return MatchResult(False, "none")


def _match_mcq(prediction: str, gold: str, options: Sequence[str] | None) -> MatchResult:
    gold_letter = gold.strip().upper()
    if gold_letter not in LETTERS and options:
        # gold given as option text
        norm = [normalize_answer(o) for o in options]
        g = normalize_answer(gold)
        gold_letter = LETTERS[norm.index(g)] if g in norm else gold_letter
    letter = extract_letter(prediction)
    if letter is not None:
        return MatchResult(letter == gold_letter, "mcq-letter")
    if options:
        pred = normalize_answer(prediction)
        for i, opt in enumerate(options):
            if pred and pred == normalize_answer(opt):
                return MatchResult(LETTERS[i] == gold_letter, "mcq-option-text")
    return MatchResult(False, "none")


def _match_open(prediction: str, gold: str) -> MatchResult:
    pred, want = normalize_answer(prediction), normalize_answer(gold)
    if not want or not pred:
        return MatchResult(False, "none")
    if pred == want:
        return MatchResult(True, "exact")
    if re.search(rf"(?<!\S){re.escape(want)}(?!\S)", pred):
        return MatchResult(True, "contains")
    return MatchResult(False, "none")


def match_answer(prediction: str, gold: str, framing: str, options: Sequence[str] | None = None) -> MatchResult:
    """Deterministic, case-insensitive answer check; returns ``(matched, rule)``.

    ``rule`` is ``"none"`` when nothing could be matched.
    """
    if framing == YESNO:
        return _match_yesno(prediction, gold)
    if framing == MCQ:
        return _match_mcq(prediction, gold, options)
    if framing == OPEN:
        return _match_open(prediction, gold)
    raise ValueError(f"unknown framing {framing!r}")


@dataclass
class EvalRecord:
    item_id: str
    framing: str
    prediction: str
    gold: str
    matched: bool
    match_rule: str
    category: str | None = None


# -- answering -------------------------------------------------------------

def option_scores(adapter, item: QAItem, options: Sequence[str] | None = None) -> list[float]:
    require(adapter, CAP_TOKENIZE, CAP_SCORE)
    enc = adapter.tokenize_with_layout(item)
    return [float(adapter.score_option(enc, opt)) for opt in (options or item.options)]


def rank_options(adapter, item: QAItem) -> int:
    """Index of the option with the highest mean per-token log-likelihood (ties: lowest)."""
    return int(np.argmax(option_scores(adapter, item)))


def answer_item(adapter, item: QAItem, mode: str = "generate", max_tokens: int = 8) -> str:
    """Model prediction for one item.

    In ``rank`` mode MCQ items are answered by option ranking and yes/no items
    by ranking ``yes`` against ``no``; open-ended items are always generated.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "rank" and item.framing == MCQ:
        return LETTERS[rank_options(adapter, item)]
    if mode == "rank" and item.framing == YESNO:
        return ("yes", "no")[int(np.argmax(option_scores(adapter, item, ["yes", "no"])))]
    require(adapter, CAP_TOKENIZE, CAP_GENERATE)
    return adapter.generate(adapter.tokenize_with_layout(item), max_tokens=max_tokens).text


def evaluate_item(adapter, item: QAItem, mode: str = "generate", max_tokens: int = 8) -> EvalRecord:
    pred = answer_item(adapter, item, mode, max_tokens)
    ok, rule = match_answer(pred, item.gold, item.framing, options=item.options)
    return EvalRecord(item.id, item.framing, pred, item.gold, bool(ok), rule, item.category)


# -- report ----------------------------------------------------------------

@dataclass
class InconsistencyReport:
    denominator: int
    yn_fail: int
    mcq_fail: int
    either_fail: int
    per_category: dict[str, dict] = field(default_factory=dict)
    n_items: int = 0
    n_excluded: int = 0
    n_open_correct: int = 0
    n_dropped: int = 0
    records: list[EvalRecord] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.either_fail / self.denominator

    @property
    def yn_rate(self) -> float:
        return self.yn_fail / self.denominator

    @property
    def mcq_rate(self) -> float:
        return self.mcq_fail / self.denominator

    def to_dict(self, with_records: bool = False) -> dict:
        d = {
            "denominator": self.denominator, "yn_fail": self.yn_fail, "mcq_fail": self.mcq_fail,
            "either_fail": self.either_fail, "rate": self.rate, "yn_rate": self.yn_rate,
            "mcq_rate": self.mcq_rate, "per_category": self.per_category, "n_items": self.n_items,
            "n_excluded": self.n_excluded, "n_open_correct": self.n_open_correct, "n_dropped": self.n_dropped,
        }
        if with_records:
            d["records"] = [asdict(r) for r in self.records]
        return d

    def format_text(self) -> str:
        lines = [
            f"items: {self.n_items} (excluded yes/no: {self.n_excluded})",
            f"open-ended correct: {self.n_open_correct} (reframe dropped: {self.n_dropped})",
            f"denominator: {self.denominator}",
            f"yes/no failures: {self.yn_fail} ({self.yn_rate:.1%})",
            f"mcq failures: {self.mcq_fail} ({self.mcq_rate:.1%})",
            f"inconsistent (either): {self.either_fail} ({self.rate:.1%})",
        ]
        for cat, c in sorted(self.per_category.items()):
            lines.append(f"  {cat}: {c['either_fail']}/{c['denominator']} ({c['rate']:.1%})")
        return "\n".join(lines)


def summarize(outcomes: Iterable[tuple[FramingTriplet, EvalRecord, EvalRecord]], **counts) -> InconsistencyReport:
    """Reduce per-triplet (yes/no, mcq) outcomes into a report."""
    den = yn = mc = either = 0
    cats: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    records: list[EvalRecord] = []
    for trip, yn_rec, mcq_rec in outcomes:
        den += 1
        yn += not yn_rec.matched
        mc += not mcq_rec.matched
        fail = not (yn_rec.matched and mcq_rec.matched)
        either += fail
        if trip.open.category is not None:
            cats[trip.open.category][0] += 1
            cats[trip.open.category][1] += fail
        records += [yn_rec, mcq_rec]
    if den == 0:
        raise EmptyDenominatorError("no open-ended-correct items with valid reframes; rate undefined")
    per_cat = {k: {"denominator": d, "either_fail": f, "rate": f / d} for k, (d, f) in cats.items()}
    return InconsistencyReport(den, yn, mc, either, per_cat, records=records, **counts)


def evaluate_triplets(triplets: Sequence[FramingTriplet], adapter, mode: str = "generate",
                      max_tokens: int = 8, **counts) -> InconsistencyReport:
    """Stage 3 only: query the yes/no and MCQ versions of already-filtered triplets."""
    outcomes = [
        (t, evaluate_item(adapter, t.yesno, mode, max_tokens), evaluate_item(adapter, t.mcq, mode, max_tokens))
        for t in triplets
    ]
    return summarize(outcomes, **counts)


def triplet_inconsistency(triplets: Sequence[FramingTriplet], adapter, mode: str = "generate",
                          max_tokens: int = 8) -> InconsistencyReport:
    """Protocol over already-reframed triplets: keep open-ended-correct ones, then re-query."""
    triplets = list(triplets)
    survivors = [t for t in triplets if evaluate_item(adapter, t.open, mode, max_tokens).matched]
    return evaluate_triplets(survivors, adapter, mode, max_tokens, n_items=len(triplets),
                             n_open_correct=len(survivors))


def exclude_yesno_items(items: Iterable[QAItem]) -> tuple[list[QAItem], int]:
    """Drop items whose original framing is yes/no; returns the rest and the drop count."""
    items = list(items)
    kept = [it for it in items if it.framing != YESNO]
    return kept, len(items) - len(kept)


def run_inconsistency(
    dataset: Sequence[QAItem],
    adapter,
    client,
    mode: str = "generate",
    *,
    config: ReframeConfig | None = None,
    journal_path: str | Path | None = None,
    max_tokens: int = 8,
) -> InconsistencyReport:
    """Full protocol over open-ended (or MCQ-origin) items.

    Yes/no items in ``dataset`` are excluded from the pool. MCQ-origin items
    are asked in their rule-converted open form in stage 1 and keep their
    original options in stage 3. Items whose reframing is dropped are counted
    in ``n_dropped`` and left out of the denominator.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    dataset = list(dataset)
    pool, n_excluded = exclude_yesno_items(dataset)

    survivors = []
    for item in pool:
        open_item = mcq_to_open(item) if item.framing == MCQ else item
        if evaluate_item(adapter, open_item, mode, max_tokens).matched:
            survivors.append(item)

    drops: list[Drop] = []
    triplets = reframe_dataset(survivors, config or ReframeConfig(), client, journal_path=journal_path, drops=drops)
    return evaluate_triplets(
        triplets, adapter, mode, max_tokens, n_items=len(dataset), n_excluded=n_excluded,
        n_open_correct=len(survivors), n_dropped=len(drops),
    )


def save_report(report: InconsistencyReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(with_records=True), indent=2), encoding="utf-8")


def plot_report(report: InconsistencyReport, path: str | Path, title: str | None = None) -> Path:
    """Bar chart of failure rates; one group per category when categories exist."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if report.per_category:
        labels = sorted(report.per_category)
        values = [100 * report.per_category[k]["rate"] for k in labels]
    else:
        labels = ["Yes/No", "MCQ", "Either"]
        values = [100 * report.yn_rate, 100 * report.mcq_rate, 100 * report.rate]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(labels) + 2), 3.2))
    ax.bar(labels, values, color="#4c72b0")
    ax.set_ylabel("inconsistent (%)")
    ax.set_ylim(0, max(max(values) * 1.2, 1.0))
    ax.set_title(title or f"cross-framing inconsistency (n={report.denominator})")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.0f}", ha="center", va="bottom", fontsize=8)
    plt.setp(ax.get_xticklabels(), rotation=30 if len(labels) > 4 else 0, ha="right" if len(labels) > 4 else "center")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
