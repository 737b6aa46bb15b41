"""Dataset-level reframing with a resumable progress journal."""

from __future__ import annotations

import json
import logging
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import EndpointError, FramingError, ReframeParseError, TemplateError
from .client import ChatClient
from .items import MCQ, OPEN, YESNO, FramingTriplet, QAItem, ReframeConfig, mcq_to_open, strip_embedded_options
from .parsing import parse_reframe_response
from .prompts import build_prompt, polarity_for

log = logging.getLogger(__name__)

# per-item failures that drop the sample instead of aborting the run
_DROPPABLE = (ReframeParseError, TemplateError)


@dataclass
class Drop:
    item_id: str
    reason: str


class Journal:
    """Append-only JSONL record of finished items, keyed by item id."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.done: dict[str, dict] = {}
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        # torn final line from a crash mid-write
                        continue
                    self.done[rec["id"]] = rec

    def append(self, rec: dict) -> None:
        self.done[rec["id"]] = rec
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()


def _assemble(item: QAItem, parsed: dict, direction: str, provenance: str) -> FramingTriplet:
    common = dict(image_ref=item.image_ref, bbox=item.bbox, scene_graph=item.scene_graph, category=item.category)
    src = item.id
    if direction == "open":
        if item.framing == MCQ:
            # the original options are kept; only the inline option list is removed
            open_item = replace(mcq_to_open(item), id=f"{src}:open")
            mcq_item = replace(item, id=f"{src}:mcq", question=strip_embedded_options(item.question))
        else:
            open_item = item
            m = parsed["mcq"]
            mcq_item = QAItem(id=f"{src}:mcq", framing=MCQ, question=m["question"], answer=m["answer"],
                              options=m["options"], **common)
        y = parsed["yesno"]
        yn_item = QAItem(id=f"{src}:yesno", framing=YESNO, question=y["question"], answer=y["answer"], **common)
    else:
        yn_item = item
        o, m = parsed["open"], parsed["mcq"]
        open_item = QAItem(id=f"{src}:open", framing=OPEN, question=o["question"], answer=o["answer"], **common)
        mcq_item = QAItem(id=f"{src}:mcq", framing=MCQ, question=m["question"], answer=m["answer"],
                          options=m["options"], **common)
    return FramingTriplet(open_item, yn_item, mcq_item, source_id=src, provenance=provenance)


def reframe_one(item: QAItem, index: int, config: ReframeConfig, client: ChatClient) -> FramingTriplet:
    """Prompt, call, parse and assemble one item. Raises ReframeParseError on a bad response."""
    if item.framing == YESNO:
        direction, prompt = "yesno", build_prompt(item, "yesno")
        provenance = "yesno->open,mcq"
    else:
        polarity = polarity_for(index, config.yn_polarity)
        if item.framing == MCQ:
            source = mcq_to_open(item)
            prompt = build_prompt(source, "open", polarity=polarity, options=item.options)
            provenance = f"mcq->open(rule); open->yesno({polarity}); mcq original"
        else:
            prompt = build_prompt(item, "open", polarity=polarity)
            provenance = f"open->yesno({polarity}),mcq"
        direction = "open"
    text = client.complete(prompt)
    parsed = parse_reframe_response(text, direction)
    try:
        return _assemble(item, parsed, direction, provenance)
    except FramingError as exc:
        raise ReframeParseError(str(exc)) from None


def reframe_dataset(
    items: Sequence[QAItem],
    config: ReframeConfig,
    client: ChatClient,
    journal_path: str | Path | None = None,
    drops: list[Drop] | None = None,
) -> list[FramingTriplet]:
    """Reframe every item into a triplet; malformed responses are dropped.

    Items already present in the journal are not re-sent. An
    :class:`EndpointError` aborts the run after journalling whatever finished.
    Returned triplets follow the input order.
    """
    journal = Journal(journal_path)
    drops = drops if drops is not None else []
    pending = [(i, it) for i, it in enumerate(items) if it.id not in journal.done]
    positions = {it.id: i for i, it in enumerate(items)}

    def record(item: QAItem, fut: Future) -> None:
        try:
            trip = fut.result()
        except _DROPPABLE as exc:
            log.warning("dropped %s: %s", item.id, exc)
            drops.append(Drop(item.id, str(exc)))
            journal.append({"id": item.id, "status": "dropped", "reason": str(exc)})
            return
        journal.append({"id": item.id, "status": "ok", "triplet": trip.to_dict()})

    failure: BaseException | None = None
    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        queue = iter(pending)
        running: dict[Future, QAItem] = {}

        def fill():
            while len(running) < config.max_concurrency and failure is None:
                nxt = next(queue, None)
                if nxt is None:
                    return
                i, it = nxt
                running[pool.submit(reframe_one, it, i, config, client)] = it

        fill()
        while running:
            finished, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in finished:
                it = running.pop(fut)
                exc = fut.exception()
                if exc is not None and not isinstance(exc, _DROPPABLE):
                    if failure is None:
                        failure = exc
                    continue
                record(it, fut)
            fill()
    if failure is not None:
        if isinstance(failure, EndpointError):
            raise failure
        raise EndpointError(f"reframing aborted: {failure!r}") from failure

    out = []
    for rec in sorted(journal.done.values(), key=lambda r: positions.get(r["id"], 1 << 30)):
        if rec["id"] in positions and rec["status"] == "ok":
            out.append(FramingTriplet.from_dict(rec["triplet"]))
    return out


def load_items(path: str | Path) -> list[QAItem]:
    with open(path, encoding="utf-8") as fh:
        return [QAItem.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_triplets(path: str | Path, triplets: Iterable[FramingTriplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_dict()) + "\n")


def load_triplets(path: str | Path) -> list[FramingTriplet]:
    with open(path, encoding="utf-8") as fh:
        return [FramingTriplet.from_dict(json.loads(line)) for line in fh if line.strip()]
