"""Full pipeline on a user-supplied adapter, printed as metric tables.

This script is not part of the test suite. It exists so the numbers a real
7B-12B model produces can be compared by hand against the reference anchors
listed in the README. It needs a GPU-class machine and a factory returning a
:class:`framelens.harness.ModelAdapter` with at least ``tokenize_with_layout``,
``generate`` and ``forward_hooked``.

    python demos/real_adapter_report.py --adapter mypkg.adapters:qwen \\
        --items data/gqa_open.jsonl --out report/ [--responses canned.jsonl]

Without ``--responses`` the reframing step calls the chat endpoint named in
the ``reframe`` section of ``--config``.

Given ``--triplets`` instead of ``--items``, the reframing step is skipped.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from framelens.consistency import run_inconsistency, save_report, triplet_inconsistency
from framelens.errors import EmptyDenominatorError
from framelens.harness.cli import load_item_source, make_adapter, make_client
from framelens.harness.config import load_config
from framelens.metrics import StatRecord, framing_sweep, metric_record, write_records
from framelens.reframe import FramingTriplet, load_triplets
from framelens.steering import measure, multiplier_sweep, ratio_recovery

FRAMINGS = ("open", "yesno", "mcq")


def table(title: str, header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells[1:]]
    return "\n".join(lines)


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--adapter", required=True, help="<module>:<factory>")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--items", help="QAItem records (open-ended or MCQ origin)")
    src.add_argument("--triplets", help="already reframed FramingTriplet records")
    p.add_argument("--responses", help="canned reframing responses; default is the live endpoint")
    p.add_argument("--config")
    p.add_argument("--out", default="real-report")
    p.add_argument("--limit", type=int, default=200, help="triplets used for metrics and steering")
    p.add_argument("--mode", choices=("generate", "rank"), default="generate")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO)

    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adapter = make_adapter(args.adapter, config)

    report = None
    try:
        if args.items:
            args.toy = None
            items = load_item_source(args, config)
            report = run_inconsistency(items, adapter, make_client(args, config), args.mode,
                                       config=config.reframe, journal_path=out / "journal.jsonl")
        else:
            report = triplet_inconsistency(load_triplets(args.triplets), adapter, args.mode)
    except EmptyDenominatorError as exc:
        print(f"inconsistency rate undefined: {exc}\n")
    if report is not None:
        save_report(report, out / "inconsistency.json")
        print(report.format_text(), end="\n\n")
    if args.items:
        journal = [json.loads(l) for l in (out / "journal.jsonl").read_text().splitlines() if l.strip()]
        triplets = [FramingTriplet.from_dict(r["triplet"]) for r in journal if r["status"] == "ok"]
    else:
        triplets = load_triplets(args.triplets)

    triplets = triplets[: args.limit]
    stat_records = [StatRecord(t.source_id, f, measure(adapter, t[f]).stats) for t in triplets for f in FRAMINGS]
    write_records(out / "metrics.jsonl", [metric_record(r.sample_id, r.framing, r.stats) for r in stat_records])
    sweep = framing_sweep(stat_records, reference_framing="open")
    metrics = ("visual_energy", "box_attention", "entropy")
    rows = [[f] + [sweep.per_framing[f][m].mean for m in metrics] for f in FRAMINGS]
    print(table("attention by framing (means)", ["framing", "VE", "box", "entropy"], rows), end="\n\n")

    rec = [ratio_recovery(adapter, t.open, t[f]).relative_error for t in triplets for f in ("yesno", "mcq")]
    print(f"per-sample VE steering: median relative error vs open {np.median(rec):.2%}\n")

    rows = []
    for f in ("yesno", "mcq"):
        for kind in ("ve", "box"):
            s = multiplier_sweep(adapter, [t[f] for t in triplets], kind, config.steer["multipliers"])
            rows.append([f, kind] + s.accuracy)
            (out / f"sweep_{f}_{kind}.json").write_text(json.dumps(s.to_dict(), indent=2))
    header = ["framing", "kind"] + [f"m={m:g}" for m in config.steer["multipliers"]]
    print(table("accuracy under steering", header, rows))


if __name__ == "__main__":
    main()
