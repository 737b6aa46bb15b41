"""Framing-dependent visual attention: capture, rollout, metrics, steering and tuning.

Every invocation writes ``manifest.json`` into ``--out-dir`` describing the
command, its arguments, the resolved configuration and the files produced.
Library errors exit with status 1; argument errors exit with status 2.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import __version__
from ..errors import CapabilityError, ConfigError, FrameLensError
from ..reframe.items import FRAMINGS, FramingTriplet, QAItem

log = logging.getLogger("framelens")


class Run:
    """Collects outputs for the manifest."""

    def __init__(self, args: argparse.Namespace, config):
        self.args = args
        self.config = config
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p))
        return p

    def write_json(self, name: str, data) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(data, indent=2, default=_json_default), encoding="utf-8")
        return p

    def write_jsonl(self, name: str, records) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r, default=_json_default) + "\n")
        return p


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _emit(record) -> None:
    print(json.dumps(record, default=_json_default))


# -- adapters and data ---------------------------------------------------------

def make_adapter(spec: str, config):
    """``toy``, ``scripted:<answers.json>`` or ``<module>:<factory>``."""
    if spec == "toy":
        from .toy import ToyAdapter

        return ToyAdapter(config.toy)
    kind, _, rest = spec.partition(":")
    if kind == "scripted":
        from .scripted import ScriptedAdapter

        if not rest:
            raise ConfigError("scripted adapter needs a path: scripted:<file.json>")
        from .config import read_mapping

        data = read_mapping(rest)
        unknown = set(data) - {"answers", "scores", "default"}
        if unknown:
            raise ConfigError(f"unknown keys in scripted adapter file: {', '.join(sorted(unknown))}")
        return ScriptedAdapter(data.get("answers"), data.get("scores"), data.get("default", ""))
    if not rest:
        raise ConfigError(f"adapter spec {spec!r} is not 'toy', 'scripted:<path>' or '<module>:<factory>'")
    try:
        factory = getattr(importlib.import_module(kind), rest)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load adapter factory {spec!r}: {exc}") from None
    return factory()


def _read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def load_triplet_source(args, config) -> list[FramingTriplet]:
    if getattr(args, "triplets", None):
        return [FramingTriplet.from_dict(d) for d in _read_jsonl(args.triplets)]
    if getattr(args, "toy", None):
        from .toy import toy_triplets

        return toy_triplets(args.toy, seed=config.seed, image_side=config.toy.grid * config.toy.pixel_size)
    raise ConfigError("give --triplets or --toy")


def load_item_source(args, config) -> list[QAItem]:
    if getattr(args, "items", None):
        return [QAItem.from_dict(d) for d in _read_jsonl(args.items)]
    return [it for t in load_triplet_source(args, config) for it in (t.open, t.yesno, t.mcq)]


def make_client(args, config):
    from ..reframe.client import CannedClient, HTTPChatClient

    if args.responses:
        canned = {}
        for rec in _read_jsonl(args.responses):
            if "question" not in rec or "response" not in rec:
                raise ConfigError(f"{args.responses}: each line needs 'question' and 'response'")
            canned[rec["question"]] = rec["response"]
        return CannedClient(canned)
    return HTTPChatClient(config.reframe)


def _dump_dirs(args) -> list[Path]:
    dirs = [Path(d) for d in args.dump or []]
    if getattr(args, "dump_root", None):
        dirs += sorted(p.parent for p in Path(args.dump_root).glob("*/meta.json"))
    if not dirs:
        raise ConfigError("give --dump (repeatable) or --dump-root")
    return dirs


def _region_from_meta(layout, meta: dict):
    from ..layout import map_bbox_to_patches, union_regions

    bbox = meta.get("extra", {}).get("bbox")
    if bbox is None:
        return None
    boxes = bbox if isinstance(bbox[0], (list, tuple)) else [bbox]
    return union_regions(map_bbox_to_patches(b, layout) for b in boxes)


def _stats_for_dump(directory: Path, config, layers=None):
    from ..metrics import compute_stats, detect_sinks
    from ..rollout import rollout
    from .dump import load_dump

    stack, layout, meta = load_dump(directory)
    result = rollout(stack.reduced(), keep_intermediates=True, layout=layout, layers=layers)
    sinks = detect_sinks(result.R_final, layout, z=config.metrics["sink_z"])
    stats = compute_stats(result, layout, region=_region_from_meta(layout, meta), sinks=sinks)
    return result, layout, meta, stats, sinks


def _sample_id(meta: dict, directory: Path) -> str:
    return str(meta.get("extra", {}).get("sample_id") or directory.name)


# -- subcommands ---------------------------------------------------------------

def cmd_capture(args, run: Run) -> None:
    from .adapter import CAP_HOOKS, CAP_TOKENIZE, require, supports
    from .dump import save_dump

    adapter = make_adapter(args.adapter, run.config)
    require(adapter, CAP_TOKENIZE)
    items = load_item_source(args, run.config)
    if args.framing:
        items = [it for it in items if it.framing in args.framing]
    written = []
    for item in items:
        enc = adapter.tokenize_with_layout(item)
        if supports(adapter, CAP_HOOKS):
            gen = adapter.forward_hooked(enc, None, max_tokens=args.max_tokens)
        else:
            gen = adapter.generate(enc, max_tokens=args.max_tokens)
        if gen.attention is None:
            raise CapabilityError(f"{type(adapter).__name__} did not return attention for {item.id}")
        source_id = item.id.split(":")[0]
        meta = {
            "model_id": getattr(adapter, "model_id", "unknown"), "prompt": enc.text, "framing": item.framing,
            "sample_id": source_id, "item_id": item.id, "instruction": "default",
            "prediction": gen.text, "gold": item.gold, "bbox": item.bbox,
        }
        name = item.id.replace(":", "_").replace("/", "_")
        directory = save_dump(gen.attention, gen.layout, meta, run.out_dir / "dumps" / name)
        if enc.image is not None:
            np.save(directory / "image.npy", np.asarray(enc.image))
        run.outputs.append(str(directory))
        written.append(str(directory))
    run.summary["dumps"] = len(written)
    print(f"wrote {len(written)} dumps under {run.out_dir / 'dumps'}")


def cmd_rollout(args, run: Run) -> None:
    from ..metrics import metric_record

    layers = tuple(int(x) for x in args.layers.split(":")) if args.layers else None
    records = []
    for d in _dump_dirs(args):
        result, layout, meta, stats, sinks = _stats_for_dump(d, run.config, layers)
        rec = metric_record(_sample_id(meta, d), meta.get("framing"), stats, dump=str(d),
                            layers=list(result.layer_range), sinks=sorted(sinks))
        records.append(rec)
        _emit(rec)
        if args.save_matrix:
            np.save(run.path(f"rollout_{d.name}.npy"), result.R_final)
    run.write_jsonl("rollout.jsonl", records)
    run.summary["records"] = len(records)


def cmd_metrics(args, run: Run) -> None:
    from ..metrics import StatRecord, framing_sweep, metric_record

    records, stat_records = [], []
    for d in _dump_dirs(args):
        _, _, meta, stats, _ = _stats_for_dump(d, run.config)
        instruction = meta.get("extra", {}).get("instruction", "default")
        sid = _sample_id(meta, d)
        stat_records.append(StatRecord(sid, meta.get("framing"), stats, instruction))
        records.append(metric_record(sid, meta.get("framing"), stats, instruction=instruction, dump=str(d)))
    run.write_jsonl("metrics.jsonl", records)
    present = [f for f in FRAMINGS if any(r.framing == f for r in stat_records)]
    framings = args.framings or present
    reference = args.reference_framing or run.config.metrics["reference_framing"]
    if reference not in framings:
        reference = framings[0]
    summary = framing_sweep(stat_records, framings, reference_framing=reference).to_dict()
    run.write_json("sweep.json", summary)
    run.summary["records"] = len(records)
    _emit(summary)


def cmd_plot(args, run: Run) -> None:
    from .dump import load_dump
    from .plotting import attention_grid, plot_attention, plot_trajectories, shared_bounds

    loaded = []
    for d in _dump_dirs(args):
        result, layout, meta, stats, _ = _stats_for_dump(d, run.config)
        image = np.load(d / "image.npy") if (d / "image.npy").exists() and not args.no_image else None
        loaded.append((d, result, layout, meta, stats, image))
    bounds = shared_bounds([attention_grid(r.R_final, lay) for _, r, lay, *_ in loaded]) if args.shared else (None, None)
    infos = []
    for d, result, layout, meta, stats, image in loaded:
        if image is not None and tuple(image.shape[:2][::-1]) != tuple(layout.image_size):
            image = np.kron(image, np.ones((layout.image_size[1] // image.shape[0],
                                           layout.image_size[0] // image.shape[1])))
        out = run.path(f"attention_{d.name}.png")
        run.outputs.append(str(out) + ".json")
        title = f"{meta.get('framing')}  VE={stats.visual_energy:.3f}"
        infos.append(plot_attention(result.R_final, layout, image, out, *bounds, title=title, k=args.k).to_dict())
    # one mean curve per framing keeps the legend readable for large dump sets
    by_framing: dict[str, list[list[float]]] = {}
    for _, _, _, m, s, _ in loaded:
        if s.per_layer:
            by_framing.setdefault(str(m.get("framing")), []).append(s.per_layer["visual_energy"])
    series = {f"{f} (n={len(v)})": np.mean(v, axis=0).tolist()
              for f, v in by_framing.items() if len({len(x) for x in v}) == 1}
    if series:
        plot_trajectories(series, run.path("trajectories.png"))
    run.summary["plots"] = infos
    _emit({"plots": infos})


def cmd_reframe(args, run: Run) -> None:
    from ..reframe.pipeline import Drop, reframe_dataset, save_triplets

    items = [QAItem.from_dict(d) for d in _read_jsonl(args.items)]
    client = make_client(args, run.config)
    journal = Path(args.journal) if args.journal else run.out_dir / "journal.jsonl"
    drops: list[Drop] = []
    triplets = reframe_dataset(items, run.config.reframe, client, journal_path=journal, drops=drops)
    save_triplets(run.path("triplets.jsonl"), triplets)
    run.write_jsonl("drops.jsonl", [asdict(d) for d in drops])
    run.outputs.append(str(journal))
    run.summary.update(items=len(items), triplets=len(triplets), dropped=len(drops))
    print(f"{len(triplets)} triplets from {len(items)} items ({len(drops)} dropped this run)")


def cmd_inconsistency(args, run: Run) -> None:
    from ..consistency import plot_report, run_inconsistency, save_report, triplet_inconsistency

    adapter = make_adapter(args.adapter, run.config)
    if args.triplets or args.toy:
        report = triplet_inconsistency(load_triplet_source(args, run.config), adapter, args.mode, args.max_tokens)
    elif args.items:
        items = [QAItem.from_dict(d) for d in _read_jsonl(args.items)]
        journal = Path(args.journal) if args.journal else run.out_dir / "journal.jsonl"
        report = run_inconsistency(items, adapter, make_client(args, run.config), args.mode,
                                   config=run.config.reframe, journal_path=journal, max_tokens=args.max_tokens)
    else:
        raise ConfigError("give --items (with --responses or an endpoint), --triplets or --toy")
    out = run.path("report.json")
    save_report(report, out)
    plot_report(report, run.path("report.png"))
    run.summary.update(report.to_dict())
    print(report.format_text())


def cmd_steer(args, run: Run) -> None:
    from ..steering import SteeringSpec, _placeholder_box, measure, multiplier_sweep, ratio_recovery

    adapter = make_adapter(args.adapter, run.config)
    triplets = load_triplet_source(args, run.config)
    framings = args.framing or ["yesno", "mcq"]
    kind = args.kind or run.config.steer["kind"]
    max_tokens = args.max_tokens or run.config.steer["max_tokens"]
    if args.sweep is not None:
        mults = args.sweep or run.config.steer["multipliers"]
        items = [getattr(t, f) for t in triplets for f in framings]
        result = multiplier_sweep(adapter, items, kind, mults, max_tokens=max_tokens)
        run.write_jsonl("steer_records.jsonl", result.records)
        summary = {k: v for k, v in result.to_dict().items() if k != "records"}
        run.write_json("sweep.json", summary)
        from .plotting import plot_sweep

        plot_sweep(result.multipliers, result.accuracy, run.path("sweep_accuracy.png"))
        plot_sweep(result.multipliers, result.visual_energy, run.path("sweep_ve.png"), ylabel="visual energy")
        run.summary.update(summary)
        _emit(summary)
        return
    records = []
    for t in triplets:
        for f in framings:
            item = getattr(t, f)
            if args.multiplier is not None:
                box = _placeholder_box(adapter, item) if kind == "box" else None
                out = measure(adapter, item, SteeringSpec(kind, args.multiplier, box=box), max_tokens=max_tokens)
                rec = {"item_id": item.id, "multiplier": args.multiplier, "prediction": out.prediction,
                       **out.stats.to_dict()}
            else:
                rec = ratio_recovery(adapter, t.open, item, kind, max_tokens=max_tokens).to_dict()
            records.append(rec)
            _emit(rec)
    run.write_jsonl("steer_records.jsonl", records)
    run.summary["records"] = len(records)
    if args.multiplier is None and records:
        errs = [r["relative_error"] for r in records]
        run.summary.update(mean_relative_error=float(np.mean(errs)), max_relative_error=float(np.max(errs)))


def cmd_tune(args, run: Run) -> None:
    from ..tuner import train

    cfg = run.config.train
    triplets = load_triplet_source(args, run.config)
    ckpt_dir = run.out_dir / "checkpoints" if args.checkpoint else None
    cfg = replace(cfg, seed=run.config.seed, log_path=str(run.out_dir / "train_log.jsonl"),
                  checkpoint_dir=str(ckpt_dir) if ckpt_dir else None)
    run.outputs.append(cfg.log_path)
    heldout = None
    if args.heldout:
        heldout = [FramingTriplet.from_dict(d) for d in _read_jsonl(args.heldout)]
    adapter = make_adapter(args.adapter, run.config)
    before = adapter.parameters_hash()
    result = train(adapter, triplets, cfg, heldout=heldout, resume_from=args.resume, stop_after=args.stop_after)
    after = adapter.parameters_hash()
    if before != after:
        raise FrameLensError("model parameters changed during tuning")
    result.prompts.save(run.path("prompts.pt"))
    if result.checkpoint:
        run.outputs.append(str(result.checkpoint))
    aligns = [r["align"] for r in result.log if "align" in r]
    run.summary.update(steps=result.steps_done, total_steps=result.total_steps, skipped=result.skipped,
                       stopped_early=result.stopped_early, finished=result.finished, parameters_hash=after,
                       config_hash=cfg.hash(), first_align=aligns[0] if aligns else None,
                       last_align=aligns[-1] if aligns else None)
    _emit(run.summary)


# -- parser --------------------------------------------------------------------

def _add_adapter(p) -> None:
    p.add_argument("--adapter", default="toy", help="toy | scripted:<file.json> | <module>:<factory>")


def _add_triplet_source(p, items: bool = False) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--triplets", help="line-delimited FramingTriplet records")
    g.add_argument("--toy", type=int, metavar="N", help="generate N templated toy triplets")
    if items:
        g.add_argument("--items", help="line-delimited QAItem records")


def _add_dumps(p) -> None:
    p.add_argument("--dump", action="append", metavar="DIR", help="attention dump directory (repeatable)")
    p.add_argument("--dump-root", metavar="DIR", help="use every dump directory directly under DIR")


def _add_reframe_source(p) -> None:
    p.add_argument("--responses", help="offline canned responses, one {question, response} object per line")
    p.add_argument("--journal", help="progress journal path (default: <out-dir>/journal.jsonl)")


def _multipliers(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framelens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"framelens {__version__}")
    parser.add_argument("--config", help="YAML or JSON run configuration")
    parser.add_argument("--seed", type=int, help="run seed (data generation, prompt init, shuffling)")
    parser.add_argument("--out-dir", default="framelens-out", help="directory for outputs and manifest.json")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("capture", help="run an adapter and write attention dumps")
    _add_adapter(p)
    _add_triplet_source(p, items=True)
    p.add_argument("--framing", action="append", choices=FRAMINGS)
    p.add_argument("--max-tokens", type=int, default=8)
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("rollout", help="roll out dumped attention and emit stats records")
    _add_dumps(p)
    p.add_argument("--layers", help="half-open layer range first:stop")
    p.add_argument("--save-matrix", action="store_true", help="also save R_final as .npy")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("metrics", help="metric records and the per-framing sweep summary")
    _add_dumps(p)
    p.add_argument("--framings", nargs="+", choices=FRAMINGS)
    p.add_argument("--reference-framing", choices=FRAMINGS)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("plot", help="attention heatmaps with shared colour bounds")
    _add_dumps(p)
    p.add_argument("--k", type=int, default=3, help="number of top patches to outline")
    p.add_argument("--no-shared", dest="shared", action="store_false", help="per-figure colour bounds")
    p.add_argument("--no-image", action="store_true", help="do not draw the stored image underneath")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("reframe", help="reframe QA items into framing triplets")
    p.add_argument("--items", required=True, help="line-delimited QAItem records")
    _add_reframe_source(p)
    p.set_defaults(func=cmd_reframe)

    p = sub.add_parser("inconsistency", help="cross-framing inconsistency report")
    _add_adapter(p)
    _add_triplet_source(p, items=True)
    _add_reframe_source(p)
    p.add_argument("--mode", choices=("generate", "rank"), default="generate")
    p.add_argument("--max-tokens", type=int, default=8)
    p.set_defaults(func=cmd_inconsistency)

    p = sub.add_parser("steer", help="VE or box steering of constrained framings")
    _add_adapter(p)
    _add_triplet_source(p)
    p.add_argument("--kind", choices=("ve", "box"))
    g = p.add_mutually_exclusive_group()
    g.add_argument("--multiplier", type=float, help="one global multiplier")
    g.add_argument("--from-open", action="store_true", help="per-sample ratio from a paired open pass (default)")
    g.add_argument("--sweep", type=_multipliers, nargs="?", const=[], metavar="M1,M2,...",
                   help="accuracy and VE over multipliers (default list from config)")
    p.add_argument("--framing", action="append", choices=("yesno", "mcq"))
    p.add_argument("--max-tokens", type=int)
    p.set_defaults(func=cmd_steer)

    p = sub.add_parser("tune", help="train soft prompts with the alignment objective")
    _add_adapter(p)
    _add_triplet_source(p)
    p.add_argument("--heldout", help="held-out triplets for eval and early stopping")
    p.add_argument("--checkpoint", action="store_true", help="write resumable checkpoints")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_tune)
    return parser


def _config_snapshot(config) -> dict:
    return {
        "seed": config.seed, "toy": asdict(config.toy), "train": config.train.to_dict(),
        "train_hash": config.train.hash(), "reframe": asdict(config.reframe),
        "steer": config.steer, "metrics": config.metrics, "source": config.source,
    }


def main(argv: Sequence[str] | None = None) -> int:
    from .config import load_config

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "steer" and args.sweep is not None and 0 < len(args.sweep) < 3:
        parser.error("--sweep needs at least 3 multipliers")
    started = time.time()
    status, error, code = "ok", None, 0
    run = None
    try:
        config = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
        run = Run(args, config)
        args.func(args, run)
    except FrameLensError as exc:
        status, error, code = "error", f"{type(exc).__name__}: {exc}", 1
        print(f"error: {error}", file=sys.stderr)
    finally:
        if run is not None:
            manifest = {
                "tool": "framelens", "version": __version__, "command": args.command,
                "argv": list(argv if argv is not None else sys.argv[1:]),
                "arguments": {k: v for k, v in vars(args).items() if k != "func"},
                "config": _config_snapshot(run.config), "status": status, "error": error,
                "started": started, "elapsed_s": time.time() - started,
                "outputs": run.outputs, "summary": run.summary,
            }
            (run.out_dir / "manifest.json").write_text(
                json.dumps(manifest, indent=2, default=_json_default), encoding="utf-8")
    return code


if __name__ == "__main__":
    sys.exit(main())
