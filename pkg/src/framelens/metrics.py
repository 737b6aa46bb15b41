"""Visual-engagement metrics computed from a rollout.

All metrics read the rows of ``R_final`` that belong to the output (query)
tokens and the columns that belong to the image (key) tokens.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateQuartileError,
    EmptyQueryError,
    GroupingError,
    InsufficientSampleError,
    ZeroVisualMassError,
)
from .layout import BoxRegion, TokenLayout
from .rollout import RolloutResult

FRAMINGS = ("open", "yesno", "mcq")


@dataclass
class VisualStats:
    visual_energy: float
    box_attention: float | None = None
    sink_attention: float | None = None
    entropy: float | None = None
    per_layer: dict[str, list[float | None]] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "VisualStats":
        return cls(**{k: d.get(k) for k in ("visual_energy", "box_attention", "sink_attention", "entropy", "per_layer")})


def _matrix(R) -> np.ndarray:
    return R.R_final if isinstance(R, RolloutResult) else np.asarray(R, dtype=np.float64)


def _visual_block(R, layout: TokenLayout) -> np.ndarray:
    if len(layout.output_span) == 0:
        raise EmptyQueryError("layout has no output (query) tokens")
    return _matrix(R)[layout.output_span.slice, layout.image_span.slice]


def visual_mass_per_token(R, layout: TokenLayout) -> np.ndarray:
    """Output-row-averaged rollout mass on each image token (not normalised)."""
    return _visual_block(R, layout).mean(axis=0)


def visual_distribution(R, layout: TokenLayout) -> np.ndarray:
    mass = visual_mass_per_token(R, layout)
    total = mass.sum()
    if total <= 0:
        raise ZeroVisualMassError("no rollout mass on image tokens")
    return mass / total


def visual_energy(R, layout: TokenLayout) -> float:
    """Mean over output rows of the rollout mass on image columns."""
    return float(_visual_block(R, layout).sum(axis=1).mean())


def _within_image_fraction(R, layout: TokenLayout, offsets: Iterable[int]) -> float:
    block = _visual_block(R, layout)
    total = block.sum(axis=1).mean()
    if total <= 0:
        raise ZeroVisualMassError("no rollout mass on image tokens")
    idx = np.fromiter(sorted(set(int(o) for o in offsets)), dtype=int)
    if idx.size == 0:
        return 0.0
    if idx.min() < 0 or idx.max() >= block.shape[1]:
        raise IndexError("offset outside the image span")
    if idx.size == block.shape[1]:
        return 1.0  # the whole image; avoids a rounding gap between two summation orders
    inside = block[:, idx].sum(axis=1).mean()
    return float(min(1.0, inside / total))


def box_attention(R, layout: TokenLayout, region: BoxRegion) -> float:
    """Share of visual rollout mass that falls inside the box."""
    return _within_image_fraction(R, layout, region.patch_indices)


def sink_attention(R, layout: TokenLayout, sink: Iterable[int]) -> float:
    return _within_image_fraction(R, layout, sink)


def detect_sinks(R, layout: TokenLayout, z: float = 3.0, leave_one_out: bool = True) -> set[int]:
    """Flag image tokens whose mass exceeds ``mean + z * std`` of the others.

    With ``leave_one_out`` each token is compared against the statistics of
    the remaining tokens; a plain z-score caps the attainable score at
    ``(P - 1) / sqrt(P)`` and cannot flag a single outlier among few patches.
    """
    mass = visual_mass_per_token(R, layout)
    return _outliers(mass, z, leave_one_out)


def _outliers(mass: np.ndarray, z: float, leave_one_out: bool) -> set[int]:
    p = mass.size
    if p < 2:
        return set()
    tol = 1e-12 * max(1.0, float(np.abs(mass).max()))
    if not leave_one_out:
        thr = mass.mean() + z * mass.std()
        return {int(i) for i in np.nonzero(mass > thr + tol)[0]}
    total, total_sq = mass.sum(), np.square(mass).sum()
    rest_mean = (total - mass) / (p - 1)
    rest_var = np.clip((total_sq - mass**2) / (p - 1) - rest_mean**2, 0, None)
    thr = rest_mean + z * np.sqrt(rest_var)
    return {int(i) for i in np.nonzero(mass > thr + tol)[0]}


def attention_entropy(R, layout: TokenLayout) -> float:
    """Shannon entropy (nats) of the averaged visual distribution."""
    p = visual_distribution(R, layout)
    nz = p[p > 0]
    return float(max(0.0, -(nz * np.log(nz)).sum()))


def quartiles(values: Sequence[float]) -> tuple[float, float]:
    # type-7 linear interpolation between order statistics (numpy's default),
    # i.e. the median is included in both halves
    q1, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 75], method="linear")
    return float(q1), float(q3)


def cqv(values: Sequence[float]) -> float:
    """Coefficient of quartile variation ``(Q3 - Q1) / (Q3 + Q1)``."""
    if len(values) < 4:
        raise InsufficientSampleError(f"cqv needs at least 4 values, got {len(values)}")
    q1, q3 = quartiles(values)
    if q1 + q3 == 0:
        raise DegenerateQuartileError("Q1 + Q3 = 0")
    return (q3 - q1) / (q3 + q1)


def compute_stats(
    result: RolloutResult,
    layout: TokenLayout | None = None,
    region: BoxRegion | None = None,
    sinks: Iterable[int] | None = None,
    *,
    per_layer: bool = True,
) -> VisualStats:
    """Full metric record for one sample.

    ``sinks`` defaults to :func:`detect_sinks` on the final rollout. Layer-wise
    series are filled when the rollout kept its intermediates.
    """
    layout = layout or result.layout
    if layout is None:
        raise ValueError("a TokenLayout is required")
    R = result.R_final
    if sinks is None:
        sinks = detect_sinks(R, layout)
    sinks = set(sinks)

    def one(mat) -> dict[str, float | None]:
        ve = visual_energy(mat, layout)
        if visual_mass_per_token(mat, layout).sum() <= 0:
            return {"visual_energy": ve, "box_attention": None, "sink_attention": None, "entropy": None}
        return {
            "visual_energy": ve,
            "box_attention": box_attention(mat, layout, region) if region is not None else None,
            "sink_attention": sink_attention(mat, layout, sinks),
            "entropy": attention_entropy(mat, layout),
        }

    final = one(R)
    series = None
    if per_layer and result.per_layer:
        rows = [one(m) for m in result.per_layer[1:]]
        series = {k: [r[k] for r in rows] for k in final}
    return VisualStats(**final, per_layer=series)


@dataclass
class MetricSummary:
    n: int
    mean: float
    median: float
    q1: float
    q3: float


def _summary(values: Sequence[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    q1, q3 = quartiles(arr)
    return MetricSummary(int(arr.size), float(arr.mean()), float(np.median(arr)), q1, q3)


METRIC_NAMES = ("visual_energy", "box_attention", "sink_attention", "entropy")


@dataclass
class StatRecord:
    """One sample's statistics tagged with its question framing and instruction."""

    sample_id: str
    framing: str
    stats: VisualStats
    instruction: str = "default"


@dataclass
class SweepSummary:
    per_framing: dict[str, dict[str, MetricSummary]]
    deltas: dict[str, dict[str, float]]
    cqv: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_framing": {f: {m: asdict(s) for m, s in d.items()} for f, d in self.per_framing.items()},
            "deltas": self.deltas,
            "cqv": self.cqv,
        }


def framing_sweep(
    records: Sequence[StatRecord],
    framings: Sequence[str] = FRAMINGS,
    *,
    reference_framing: str | None = None,
    reference_instruction: str = "default",
) -> SweepSummary:
    """Per-framing metric distributions plus question- and instruction-axis CQV.

    Question axis: records whose instruction equals ``reference_instruction``
    (question framing varies). Instruction axis: records whose framing equals
    ``reference_framing`` (instruction varies). CQV is taken over the pooled
    per-record values on each axis; ``None`` marks an axis with too few values.
    Deltas are group means minus the reference framing's mean.
    """
    groups: dict[str, list[StatRecord]] = defaultdict(list)
    for r in records:
        groups[r.framing].append(r)
    missing = [f for f in framings if f not in groups]
    if missing:
        raise GroupingError(f"no records for framing(s) {missing}")
    reference_framing = reference_framing or framings[0]

    per_framing: dict[str, dict[str, MetricSummary]] = {}
    for f in framings:
        per_framing[f] = {}
        for m in METRIC_NAMES:
            vals = [getattr(r.stats, m) for r in groups[f] if getattr(r.stats, m) is not None]
            if vals:
                per_framing[f][m] = _summary(vals)

    ref = per_framing[reference_framing]
    deltas = {
        f: {m: s.mean - ref[m].mean for m, s in per_framing[f].items() if m in ref}
        for f in framings
    }

    def axis(selected: list[StatRecord]) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for m in ("visual_energy", "box_attention"):
            vals = [getattr(r.stats, m) for r in selected if getattr(r.stats, m) is not None]
            try:
                out[m] = cqv(vals)
            except (InsufficientSampleError, DegenerateQuartileError):
                out[m] = None
        return out

    in_scope = [r for r in records if r.framing in framings]
    q_axis = [r for r in in_scope if r.instruction == reference_instruction]
    i_axis = [r for r in in_scope if r.framing == reference_framing]
    return SweepSummary(per_framing, deltas, {"question": axis(q_axis), "instruction": axis(i_axis)})


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_records(path: str | Path, records: Iterable[Mapping], mode: str = "w") -> None:
    """Write line-delimited JSON, one object per line."""
    with open(path, mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=_json_default, allow_nan=True) + "\n")


def read_records(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def metric_record(sample_id: str, framing: str, stats: VisualStats, **extra) -> dict:
    rec = {"sample_id": sample_id, "framing": framing, **stats.to_dict(), **extra}
    for k, v in list(rec.items()):
        if isinstance(v, float) and math.isnan(v):
            rec[k] = None
    return rec
