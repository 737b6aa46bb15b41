"""Token layout of a multimodal sequence and bounding-box to patch mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import GeometryError, StackShapeError


@dataclass(frozen=True)
class Span:
    """Half-open index range ``[start, stop)``."""

    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop < self.start:
            raise ValueError(f"invalid span [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start

    def __iter__(self):
        return iter(range(self.start, self.stop))

    def __contains__(self, index: object) -> bool:
        return isinstance(index, (int, np.integer)) and self.start <= index < self.stop

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)

    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.stop)

    def shifted(self, k: int) -> "Span":
        return Span(self.start + k, self.stop + k)

    def to_list(self) -> list[int]:
        return [self.start, self.stop]

    @classmethod
    def of(cls, value: "Span | Iterable[int]") -> "Span":
        if isinstance(value, Span):
            return value
        start, stop = value
        return cls(int(start), int(stop))


_EMPTY = Span(0, 0)


@dataclass(frozen=True)
class TokenLayout:
    """Partition of a token sequence into image / question / instruction /
    soft-token / output segments.

    ``grid`` is ``(rows, cols)`` of the visual patch grid and ``image_size`` is
    ``(width, height)`` in pixels. Visual-token offsets are row-major within
    ``image_span``.
    """

    image_span: Span
    question_span: Span
    instruction_span: Span
    output_span: Span = _EMPTY
    soft_span: Span = _EMPTY
    grid: tuple[int, int] = (0, 0)
    image_size: tuple[int, int] = (0, 0)
    special: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for name in ("image_span", "question_span", "instruction_span", "output_span", "soft_span"):
            object.__setattr__(self, name, Span.of(getattr(self, name)))
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        rows, cols = self.grid
        if rows * cols != len(self.image_span):
            raise StackShapeError(
                f"grid {rows}x{cols} does not match {len(self.image_span)} image tokens"
            )
        spans = [s for s in self.spans().values() if len(s)]
        spans.sort(key=lambda s: s.start)
        for a, b in zip(spans, spans[1:]):
            if b.start < a.stop:
                raise StackShapeError(f"overlapping spans {a} and {b}")
        if len(self.output_span) and len(self.image_span):
            if self.output_span.start < self.image_span.stop:
                raise StackShapeError("output tokens must follow the image")

    def spans(self) -> dict[str, Span]:
        return {
            "image": self.image_span,
            "question": self.question_span,
            "instruction": self.instruction_span,
            "soft": self.soft_span,
            "output": self.output_span,
        }

    @property
    def n_image(self) -> int:
        return len(self.image_span)

    def end(self) -> int:
        """One past the last index covered by any span."""
        return max([s.stop for s in self.spans().values()] + [0])

    def validate(self, n_tokens: int) -> None:
        if self.end() > n_tokens:
            raise StackShapeError(f"layout extends to {self.end()} but sequence has {n_tokens} tokens")

    def with_output(self, span: Span | tuple[int, int]) -> "TokenLayout":
        return replace(self, output_span=Span.of(span))

    def to_dict(self) -> dict:
        return {
            "image_span": self.image_span.to_list(),
            "question_span": self.question_span.to_list(),
            "instruction_span": self.instruction_span.to_list(),
            "output_span": self.output_span.to_list(),
            "soft_span": self.soft_span.to_list(),
            "grid": list(self.grid),
            "image_size": list(self.image_size),
            "special": list(self.special),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenLayout":
        return cls(
            image_span=Span.of(d["image_span"]),
            question_span=Span.of(d["question_span"]),
            instruction_span=Span.of(d["instruction_span"]),
            output_span=Span.of(d.get("output_span", (0, 0))),
            soft_span=Span.of(d.get("soft_span", (0, 0))),
            grid=tuple(d["grid"]),
            image_size=tuple(d["image_size"]),
            special=tuple(d.get("special", ())),
        )


@dataclass(frozen=True)
class BoxRegion:
    bbox: tuple[float, float, float, float]
    patch_indices: frozenset[int]

    def __post_init__(self):
        if not self.patch_indices:
            raise GeometryError("box maps to no patches")

    def union(self, other: "BoxRegion") -> "BoxRegion":
        """Merge two regions (used for multi-box samples); keeps the first bbox."""
        return BoxRegion(self.bbox, self.patch_indices | other.patch_indices)


def map_bbox_to_patches(bbox, layout: TokenLayout, min_overlap: float = 0.5) -> BoxRegion:
    """Map a pixel bbox ``(x, y, w, h)`` onto visual-token offsets.

    A patch is in the box when at least ``min_overlap`` of its area intersects
    the bbox. If none qualifies, the patch containing the bbox centre is used.
    """
    x, y, w, h = (float(v) for v in bbox)
    width, height = layout.image_size
    rows, cols = layout.grid
    if rows <= 0 or cols <= 0 or width <= 0 or height <= 0:
        raise GeometryError("layout has no image geometry")
    eps = 1e-9
    if w <= 0 or h <= 0 or x < -eps or y < -eps or x + w > width + eps or y + h > height + eps:
        raise GeometryError(f"bbox {bbox} outside image of size {width}x{height}")

    pw, ph = width / cols, height / rows
    x_edges = np.arange(cols + 1) * pw
    y_edges = np.arange(rows + 1) * ph
    ox = np.clip(np.minimum(x_edges[1:], x + w) - np.maximum(x_edges[:-1], x), 0, None)
    oy = np.clip(np.minimum(y_edges[1:], y + h) - np.maximum(y_edges[:-1], y), 0, None)
    frac = np.outer(oy, ox) / (pw * ph)
    r_idx, c_idx = np.nonzero(frac >= min_overlap - 1e-12)
    patches = {int(r * cols + c) for r, c in zip(r_idx, c_idx)}
    if not patches:
        cx, cy = x + w / 2, y + h / 2
        c = min(int(math.floor(cx / pw)), cols - 1)
        r = min(int(math.floor(cy / ph)), rows - 1)
        patches = {r * cols + c}
    return BoxRegion((x, y, w, h), frozenset(patches))


def union_regions(regions: Iterable[BoxRegion]) -> BoxRegion:
    regions = list(regions)
    if not regions:
        raise GeometryError("no regions to merge")
    out = regions[0]
    for r in regions[1:]:
        out = out.union(r)
    return out
