"""Static figures: attention heatmaps over the image and layer-wise trajectories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import GeometryError
from ..layout import TokenLayout
from ..metrics import visual_mass_per_token


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


@dataclass
class PlotInfo:
    path: Path
    vmin: float
    vmax: float
    top: list[int]  # row-major patch offsets, strongest first

    def to_dict(self) -> dict:
        return {"path": str(self.path), "vmin": self.vmin, "vmax": self.vmax, "top": self.top}


def attention_grid(R, layout: TokenLayout) -> np.ndarray:
    """Output-row-averaged visual attention reshaped to the patch grid."""
    rows, cols = layout.grid
    return visual_mass_per_token(R, layout).reshape(rows, cols)


def top_patches(grid: np.ndarray, k: int = 3) -> list[int]:
    """Offsets of the ``k`` largest cells; ties go to the lower offset."""
    flat = grid.ravel()
    return np.argsort(-flat, kind="stable")[:k].tolist()


def _check_image(image: np.ndarray | None, layout: TokenLayout) -> None:
    if image is None:
        return
    h, w = image.shape[:2]
    if layout.image_size != (0, 0) and (w, h) != tuple(layout.image_size):
        raise GeometryError(f"image is {w}x{h} but layout expects {layout.image_size[0]}x{layout.image_size[1]}")
    rows, cols = layout.grid
    if h % rows or w % cols:
        raise GeometryError(f"image {w}x{h} is not divisible into a {rows}x{cols} grid")


def plot_attention(R, layout: TokenLayout, image: np.ndarray | None, out_path, vmin: float | None = None,
                   vmax: float | None = None, title: str | None = None, k: int = 3, alpha: float = 0.6) -> PlotInfo:
    """Heatmap of visual attention over ``image`` with the top-``k`` patches outlined.

    Pass the same ``vmin``/``vmax`` to every figure of a comparison set; the
    bounds used are written next to the image as ``<out>.json``.
    """
    rows, cols = layout.grid
    if rows * cols != layout.n_image:
        raise GeometryError(f"grid {rows}x{cols} does not match {layout.n_image} image tokens")
    image = None if image is None else np.asarray(image)
    _check_image(image, layout)
    grid = attention_grid(R, layout)
    lo = float(grid.min()) if vmin is None else float(vmin)
    hi = float(grid.max()) if vmax is None else float(vmax)
    if hi <= lo:
        hi = lo + 1e-12
    top = top_patches(grid, k)

    plt = _pyplot()
    from matplotlib.patches import Rectangle

    if image is not None:
        h, w = image.shape[:2]
    else:
        h, w = rows, cols
    fig, ax = plt.subplots(figsize=(4, 4 * h / w))
    if image is not None:
        ax.imshow(image, cmap="gray" if image.ndim == 2 else None, extent=(0, w, h, 0))
    im = ax.imshow(grid, cmap="jet", vmin=lo, vmax=hi, alpha=alpha if image is not None else 1.0,
                   extent=(0, w, h, 0), interpolation="nearest")
    ph, pw = h / rows, w / cols
    for off in top:
        r, c = divmod(off, cols)
        ax.add_patch(Rectangle((c * pw, r * ph), pw, ph, fill=False, edgecolor="red", linewidth=2))
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    info = PlotInfo(out_path, lo, hi, top)
    out_path.with_suffix(out_path.suffix + ".json").write_text(json.dumps(info.to_dict()), encoding="utf-8")
    return info


def shared_bounds(grids: Sequence[np.ndarray]) -> tuple[float, float]:
    return float(min(g.min() for g in grids)), float(max(g.max() for g in grids))


def plot_trajectories(series: Mapping[str, Sequence[float]], out_path, ylabel: str = "visual energy",
                      title: str | None = None) -> Path:
    """One line per label over layer index."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2), layout="constrained")
    for label, ys in series.items():
        ax.plot(range(1, len(ys) + 1), ys, marker="o", label=label)
    ax.xaxis.get_major_locator().set_params(integer=True)
    ax.set_xlabel("layer")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_sweep(multipliers: Sequence[float], values: Sequence[float], out_path, ylabel: str = "accuracy",
               title: str | None = None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2), layout="constrained")
    ax.plot(multipliers, values, marker="o")
    ax.set_xlabel("multiplier")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
