"""On-disk attention dumps.

A dump is a directory with ``meta.json`` and one raw little-endian float32
file per layer, ``layer_<l>``, holding a row-major ``(H, N, N)`` array.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import DumpFormatError, FrameLensError
from ..layout import TokenLayout
from ..rollout import AttentionStack, causal_mask

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")
_REQUIRED = ("format_version", "model_id", "N", "L", "H", "dtype", "layout", "mask")


def _check_partition(layout: TokenLayout, n: int) -> None:
    covered = np.zeros(n, dtype=int)
    for span in layout.spans().values():
        if span.stop > n:
            raise DumpFormatError(f"span {span} extends past N={n}")
        covered[span.slice] += 1
    for i in layout.special:
        if not 0 <= i < n:
            raise DumpFormatError(f"special index {i} outside 0..{n - 1}")
        covered[i] += 1
    if np.any(covered != 1):
        bad = np.nonzero(covered != 1)[0][:5].tolist()
        raise DumpFormatError(f"spans and special tokens must partition [0, N); bad positions {bad}")


def save_dump(stack: AttentionStack, layout: TokenLayout, meta: dict[str, Any] | None, directory) -> Path:
    """Write ``stack`` (per-head or reduced) and its layout to ``directory``."""
    meta = dict(meta or {})
    directory = Path(directory)
    n, L = stack.N, stack.L
    layers = stack.layers if not stack.heads_reduced else stack.layers[:, None]
    H = layers.shape[1]
    _check_partition(layout, n)
    directory.mkdir(parents=True, exist_ok=True)
    is_causal = np.array_equal(stack.causal_mask, causal_mask(n))
    mask_desc = {"type": "causal"} if is_causal else {"type": "explicit", "file": "mask"}
    if not is_causal:
        np.packbits(stack.causal_mask, axis=None).tofile(directory / "mask")
    record = {
        "format_version": FORMAT_VERSION,
        "model_id": meta.pop("model_id", "unknown"),
        "N": n, "L": L, "H": H,
        "dtype": "float32",
        "layout": layout.to_dict(),
        "mask": mask_desc,
        "prompt": meta.pop("prompt", ""),
        "framing": meta.pop("framing", None),
        "extra": meta,
    }
    for ell in range(L):
        np.ascontiguousarray(layers[ell], dtype=_DTYPE).tofile(directory / f"layer_{ell}")
    (directory / "meta.json").write_text(json.dumps(record, indent=2), encoding="utf-8")
    return directory


def load_dump(directory) -> tuple[AttentionStack, TokenLayout, dict]:
    """Read a dump back as a per-head float64 stack; shapes are checked against the meta record."""
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DumpFormatError(f"cannot read meta.json in {directory}: {exc}") from None
    missing = [k for k in _REQUIRED if k not in meta]
    if missing:
        raise DumpFormatError(f"meta.json lacks {missing}")
    if meta["format_version"] > FORMAT_VERSION:
        raise DumpFormatError(f"dump format {meta['format_version']} is newer than supported {FORMAT_VERSION}")
    if meta["dtype"] != "float32":
        raise DumpFormatError(f"unsupported dtype {meta['dtype']!r}")
    n, L, H = int(meta["N"]), int(meta["L"]), int(meta["H"])
    files = sorted(directory.glob("layer_*"))
    if len(files) != L:
        raise DumpFormatError(f"meta says L={L} but found {len(files)} layer files")
    layers = np.empty((L, H, n, n), dtype=np.float64)
    for ell in range(L):
        path = directory / f"layer_{ell}"
        if not path.exists():
            raise DumpFormatError(f"missing {path.name}")
        raw = np.fromfile(path, dtype=_DTYPE)
        if raw.size != H * n * n:
            raise DumpFormatError(f"{path.name} holds {raw.size} values, expected H*N*N = {H * n * n}")
        layers[ell] = raw.reshape(H, n, n)
    if meta["mask"].get("type") == "causal":
        mask = causal_mask(n)
    else:
        bits = np.fromfile(directory / meta["mask"]["file"], dtype=np.uint8)
        mask = np.unpackbits(bits, count=n * n).reshape(n, n).astype(bool)
    try:
        layout = TokenLayout.from_dict(meta["layout"])
    except (FrameLensError, KeyError, TypeError) as exc:
        raise DumpFormatError(f"invalid layout in meta.json: {exc}") from None
    _check_partition(layout, n)
    try:
        stack = AttentionStack(layers, mask, heads_reduced=False)
    except FrameLensError as exc:
        raise DumpFormatError(str(exc)) from None
    return stack, layout, meta
