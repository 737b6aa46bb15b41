"""Causally-corrected attention rollout.

Each layer's attention ``W`` is mixed with the residual stream
(``A = 0.5 W + 0.5 I``), its key columns are scaled by the receptive-field
size of each key, rows are renormalised, and the result is left-multiplied
onto the running product::

    R0 = I
    Rl = normalize(Al @ diag(S)) @ R(l-1)

All arithmetic is float64 regardless of the capture dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateRowError, StackShapeError, StackValueError
from .layout import TokenLayout

ROW_TOL = 1e-6
DEGENERATE_FLOOR = 1e-12


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


@dataclass
class AttentionStack:
    """Attention captured from one forward pass.

    ``layers`` has shape ``(L, N, N)`` once heads are reduced, or
    ``(L, H, N, N)`` before.
    """

    layers: np.ndarray
    causal_mask: np.ndarray | None = None
    heads_reduced: bool = True

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float64)
        expected_ndim = 3 if self.heads_reduced else 4
        if self.layers.ndim != expected_ndim:
            raise StackShapeError(
                f"expected {expected_ndim}-d layers (heads_reduced={self.heads_reduced}), "
                f"got shape {self.layers.shape}"
            )
        n = self.layers.shape[-1]
        if self.layers.shape[-2] != n:
            raise StackShapeError(f"attention matrices must be square, got {self.layers.shape[-2:]}")
        if self.causal_mask is None:
            self.causal_mask = causal_mask(n)
        self.causal_mask = np.asarray(self.causal_mask, dtype=bool)
        if self.causal_mask.shape != (n, n):
            raise StackShapeError(f"mask shape {self.causal_mask.shape} does not match N={n}")

    @property
    def N(self) -> int:
        return self.layers.shape[-1]

    @property
    def L(self) -> int:
        return self.layers.shape[0]

    @property
    def H(self) -> int:
        return 1 if self.heads_reduced else self.layers.shape[1]

    @classmethod
    def from_heads(cls, per_layer_heads: Sequence[np.ndarray] | np.ndarray, mask=None) -> "AttentionStack":
        return cls(np.asarray(per_layer_heads, dtype=np.float64), mask, heads_reduced=False)

    def reduced(self) -> "AttentionStack":
        if self.heads_reduced:
            return self
        return AttentionStack(
            np.stack([head_reduce(list(layer)) for layer in self.layers]),
            self.causal_mask,
            heads_reduced=True,
        )

    def validate(self, tol: float = ROW_TOL) -> None:
        mask = self.causal_mask
        arr = self.layers
        if not np.all(np.isfinite(arr)):
            raise StackValueError("attention contains non-finite values")
        if np.any(arr < 0):
            raise StackValueError("attention contains negative weights")
        if np.any(arr[..., ~mask] != 0):
            raise StackValueError("masked attention entries must be exactly 0")
        sums = arr.sum(axis=-1)
        live = mask.any(axis=1)
        bad = np.abs(sums[..., live] - 1.0) > tol
        if np.any(bad):
            idx = np.argwhere(bad)[0]
            raise StackValueError(f"row does not sum to 1 at index {tuple(idx)}")


@dataclass
class RolloutResult:
    R_final: np.ndarray
    per_layer: list[np.ndarray] | None = None
    layout: TokenLayout | None = None
    layer_range: tuple[int, int] | None = field(default=None)


def receptive_field(mask: np.ndarray) -> np.ndarray:
    """Visible key count for each token (``j`` for a plain causal mask, 1-indexed)."""
    mask = np.asarray(mask, dtype=bool)
    return mask.sum(axis=1).astype(np.float64)


def head_reduce(per_head: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean over heads."""
    if len(per_head) == 0:
        raise StackShapeError("no heads to reduce")
    shapes = {np.shape(h) for h in per_head}
    if len(shapes) != 1:
        raise StackShapeError(f"heads have mismatched shapes {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 2 or shape[0] != shape[1]:
        raise StackShapeError(f"heads must be square matrices, got {shape}")
    return np.mean(np.asarray(per_head, dtype=np.float64), axis=0)


def adjust_residual(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise StackShapeError(f"expected a square matrix, got {W.shape}")
    return 0.5 * W + 0.5 * np.eye(W.shape[0])


def rf_normalize(A: np.ndarray, S: np.ndarray, *, layer: int | None = None) -> np.ndarray:
    """Scale key columns by ``S`` and renormalise rows."""
    A = np.asarray(A, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or S.shape != (A.shape[0],):
        raise StackShapeError(f"incompatible shapes A{A.shape}, S{S.shape}")
    scaled = A * S[None, :]
    sums = scaled.sum(axis=1, keepdims=True)
    low = np.nonzero(sums[:, 0] < DEGENERATE_FLOOR)[0]
    if low.size:
        where = f" at layer {layer}" if layer is not None else ""
        raise DegenerateRowError(
            f"row {int(low[0])} sums to {sums[low[0], 0]:.3g} after scaling{where}",
            layer=layer,
            row=int(low[0]),
        )
    return scaled / sums


def rollout(
    stack: AttentionStack,
    keep_intermediates: bool = False,
    *,
    layers: tuple[int, int] | None = None,
    receptive: np.ndarray | None = None,
    layout: TokenLayout | None = None,
    validate: bool = True,
) -> RolloutResult:
    """Roll the stack out over ``layers`` (half-open ``(first, stop)``, default all).

    ``receptive`` overrides the receptive-field vector; pass ``np.ones(N)`` to
    disable the causal-bias correction.
    """
    if not stack.heads_reduced:
        raise StackShapeError("reduce heads before rollout")
    if validate:
        stack.validate()
    n = stack.N
    S = receptive_field(stack.causal_mask) if receptive is None else np.asarray(receptive, float)
    first, stop = (0, stack.L) if layers is None else layers
    if not 0 <= first <= stop <= stack.L:
        raise StackShapeError(f"layer range {layers} outside 0..{stack.L}")

    R = np.eye(n)
    per_layer = [R.copy()] if keep_intermediates else None
    for ell in range(first, stop):
        B = rf_normalize(adjust_residual(stack.layers[ell]), S, layer=ell)
        R = B @ R
        if keep_intermediates:
            per_layer.append(R.copy())
    return RolloutResult(R, per_layer, layout, (first, stop))
