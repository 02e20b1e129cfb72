"""Cosine-similarity cost volumes and flow initialization.

Flow convention throughout the package: fields are anchored on the target
grid, I_tgt(i) ~ I_src(i + F(i)), with F stored as (2, h, w) = (u, v) in
pixel units of its own resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ShapeMismatch
from .ops import bilinear_gather


@dataclass
class FlowField:
    """Dense displacement map (2, h, w); index 0 is u (x), index 1 is v (y)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != 2:
            raise InvalidArgument(f"flow must be (2, h, w), got {self.values.shape}")

    @property
    def h(self) -> int:
        return self.values.shape[1]

    @property
    def w(self) -> int:
        return self.values.shape[2]

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.h, self.w)

    def copy(self) -> "FlowField":
        return FlowField(self.values.copy())


def require_same_resolution(a: FlowField, b: FlowField, what: str = "flow fields") -> None:
    if a.resolution != b.resolution:
        raise ShapeMismatch(f"{what}: resolution {a.resolution} vs {b.resolution}")


@dataclass(frozen=True)
class GlobalCost:
    """All-pairs cosine similarities C[hs, ws, ht, wt]."""

    values: np.ndarray

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.values.shape[2:]


@dataclass(frozen=True)
class LocalCost:
    """Window costs around the warped position, stored as (R*R, h, w).

    Channel o = oy * R + ox corresponds to the offset
    (ox - (R-1)/2, oy - (R-1)/2); the center offset is channel (R*R - 1) // 2.
    """

    values: np.ndarray
    radius: int


def global_cost(d_src: np.ndarray, d_tgt: np.ndarray) -> GlobalCost:
    """C(i, j) = <D_src(i), D_tgt(j)> over all location pairs."""
    if d_src.ndim != 3 or d_tgt.ndim != 3:
        raise InvalidArgument("descriptor maps must be (C, h, w)")
    if d_src.shape[0] != d_tgt.shape[0]:
        raise InvalidArgument(
            f"descriptor channels differ: {d_src.shape[0]} vs {d_tgt.shape[0]}"
        )
    return GlobalCost(np.tensordot(d_src, d_tgt, axes=(0, 0)))


def soft_argmax_flow(cost: GlobalCost, temperature: float = 0.02) -> FlowField:
    """Expected source position under softmax(C/temperature), minus target position."""
    if temperature <= 0:
        raise InvalidArgument("temperature must be positive")
    hs, ws = cost.source_shape
    ht, wt = cost.target_shape
    flat = cost.values.reshape(hs * ws, ht * wt) / temperature
    flat = flat - flat.max(axis=0, keepdims=True)
    w = np.exp(flat)
    w /= w.sum(axis=0, keepdims=True)
    sy, sx = np.meshgrid(np.arange(hs), np.arange(ws), indexing="ij")
    ex = (sx.reshape(-1, 1) * w).sum(axis=0).reshape(ht, wt)
    ey = (sy.reshape(-1, 1) * w).sum(axis=0).reshape(ht, wt)
    ty, tx = np.meshgrid(np.arange(ht), np.arange(wt), indexing="ij")
    return FlowField(np.stack([ex - tx, ey - ty]))


def argmax_flow(cost: GlobalCost) -> FlowField:
    """Hard argmax per target pixel; ties break to the lowest row-major index."""
    hs, ws = cost.source_shape
    ht, wt = cost.target_shape
    flat = cost.values.reshape(hs * ws, ht * wt)
    best = flat.argmax(axis=0)
    by, bx = np.divmod(best, ws)
    ty, tx = np.meshgrid(np.arange(ht), np.arange(wt), indexing="ij")
    u = bx.reshape(ht, wt) - tx
    v = by.reshape(ht, wt) - ty
    return FlowField(np.stack([u, v]).astype(np.float64))


def local_cost(
    d_src: np.ndarray, d_tgt: np.ndarray, f_init: FlowField, radius: int = 7
) -> LocalCost:
    """C^l(i, o) = <D_src at (i + F_init(i) + o), D_tgt(i)>, zero out of bounds."""
    if radius % 2 == 0 or radius < 1:
        raise InvalidArgument("search radius must be odd and positive")
    if d_src.shape[0] != d_tgt.shape[0]:
        raise InvalidArgument("descriptor channels differ")
    _, h, w = d_tgt.shape
    if f_init.resolution != (h, w):
        raise ShapeMismatch(
            f"f_init resolution {f_init.resolution} != descriptor grid {(h, w)}"
        )
    r = (radius - 1) // 2
    ty, tx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_x = tx + f_init.values[0]
    base_y = ty + f_init.values[1]
    offs = np.arange(-r, r + 1, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    cx = base_x[None] + ox.reshape(-1, 1, 1)  # (R*R, h, w)
    cy = base_y[None] + oy.reshape(-1, 1, 1)
    sampled, _, _ = bilinear_gather(d_src[None], cx[None], cy[None])
    # sampled: (1, R*R, h, w, C); contract against the target descriptor
    vals = np.einsum("ohwc,chw->ohw", sampled[0], d_tgt)
    return LocalCost(values=vals, radius=radius)
