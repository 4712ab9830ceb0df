"""Binary face masks, the multi-resolution pyramid, and the attention mask.

Face boxes are grown by a configurable margin, rasterized to the full-image
grid, then max-pooled down to each attention stage's resolution so that even
small faces survive the coarsest level. The assembled query-by-key mask gives
text columns full visibility and gates each face block by that face's mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import BlockLayout, make_layout


@dataclass(frozen=True)
class FaceBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0}, {self.y0}, "
                             f"{self.x1}, {self.y1})")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0


@dataclass(frozen=True)
class SpatialMask:
    grid: np.ndarray          # [H x W] of {0, 1}, uint8
    face_index: int = 0

    def __post_init__(self):
        g = self.grid
        if g.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {g.shape}")
        if not np.isin(g, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class MaskPyramid:
    levels: dict[int, SpatialMask]   # resolution -> square mask


@dataclass(frozen=True)
class AttentionMask:
    """M: one row per query cell (row-major grid), one column per stack key."""

    values: np.ndarray        # [n_q x n_k] of {0.0, 1.0}
    layout: BlockLayout

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.layout.n_keys:
            raise ValueError(f"mask is {self.values.shape}, layout expects "
                             f"{self.layout.n_keys} key columns")

    @property
    def n_queries(self) -> int:
        return self.values.shape[0]


def expand_box(box: FaceBox, margin: float, bounds: tuple[int, int]) -> FaceBox:
    """Grow a box by `margin` of its size in total (half per side), clamp, round.

    Rounding is outward (floor the mins, ceil the maxes) so the grown box never
    shrinks below the exact expansion.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    h, w = bounds
    dx = (box.x1 - box.x0) * margin / 2.0
    dy = (box.y1 - box.y0) * margin / 2.0
    x0 = max(0.0, np.floor(box.x0 - dx))
    y0 = max(0.0, np.floor(box.y0 - dy))
    x1 = min(float(w), np.ceil(box.x1 + dx))
    y1 = min(float(h), np.ceil(box.y1 + dy))
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"box {box} is empty after clamping to {bounds}")
    return FaceBox(x0, y0, x1, y1)


def rasterize_mask(box: FaceBox, h: int, w: int, face_index: int = 0) -> SpatialMask:
    """1 exactly on cells whose centers fall inside the box (half-open)."""
    cx = np.arange(w) + 0.5
    cy = np.arange(h) + 0.5
    inside_x = (cx >= box.x0) & (cx < box.x1)
    inside_y = (cy >= box.y0) & (cy < box.y1)
    grid = (inside_y[:, None] & inside_x[None, :]).astype(np.uint8)
    return SpatialMask(grid, face_index)


def downsample_mask(mask: SpatialMask, target: int) -> SpatialMask:
    """Max-pool to target x target: a cell is 1 iff any covered cell is 1."""
    h, w = mask.grid.shape
    if h != w:
        raise ValueError(f"pyramid masks must be square, got {h} x {w}")
    if target < 1 or h % target:
        raise ValueError(f"resolution {h} is not an integer multiple of {target}")
    f = h // target
    out = mask.grid.reshape(target, f, target, f).max(axis=(1, 3))
    return SpatialMask(out, mask.face_index)


def build_pyramid(mask: SpatialMask, levels) -> MaskPyramid:
    """Downsample to every requested level."""
    return MaskPyramid({int(r): downsample_mask(mask, int(r)) for r in levels})


def box_mask_pyramid(box: FaceBox, margin: float, image_size: int, levels,
                     face_index: int = 0) -> MaskPyramid:
    """expand -> rasterize -> pyramid, the per-face pipeline used everywhere."""
    grown = expand_box(box, margin, (image_size, image_size))
    return build_pyramid(rasterize_mask(grown, image_size, image_size, face_index),
                         levels)


def assemble_attention_mask(text_tokens: int, block_size: int, masks,
                            n_queries: int | None = None) -> AttentionMask:
    """Build M at one level: text columns all ones, face blocks gated per mask.

    `masks` must be ordered exactly like the embedding stack's face blocks.
    With no faces the mask is all ones and `n_queries` must be given.
    """
    masks = list(masks)
    if masks:
        res = masks[0].grid.shape
        if any(m.grid.shape != res for m in masks):
            raise ValueError(f"masks disagree on resolution: "
                             f"{[m.grid.shape for m in masks]}")
        n_q = res[0] * res[1]
        if n_queries is not None and n_queries != n_q:
            raise ValueError(f"n_queries {n_queries} does not match mask "
                             f"resolution {res}")
    elif n_queries is None:
        raise ValueError("assemble_attention_mask needs n_queries when no "
                         "faces are present")
    else:
        n_q = int(n_queries)
    layout = make_layout(text_tokens, block_size, len(masks))
    cols = [np.ones((n_q, text_tokens))]
    for m in masks:
        flat = m.grid.reshape(-1).astype(np.float64)
        cols.append(np.repeat(flat[:, None], block_size, axis=1))
    return AttentionMask(np.concatenate(cols, axis=1), layout)


def all_ones_attention_mask(n_queries: int, layout: BlockLayout) -> AttentionMask:
    """Fully visible mask with the given layout (text-only or ablation runs)."""
    return AttentionMask(np.ones((n_queries, layout.n_keys)), layout)
