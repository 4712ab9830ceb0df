"""Pose-control raster: skeleton strokes for every face, circles for stacked ones.

Every annotated face contributes its keypoint skeleton to the control image,
whether or not its embedding is stacked; only stacked (circled) faces get a
colored disc at their center, and the disc color indexes the stacking slot so
the model can tie a face position to a stack position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# eight distinct slot colors, RGB in [0, 1]
PALETTE = (
    (1.0, 0.15, 0.15),
    (0.15, 1.0, 0.15),
    (0.2, 0.35, 1.0),
    (1.0, 1.0, 0.2),
    (1.0, 0.3, 1.0),
    (0.2, 1.0, 1.0),
    (1.0, 0.6, 0.15),
    (0.7, 0.7, 0.7),
)


@dataclass(frozen=True)
class PoseControl:
    image: np.ndarray               # [H x W x 3]
    keypoints: tuple                # one keypoint tuple per face
    circled: frozenset              # face indices whose centers are circled


def _draw_line(img, x0, y0, x1, y1, value):
    """Bresenham stroke, white; endpoints clamped to the raster."""
    h, w, _ = img.shape
    x0, y0 = int(round(x0)), int(round(y0))
    x1, y1 = int(round(x1)), int(round(y1))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= y0 < h and 0 <= x0 < w:
            img[y0, x0] = value
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _draw_disc(img, cx, cy, radius, color):
    h, w, _ = img.shape
    ys, xs = np.ogrid[:h, :w]
    hit = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    img[hit] = color


def render_pose_control(face_keypoints, circled, h: int, w: int,
                        colors=None) -> PoseControl:
    """Rasterize the control image.

    face_keypoints: per face, a sequence of (x, y, confidence) points whose
    first point is the face center. Points with zero confidence are skipped.
    circled: face indices whose embeddings are stacked, in stacking order;
    the palette slot defaults to that order. colors optionally overrides the
    per-face palette slot, which lets a caller keep a face's color fixed
    while reordering the stack.
    """
    circled_order = list(circled)
    circled = frozenset(circled_order)
    if len(circled) != len(circled_order):
        raise ValueError("circled contains duplicate face indices")
    if not circled <= set(range(len(face_keypoints))):
        raise ValueError(f"circled {sorted(circled)} not a subset of "
                         f"faces 0..{len(face_keypoints) - 1}")
    img = np.zeros((h, w, 3))
    for points in face_keypoints:
        live = [(x, y) for x, y, conf in points if conf > 0.0]
        if not live:
            continue
        cx, cy = live[0]
        for x, y in live[1:]:
            _draw_line(img, cx, cy, x, y, (1.0, 1.0, 1.0))
        if len(live) == 1 and 0 <= int(round(cy)) < h and 0 <= int(round(cx)) < w:
            img[int(round(cy)), int(round(cx))] = (1.0, 1.0, 1.0)

    radius = max(1, min(h, w) // 16)
    if colors is None:
        colors = {face: slot for slot, face in enumerate(circled_order)}
    for face in circled_order:
        points = face_keypoints[face]
        if not points:
            continue
        cx, cy = points[0][0], points[0][1]
        _draw_disc(img, cx, cy, radius, PALETTE[colors[face] % len(PALETTE)])
    return PoseControl(img, tuple(tuple(map(tuple, p)) for p in face_keypoints),
                       circled)
