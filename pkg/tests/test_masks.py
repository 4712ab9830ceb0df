"""Mask pipeline: margin expansion, rasterization, pyramid, assembled mask."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facestack import tensor as tc
from facestack.embedding import (ProjectionParams, TextEmbedding, make_layout,
                                 project_face, stack_embeddings)
from facestack.masks import (FaceBox, SpatialMask,
                             all_ones_attention_mask, assemble_attention_mask,
                             box_mask_pyramid, build_pyramid, downsample_mask,
                             expand_box, rasterize_mask)
from helpers import make_feature, random_box


def brute_force_pool(grid, target):
    """Independent oracle: scan every source block for any set cell."""
    f = grid.shape[0] // target
    out = np.zeros((target, target), dtype=np.uint8)
    for i in range(target):
        for j in range(target):
            if grid[i * f:(i + 1) * f, j * f:(j + 1) * f].sum() > 0:
                out[i, j] = 1
    return out


# ---------------------------------------------------------------------------
# expand / rasterize

def test_expand_box_quarter_margin():
    grown = expand_box(FaceBox(100, 100, 200, 200), 0.25, (512, 512))
    assert (grown.x0, grown.y0, grown.x1, grown.y1) == (87, 87, 213, 213)


def test_expand_box_zero_margin_unchanged():
    box = FaceBox(10, 20, 30, 44)
    grown = expand_box(box, 0.0, (64, 64))
    assert (grown.x0, grown.y0, grown.x1, grown.y1) == (10, 20, 30, 44)


def test_expand_box_clamps_at_corner():
    grown = expand_box(FaceBox(0, 0, 10, 10), 1.0, (32, 32))
    assert grown.x0 == 0 and grown.y0 == 0
    assert grown.x1 <= 32 and grown.y1 <= 32


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        FaceBox(5, 5, 5, 9)


def test_rasterize_full_image_box():
    mask = rasterize_mask(FaceBox(0, 0, 8, 8), 8, 8)
    assert mask.grid.all()


def test_rasterize_top_left_quadrant():
    mask = rasterize_mask(FaceBox(0, 0, 2, 2), 4, 4)
    want = np.zeros((4, 4), dtype=np.uint8)
    want[:2, :2] = 1
    np.testing.assert_array_equal(mask.grid, want)


def test_rasterize_uses_cell_centers():
    # box covering only the center cell's midpoint
    mask = rasterize_mask(FaceBox(1.2, 1.2, 1.8, 1.8), 3, 3)
    assert mask.grid.sum() == 1 and mask.grid[1, 1] == 1


# ---------------------------------------------------------------------------
# pyramid

def test_downsample_single_set_cell():
    grid = np.zeros((4, 4), dtype=np.uint8)
    grid[3, 0] = 1
    out = downsample_mask(SpatialMask(grid), 2)
    np.testing.assert_array_equal(out.grid, [[0, 0], [1, 0]])


def test_downsample_all_ones():
    mask = SpatialMask(np.ones((16, 16), dtype=np.uint8))
    for level in (8, 4, 2, 1):
        assert downsample_mask(mask, level).grid.all()


def test_downsample_rejects_non_divisible():
    with pytest.raises(ValueError):
        downsample_mask(SpatialMask(np.ones((16, 16), dtype=np.uint8)), 3)


def test_small_face_survives_to_coarsest_level():
    # 10x10-pixel face at 512 still sets at least one cell at 8x8
    mask = rasterize_mask(FaceBox(301, 150, 311, 160), 512, 512)
    pyr = build_pyramid(mask, [64, 32, 16, 8])
    for level, m in pyr.levels.items():
        assert m.grid.any(), f"face lost at level {level}"
    np.testing.assert_array_equal(pyr.levels[8].grid,
                                  brute_force_pool(mask.grid, 8))


def test_downsample_matches_brute_force_oracle_100_boxes():
    rng = np.random.default_rng(42)
    for _ in range(100):
        mask = rasterize_mask(random_box(rng, 512), 512, 512)
        for level in (64, 32, 16, 8):
            got = downsample_mask(mask, level).grid
            np.testing.assert_array_equal(got, brute_force_pool(mask.grid, level))


def test_pyramid_levels_present():
    mask = rasterize_mask(FaceBox(100, 100, 200, 200), 512, 512)
    assert sorted(build_pyramid(mask, [64, 32, 16, 8]).levels) == [8, 16, 32, 64]
    desk = rasterize_mask(FaceBox(4, 4, 10, 10), 16, 16)
    assert sorted(build_pyramid(desk, [16, 8, 4, 2]).levels) == [2, 4, 8, 16]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12),
       st.integers(1, 6), st.integers(1, 6))
def test_enlarging_a_box_never_clears_a_cell(x0, y0, w, h, dx, dy):
    size = 32
    box = FaceBox(x0, y0, min(size, x0 + w), min(size, y0 + h))
    bigger = FaceBox(max(0, box.x0 - dx), max(0, box.y0 - dy),
                     min(size, box.x1 + dx), min(size, box.y1 + dy))
    for level in (32, 16, 8, 4):
        small = downsample_mask(rasterize_mask(box, size, size), level).grid
        large = downsample_mask(rasterize_mask(bigger, size, size), level).grid
        assert (large >= small).all()


# ---------------------------------------------------------------------------
# assembled attention mask

def test_assemble_hand_case():
    # T=2, one face, L=1 (block 2), level 2x2, mask [[1,0],[0,0]]
    grid = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    m = assemble_attention_mask(2, 2, [SpatialMask(grid)])
    want = np.array([[1, 1, 1, 1],
                     [1, 1, 0, 0],
                     [1, 1, 0, 0],
                     [1, 1, 0, 0]], dtype=float)
    np.testing.assert_array_equal(m.values, want)


def test_assemble_no_faces_all_ones():
    m = assemble_attention_mask(3, 0, [], n_queries=4)
    assert m.values.shape == (4, 3)
    assert m.values.all()


def test_text_columns_always_ones():
    rng = np.random.default_rng(9)
    masks = [rasterize_mask(random_box(rng, 16), 16, 16, i) for i in range(3)]
    small = [downsample_mask(m, 8) for m in masks]
    m = assemble_attention_mask(5, 5, small)
    assert m.values[:, :5].all()


def test_disjoint_faces_never_share_query_rows():
    rng = np.random.default_rng(10)
    for _ in range(25):
        a = random_box(rng, 32, min_side=4)
        # place b in the half of the image a does not touch
        if a.x1 <= 16:
            b = FaceBox(a.x1 + 1, 0, 32, 32)
        elif a.x0 >= 16:
            b = FaceBox(0, 0, a.x0 - 1, 32)
        else:
            continue
        ma = rasterize_mask(a, 32, 32, 0)
        mb = rasterize_mask(b, 32, 32, 1)
        m = assemble_attention_mask(2, 3, [ma, mb])
        block_a = m.values[:, 2:5].max(axis=1)
        block_b = m.values[:, 5:8].max(axis=1)
        assert not ((block_a > 0) & (block_b > 0)).any()


def test_layout_congruence_with_stack():
    rng = np.random.default_rng(11)
    p = ProjectionParams.init(rng, 8, 4, 16)
    text = TextEmbedding(tc.constant(rng.standard_normal((4, 16))))
    for n in range(9):
        blocks = []
        masks = []
        for i in range(n):
            blocks.append(project_face(make_feature(rng, identity=f"id{i}"), p))
            masks.append(downsample_mask(rasterize_mask(random_box(rng, 16), 16, 16, i), 8))
        stack = stack_embeddings(text, blocks)
        if n:
            m = assemble_attention_mask(4, 5, masks)
        else:
            m = assemble_attention_mask(4, 0, [], n_queries=64)
        assert m.layout == stack.layout
        assert m.values.shape[1] == stack.tokens.shape[0]


def test_assemble_rejects_mixed_resolutions():
    a = SpatialMask(np.ones((4, 4), dtype=np.uint8))
    b = SpatialMask(np.ones((8, 8), dtype=np.uint8))
    with pytest.raises(ValueError):
        assemble_attention_mask(2, 2, [a, b])


def test_box_mask_pyramid_margin_pipeline():
    pyr = box_mask_pyramid(FaceBox(4, 4, 8, 8), 0.25, 16, [16, 8, 4, 2])
    base = pyr.levels[16].grid
    assert base[4:8, 4:8].all()
    assert base[3, 3] == 1  # margin grew the box outward
    assert sorted(pyr.levels) == [2, 4, 8, 16]


def test_all_ones_mask_helper():
    layout = make_layout(4, 5, 2)
    m = all_ones_attention_mask(9, layout)
    assert m.values.shape == (9, 14)
    assert m.values.all()
