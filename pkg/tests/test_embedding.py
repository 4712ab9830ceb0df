"""Embedding stack: block shapes, row-count law, ordering, projection algebra."""

import numpy as np
import pytest

from facestack import tensor as tc
from facestack.tensor import ShapeError
from facestack.embedding import (FaceFeature, ProjectionParams, TextEmbedding,
                                 hash_text_tokens, make_layout, project_face,
                                 stack_embeddings)
from helpers import make_feature


def test_block_shape_paper_dims():
    rng = np.random.default_rng(0)
    f = make_feature(rng, d_gf=512, d_lf=256, grid_l=7)
    p = ProjectionParams.init(rng, 512, 256, 768)
    assert project_face(f, p).tokens.shape == (50, 768)


def test_zero_feature_zero_bias_gives_zero_block():
    rng = np.random.default_rng(1)
    p = ProjectionParams.init(rng, 8, 4, 16)
    f = FaceFeature(tc.constant(np.zeros((1, 8))), tc.constant(np.zeros((4, 4))), "z")
    block = project_face(f, p)
    assert not block.tokens.data.any()


def test_degenerate_local_grid():
    rng = np.random.default_rng(2)
    f = make_feature(rng, grid_l=1)
    p = ProjectionParams.init(rng, 8, 4, 16)
    assert project_face(f, p).tokens.shape == (2, 16)


def test_global_token_is_row_zero():
    rng = np.random.default_rng(3)
    f = make_feature(rng)
    p = ProjectionParams.init(rng, 8, 4, 16)
    block = project_face(f, p)
    want = f.global_vec.data @ p.w_global.data + p.b_global.data
    np.testing.assert_allclose(block.tokens.data[:1], want, atol=1e-12)


def test_projection_linearity_with_zero_bias():
    rng = np.random.default_rng(4)
    p = ProjectionParams.init(rng, 8, 4, 16)  # biases start at zero
    f = make_feature(rng)
    scaled = FaceFeature(tc.scale(f.global_vec, 2.5), tc.scale(f.local_grid, 2.5),
                         f.identity)
    a = project_face(f, p).tokens.data
    b = project_face(scaled, p).tokens.data
    np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12)


def test_row_count_law():
    rng = np.random.default_rng(5)
    text = TextEmbedding(tc.constant(rng.standard_normal((77, 768))))
    p = ProjectionParams.init(rng, 512, 256, 768)
    for n in range(9):
        blocks = [project_face(make_feature(rng, 512, 256, 7, f"id{i}"), p)
                  for i in range(n)]
        stack = stack_embeddings(text, blocks)
        assert stack.tokens.shape[0] == 77 + n * 50
        assert stack.layout.n_keys == 77 + n * 50
    # the scalability case: seven identities
    blocks = [project_face(make_feature(rng, 512, 256, 7, f"id{i}"), p)
              for i in range(7)]
    assert stack_embeddings(text, blocks).tokens.shape[0] == 427


def test_empty_block_list_is_pure_text():
    rng = np.random.default_rng(6)
    text = TextEmbedding(tc.constant(rng.standard_normal((5, 16))))
    stack = stack_embeddings(text, [])
    assert stack.tokens is text.tokens
    assert stack.layout == make_layout(5, 0, 0)


def test_order_sensitivity_permutes_blocks_only():
    rng = np.random.default_rng(7)
    text = TextEmbedding(tc.constant(rng.standard_normal((3, 16))))
    p = ProjectionParams.init(rng, 8, 4, 16)
    blocks = [project_face(make_feature(rng, identity=f"id{i}"), p) for i in range(3)]
    a = stack_embeddings(text, blocks)
    b = stack_embeddings(text, [blocks[2], blocks[0], blocks[1]])
    t = 3
    size = a.layout.block_size
    np.testing.assert_array_equal(a.tokens.data[:t], b.tokens.data[:t])
    np.testing.assert_array_equal(b.tokens.data[t:t + size],
                                  a.tokens.data[t + 2 * size:t + 3 * size])
    assert b.identities == ("id2", "id0", "id1")


def test_width_mismatch_rejected():
    rng = np.random.default_rng(8)
    text = TextEmbedding(tc.constant(rng.standard_normal((3, 16))))
    p = ProjectionParams.init(rng, 8, 4, 12)
    with pytest.raises(ShapeError):
        stack_embeddings(text, [project_face(make_feature(rng), p)])


def test_text_embedding_requires_tokens():
    with pytest.raises(ShapeError):
        TextEmbedding(tc.constant(np.zeros((0, 16))))


def test_feature_validation():
    with pytest.raises(ShapeError):
        FaceFeature(tc.constant(np.zeros((2, 8))), tc.constant(np.zeros((4, 4))), "x")
    with pytest.raises(ShapeError):
        FaceFeature(tc.constant(np.zeros((1, 8))), tc.constant(np.zeros((3, 4))), "x")


def test_hash_text_tokens_deterministic_and_distinct():
    a = hash_text_tokens("two people at the beach", 4, 16)
    b = hash_text_tokens("two people at the beach", 4, 16)
    c = hash_text_tokens("one person indoors", 4, 16)
    np.testing.assert_array_equal(a.tokens.data, b.tokens.data)
    assert not np.array_equal(a.tokens.data, c.tokens.data)
    assert a.tokens.shape == (4, 16)
