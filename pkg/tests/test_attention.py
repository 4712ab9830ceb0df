"""Masked cross-attention: reference equality, mask semantics, gradients."""

import numpy as np
import pytest

from facestack import tensor as tc
from facestack.attention import (AttentionParams, attention_concentration,
                                 masked_cross_attention)
from facestack.embedding import (EmbeddingStack, ProjectionParams, TextEmbedding,
                                 make_layout, project_face, stack_embeddings)
from facestack.masks import (AttentionMask, SpatialMask, all_ones_attention_mask,
                             assemble_attention_mask)
from helpers import make_feature


def reference_unmasked_attention(x, tokens, params):
    """Plain-numpy attention without the mask step, mirroring the kernel's
    operation order so bitwise comparison is meaningful."""
    q_all = x @ params.w_q.data
    k_all = tokens @ params.w_k.data
    v_all = tokens @ params.w_v.data
    inv = 1.0 / np.sqrt(params.d_head)
    heads = []
    for i in range(params.heads):
        lo, hi = i * params.d_head, (i + 1) * params.d_head
        q, k, v = q_all[:, lo:hi], k_all[:, lo:hi], v_all[:, lo:hi]
        logits = q @ np.ascontiguousarray(k.T)
        scaled = logits * inv
        e = np.exp(scaled - scaled.max(axis=1, keepdims=True))
        w = e / np.sort(e, axis=1).sum(axis=1, keepdims=True)
        prod = w[:, :, None] * v[None, :, :]
        prod.sort(axis=1)
        heads.append(prod.sum(axis=1))
    return np.concatenate(heads, axis=1) @ params.w_o.data


def random_setup(rng, n_q=6, t=3, n_faces=2, d_model=8, d_k=16, heads=2, d_head=3):
    x = tc.constant(rng.standard_normal((n_q, d_model)))
    text = TextEmbedding(tc.constant(rng.standard_normal((t, d_k))))
    proj = ProjectionParams.init(rng, 8, 4, d_k)
    blocks = [project_face(make_feature(rng, identity=f"id{i}"), proj)
              for i in range(n_faces)]
    stack = stack_embeddings(text, blocks)
    params = AttentionParams.init(rng, d_model, d_k, heads, d_head)
    return x, stack, params


def test_all_ones_mask_bitwise_equals_unmasked_reference():
    rng = np.random.default_rng(0)
    x, stack, params = random_setup(rng)
    mask = all_ones_attention_mask(x.shape[0], stack.layout)
    got = masked_cross_attention(x, stack, mask, params).out.data
    ref = reference_unmasked_attention(x.data, stack.tokens.data, params)
    assert np.array_equal(got, ref)


def test_rows_sum_to_one_masked_or_not():
    rng = np.random.default_rng(1)
    x, stack, params = random_setup(rng, n_q=4)
    grid_a = SpatialMask(np.array([[1, 1], [0, 0]], dtype=np.uint8), 0)
    grid_b = SpatialMask(np.array([[0, 0], [1, 0]], dtype=np.uint8), 1)
    mask = assemble_attention_mask(3, 5, [grid_a, grid_b])
    out = masked_cross_attention(x, stack, mask, params, retain_maps=True)
    for head_map in out.maps:
        np.testing.assert_allclose(head_map.data.sum(axis=1), 1.0, atol=1e-12)


def test_hand_evaluated_single_head_case():
    x = tc.constant([[1.0, 0.0]])
    stack = EmbeddingStack(tc.constant([[1.0, 0.0], [0.0, 1.0]]),
                           make_layout(2, 0, 0), ())
    params = AttentionParams(
        w_q=tc.constant(np.eye(2)), w_k=tc.constant(np.eye(2)),
        w_v=tc.constant([[1.0, 0.0], [0.0, 0.0]]),
        w_o=tc.constant([[1.0], [0.0]]), heads=1, d_head=2)
    mask = all_ones_attention_mask(1, stack.layout)
    out = masked_cross_attention(x, stack, mask, params, retain_maps=True)
    w1 = 1.0 / (1.0 + np.exp(-1.0 / np.sqrt(2.0)))
    np.testing.assert_allclose(out.maps[0].data, [[w1, 1 - w1]], atol=1e-12)
    np.testing.assert_allclose(out.maps[0].data, [[0.6698, 0.3302]], atol=1e-4)
    assert out.out.item() == pytest.approx(w1, abs=1e-12)


def test_fully_masked_query_row_is_uniform():
    rng = np.random.default_rng(2)
    x, stack, params = random_setup(rng, n_q=2)
    n_k = stack.layout.n_keys
    values = np.ones((2, n_k))
    values[1] = 0.0  # a raw mask row with nothing visible
    mask = AttentionMask(values, stack.layout)
    out = masked_cross_attention(x, stack, mask, params, retain_maps=True)
    for head_map in out.maps:
        np.testing.assert_array_equal(head_map.data[1], np.full(n_k, 1.0 / n_k))


def test_zero_masked_keys_get_identical_weight():
    rng = np.random.default_rng(3)
    x, stack, params = random_setup(rng, n_q=4, n_faces=3)
    grids = [np.zeros((2, 2), dtype=np.uint8) for _ in range(3)]
    grids[0][0, 0] = 1
    grids[1][1, 1] = 1
    grids[2][0, 1] = 1
    mask = assemble_attention_mask(3, 5, [SpatialMask(g, i)
                                          for i, g in enumerate(grids)])
    out = masked_cross_attention(x, stack, mask, params, retain_maps=True)
    for head_map in out.maps:
        for q in range(4):
            zeroed = head_map.data[q][mask.values[q] == 0.0]
            if zeroed.size:
                assert (zeroed == zeroed[0]).all()  # exact, not approximate


def test_joint_block_permutation_leaves_output_unchanged():
    rng = np.random.default_rng(4)
    for seed in range(5):
        r = np.random.default_rng(seed)
        x, stack, params = random_setup(r, n_q=9, n_faces=3)
        grids = [SpatialMask((r.random((3, 3)) < 0.4).astype(np.uint8), i)
                 for i in range(3)]
        mask = assemble_attention_mask(3, 5, grids)
        base = masked_cross_attention(x, stack, mask, params).out.data

        perm = rng.permutation(3)
        t, size = 3, stack.layout.block_size
        tok = stack.tokens.data
        rows = [tok[:t]] + [tok[t + p * size:t + (p + 1) * size] for p in perm]
        stack2 = EmbeddingStack(tc.constant(np.concatenate(rows)), stack.layout,
                                tuple(stack.identities[p] for p in perm))
        cols = [mask.values[:, :t]] + [mask.values[:, t + p * size:t + (p + 1) * size]
                                       for p in perm]
        mask2 = AttentionMask(np.concatenate(cols, axis=1), mask.layout)
        permed = masked_cross_attention(x, stack2, mask2, params).out.data
        assert np.array_equal(base, permed)


def test_additive_comparison_mode_excludes_keys():
    rng = np.random.default_rng(5)
    x, stack, params = random_setup(rng, n_q=4, n_faces=1)
    grid = SpatialMask(np.array([[1, 0], [0, 0]], dtype=np.uint8), 0)
    mask = assemble_attention_mask(3, 5, [grid])
    out = masked_cross_attention(x, stack, mask, params, retain_maps=True,
                                 mode="additive")
    for head_map in out.maps:
        masked_cols = head_map.data[1][mask.values[1] == 0.0]
        assert (masked_cols == 0.0).all()


def test_mask_values_outside_unit_interval_rejected():
    rng = np.random.default_rng(6)
    x, stack, params = random_setup(rng, n_q=2)
    bad = np.ones((2, stack.layout.n_keys))
    bad[0, 0] = 1.5
    with pytest.raises(ValueError):
        masked_cross_attention(x, stack, AttentionMask(bad, stack.layout), params)


def test_layout_mismatch_rejected():
    rng = np.random.default_rng(7)
    x, stack, params = random_setup(rng, n_q=2, n_faces=2)
    other = all_ones_attention_mask(2, make_layout(3, 5, 1))
    with pytest.raises(tc.ShapeError):
        masked_cross_attention(x, stack, other, params)


def test_gradients_reach_every_input():
    rng = np.random.default_rng(8)
    text = TextEmbedding(tc.constant(rng.standard_normal((2, 6))))
    tokens = tc.leaf(rng.standard_normal((4, 6)))
    stack = EmbeddingStack(tokens, make_layout(2, 2, 1), ("id0",))
    params = AttentionParams.init(rng, 5, 6, 2, 2)
    x = tc.leaf(rng.standard_normal((3, 5)))
    values = np.ones((3, 4))
    values[0, 2:] = 0.0
    out = masked_cross_attention(x, stack, AttentionMask(values, stack.layout), params)
    grads = tc.backward(tc.sum_all(out.out))
    for t in (x, tokens, params.w_q, params.w_k, params.w_v, params.w_o):
        assert t in grads and np.abs(grads[t]).max() > 0


def test_masked_row_still_feeds_value_gradient():
    # a fully masked query keeps uniform weights, so values still get gradient
    rng = np.random.default_rng(9)
    tokens = tc.leaf(rng.standard_normal((3, 6)))
    stack = EmbeddingStack(tokens, make_layout(3, 0, 0), ())
    params = AttentionParams.init(rng, 4, 6, 1, 3)
    x = tc.constant(rng.standard_normal((1, 4)))
    mask = AttentionMask(np.zeros((1, 3)), stack.layout)
    out = masked_cross_attention(x, stack, mask, params)
    grads = tc.backward(tc.sum_all(out.out))
    assert np.abs(grads[tokens]).max() > 0


def grad_check_attention(seed):
    rng = np.random.default_rng(seed)
    t, block, n_faces = 2, 2, 1
    n_q, d_model, d_k, heads, d_head = 3, 4, 5, 2, 2
    layout = make_layout(t, block, n_faces)
    tokens0 = rng.standard_normal((layout.n_keys, d_k))
    x0 = rng.standard_normal((n_q, d_model))
    mask_values = (rng.random((n_q, layout.n_keys)) < 0.6).astype(float)
    mask_values[:, :t] = 1.0
    weights = {
        "w_q": rng.standard_normal((d_model, heads * d_head)) * 0.4,
        "w_k": rng.standard_normal((d_k, heads * d_head)) * 0.4,
        "w_v": rng.standard_normal((d_k, heads * d_head)) * 0.4,
        "w_o": rng.standard_normal((heads * d_head, d_model)) * 0.4,
    }
    probe = tc.constant(rng.standard_normal((n_q, d_model)))

    def run(x, tokens, wq, wk, wv, wo):
        stack = EmbeddingStack(tokens, layout, ("id0",))
        params = AttentionParams(wq, wk, wv, wo, heads, d_head)
        out = masked_cross_attention(x, stack,
                                     AttentionMask(mask_values, layout), params)
        return tc.sum_all(tc.hadamard(out.out, probe))

    cases = {
        "x": (x0, lambda v: run(v, tc.constant(tokens0), *map(tc.constant, weights.values()))),
        "tokens": (tokens0, lambda v: run(tc.constant(x0), v, *map(tc.constant, weights.values()))),
    }
    for name in weights:
        def f(v, _name=name):
            args = [tc.constant(weights[k]) if k != _name else v for k in weights]
            return run(tc.constant(x0), tc.constant(tokens0), *args)
        cases[name] = (weights[name], f)

    worst = 0.0
    for name, (value, f) in cases.items():
        err = tc.grad_check(f, tc.constant(value), h=1e-6)
        worst = max(worst, err)
    return worst


def test_attention_grad_check_ten_seeds():
    worst = max(grad_check_attention(seed) for seed in range(10))
    assert worst < 1e-5, f"max rel err {worst}"


def test_frozen_params_zero_loss_zero_grads():
    rng = np.random.default_rng(10)
    x, stack, params2 = random_setup(rng, n_q=2)
    w = tc.leaf(rng.standard_normal((2, 8)))
    loss = tc.sum_all(tc.scale(tc.hadamard(w, w), 0.0))
    grads = tc.backward(loss)
    assert (grads[w] == 0.0).all()


# ---------------------------------------------------------------------------
# concentration statistics

def test_concentration_empty_without_faces():
    assert attention_concentration([], make_layout(3, 0, 0), []) == []


def test_concentration_single_face_full_mask():
    layout = make_layout(2, 2, 1)
    maps = [np.full((4, 4), 0.25)]
    stats = attention_concentration(maps, layout, [np.ones(4, dtype=bool)])
    assert len(stats) == 1
    s = stats[0]
    assert s.query_count == 4
    assert s.own_mass == pytest.approx(0.5)
    assert s.text_mass == pytest.approx(0.5)
    assert s.foreign_mass == 0.0


def test_concentration_routing_is_visible():
    layout = make_layout(1, 2, 2)
    # query 0 belongs to face 0 and pours mass on block 0; query 1 vice versa
    maps = [np.array([[0.0, 0.45, 0.45, 0.05, 0.05],
                      [0.0, 0.05, 0.05, 0.45, 0.45]])]
    rows = [np.array([True, False]), np.array([False, True])]
    stats = attention_concentration(maps, layout, rows)
    for s in stats:
        assert s.own_mass == pytest.approx(0.9)
        assert s.foreign_mass == pytest.approx(0.1)
