"""Masked multi-head cross-attention.

The mask multiplies the query-key logits elementwise BEFORE the softmax, so a
masked-out key is not excluded: its logit becomes exactly zero and it keeps
the e^0 baseline weight. That multiplicative behaviour is the defining
property of this kernel; within any query row, every zero-masked key receives
bit-identical weight. An additive large-negative variant exists purely as a
labeled comparison mode and is off by default.

Reductions across the key axis (the softmax normalizer and the weights-times-
values product) accumulate in sorted order, so the output is bitwise invariant
under any joint permutation of stack rows and mask columns. Jointly permuting
face blocks therefore cannot change the result, exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor, ShapeError
from .embedding import BlockLayout, EmbeddingStack
from .masks import AttentionMask

ADDITIVE_NEG = -1e9   # finite stand-in for -inf in the comparison mode


@dataclass
class AttentionParams:
    w_q: Tensor    # [d_model x heads*d_head]
    w_k: Tensor    # [d_k x heads*d_head]
    w_v: Tensor    # [d_k x heads*d_head]
    w_o: Tensor    # [heads*d_head x d_out]
    heads: int
    d_head: int

    def __post_init__(self):
        inner = self.heads * self.d_head
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if w.shape[1] != inner:
                raise ShapeError(f"{name} must have {inner} columns, got {w.shape}")
        if self.w_o.shape[0] != inner:
            raise ShapeError(f"w_o must have {inner} rows, got {self.w_o.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_k: int, heads: int,
             d_head: int, d_out: int | None = None,
             scale: float = 2.0) -> "AttentionParams":
        inner = heads * d_head
        d_out = d_model if d_out is None else d_out
        return cls(
            w_q=tc.leaf(rng.standard_normal((d_model, inner)) * scale / np.sqrt(d_model)),
            w_k=tc.leaf(rng.standard_normal((d_k, inner)) * scale / np.sqrt(d_k)),
            w_v=tc.leaf(rng.standard_normal((d_k, inner)) * scale / np.sqrt(d_k)),
            w_o=tc.leaf(rng.standard_normal((inner, d_out)) * scale / np.sqrt(inner)),
            heads=heads,
            d_head=d_head,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
                f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o}


@dataclass
class AttentionOutput:
    out: Tensor                      # [n_q x d_out]
    maps: list[Tensor] | None = None   # per-head [n_q x n_k] weights, if retained


def masked_cross_attention(x: Tensor, stack: EmbeddingStack, mask: AttentionMask,
                           params: AttentionParams, retain_maps: bool = False,
                           mode: str = "multiplicative") -> AttentionOutput:
    """softmax(M * (Q K^T) / sqrt(d_head)) V per head, heads concatenated.

    x supplies the queries (one row per spatial cell), the embedding stack
    supplies keys and values, and the same mask gates every head. The mask is
    a constant: no gradient flows to it.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"queries must be [n_q x d_model], got {x.shape}")
    if mask.layout != stack.layout:
        raise ShapeError(f"mask layout {mask.layout} does not match stack "
                         f"layout {stack.layout}")
    if mask.values.shape != (x.shape[0], stack.tokens.shape[0]):
        raise ShapeError(f"mask is {mask.values.shape}, expected "
                         f"({x.shape[0]}, {stack.tokens.shape[0]})")
    mv = mask.values
    if mv.min() < 0.0 or mv.max() > 1.0:
        raise ValueError("mask values outside [0, 1]")
    if mode not in ("multiplicative", "additive"):
        raise ValueError(f"unknown attention mode {mode!r}")

    q_all = tc.matmul(x, params.w_q)
    k_all = tc.matmul(stack.tokens, params.w_k)
    v_all = tc.matmul(stack.tokens, params.w_v)
    m_const = tc.constant(mv)
    inv_scale = 1.0 / np.sqrt(params.d_head)

    heads_out = []
    maps: list[Tensor] | None = [] if retain_maps else None
    for i in range(params.heads):
        lo, hi = i * params.d_head, (i + 1) * params.d_head
        q = tc.slice_cols(q_all, lo, hi)
        k = tc.slice_cols(k_all, lo, hi)
        v = tc.slice_cols(v_all, lo, hi)
        logits = tc.matmul(q, tc.transpose(k))
        if mode == "multiplicative":
            gated = tc.hadamard(logits, m_const)
        else:
            # comparison mode only: additive exclusion instead of logit zeroing
            gated = tc.add(logits, tc.constant(np.where(mv > 0.0, 0.0, ADDITIVE_NEG)))
        scaled = tc.scale(gated, inv_scale)
        weights = tc.softmax_rows(scaled, sorted_sum=True)
        heads_out.append(tc.matmul_sorted(weights, v))
        if maps is not None:
            maps.append(weights)
    out = tc.matmul(tc.concat_cols(heads_out), params.w_o)
    return AttentionOutput(out, maps)


@dataclass(frozen=True)
class ConcentrationStat:
    """Where a face's in-mask queries send their attention mass."""

    face_index: int
    own_mass: float          # mean weight on the face's own block
    foreign_mass: float      # mean per-block weight on the other face blocks
    text_mass: float
    query_count: int


def attention_concentration(maps, layout: BlockLayout, in_mask_rows) -> list[ConcentrationStat]:
    """Per-face attention routing statistics, averaged over heads.

    `in_mask_rows` holds one boolean array of query rows per face (derived
    from that face's spatial mask at the map's resolution). Statistics are
    empty when the layout has no faces.
    """
    if layout.n_faces == 0:
        return []
    in_mask_rows = [np.asarray(r, dtype=bool) for r in in_mask_rows]
    if len(in_mask_rows) != layout.n_faces:
        raise ShapeError(f"{len(in_mask_rows)} query selections for "
                         f"{layout.n_faces} faces")
    weights = np.stack([m.data if isinstance(m, Tensor) else np.asarray(m)
                        for m in maps])         # [heads x n_q x n_k]
    if weights.shape[2] != layout.n_keys:
        raise ShapeError(f"maps have {weights.shape[2]} key columns, layout "
                         f"says {layout.n_keys}")

    block_mass = np.empty((layout.n_faces, weights.shape[0], weights.shape[1]))
    for n in range(layout.n_faces):
        a, b = layout.face_block(n)
        block_mass[n] = weights[:, :, a:b].sum(axis=2)
    text_mass = weights[:, :, :layout.text_tokens].sum(axis=2)

    stats = []
    for n, rows in enumerate(in_mask_rows):
        count = int(rows.sum())
        if count == 0:
            stats.append(ConcentrationStat(n, 0.0, 0.0, 0.0, 0))
            continue
        own = float(block_mass[n][:, rows].mean())
        others = [m for i, m in enumerate(block_mass) if i != n]
        foreign = float(np.mean([m[:, rows].mean() for m in others])) if others else 0.0
        stats.append(ConcentrationStat(n, own, foreign,
                                       float(text_mass[:, rows].mean()), count))
    return stats
