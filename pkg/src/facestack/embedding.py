"""The multimodal embedding stack: text tokens plus per-identity face blocks.

Each identity contributes one block of L*L + 1 tokens (a projected global
feature followed by the projected local grid); blocks are concatenated after
the text tokens, in stacking order. The column layout of the attention mask
must mirror this row layout exactly, so both sides share BlockLayout.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor, ShapeError


@dataclass(frozen=True)
class BlockLayout:
    """Row partition of the stack / column partition of the attention mask."""

    text_tokens: int
    block_size: int   # L*L + 1 per face; 0 when there are no faces
    n_faces: int

    def __post_init__(self):
        if self.text_tokens < 1:
            raise ShapeError("layout needs at least one text token")
        if self.n_faces < 0 or (self.n_faces > 0 and self.block_size < 2):
            raise ShapeError("face blocks need a global token plus local tokens")

    @property
    def n_keys(self) -> int:
        return self.text_tokens + self.n_faces * self.block_size

    def face_block(self, n: int) -> tuple[int, int]:
        """Half-open index range of face block n."""
        if not 0 <= n < self.n_faces:
            raise IndexError(f"face block {n} of {self.n_faces}")
        start = self.text_tokens + n * self.block_size
        return start, start + self.block_size


def make_layout(text_tokens: int, block_size: int, n_faces: int) -> BlockLayout:
    return BlockLayout(text_tokens, block_size if n_faces else 0, n_faces)


@dataclass(frozen=True)
class TextEmbedding:
    tokens: Tensor  # [T x d_k]

    def __post_init__(self):
        if self.tokens.data.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"text embedding must be [T x d_k] with T >= 1, "
                             f"got {self.tokens.shape}")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class FaceFeature:
    """One identity as seen by the face encoder: global vector + local grid."""

    global_vec: Tensor   # [1 x d_gf]
    local_grid: Tensor   # [(L*L) x d_lf]
    identity: str

    def __post_init__(self):
        if self.global_vec.data.ndim != 2 or self.global_vec.shape[0] != 1:
            raise ShapeError(f"global feature must be [1 x d_gf], got "
                             f"{self.global_vec.shape}")
        rows = self.local_grid.shape[0]
        side = int(round(rows ** 0.5))
        if self.local_grid.data.ndim != 2 or side * side != rows:
            raise ShapeError(f"local grid row count must be a perfect square, "
                             f"got {self.local_grid.shape}")

    @property
    def grid_side(self) -> int:
        return int(round(self.local_grid.shape[0] ** 0.5))


@dataclass(frozen=True)
class FaceTokenBlock:
    tokens: Tensor   # [(L*L + 1) x d_k], global token in row 0
    identity: str


@dataclass
class ProjectionParams:
    """Affine maps shared by every face and every stacking slot."""

    w_global: Tensor  # [d_gf x d_k]
    b_global: Tensor  # [1 x d_k]
    w_local: Tensor   # [d_lf x d_k]
    b_local: Tensor   # [1 x d_k]

    @classmethod
    def init(cls, rng: np.random.Generator, d_gf: int, d_lf: int, d_k: int,
             scale: float = 1.0) -> "ProjectionParams":
        return cls(
            w_global=tc.leaf(rng.standard_normal((d_gf, d_k)) * scale / np.sqrt(d_gf)),
            b_global=tc.leaf(np.zeros((1, d_k))),
            w_local=tc.leaf(rng.standard_normal((d_lf, d_k)) * scale / np.sqrt(d_lf)),
            b_local=tc.leaf(np.zeros((1, d_k))),
        )

    def named(self, prefix: str = "proj") -> dict[str, Tensor]:
        return {f"{prefix}.w_global": self.w_global, f"{prefix}.b_global": self.b_global,
                f"{prefix}.w_local": self.w_local, f"{prefix}.b_local": self.b_local}


@dataclass(frozen=True)
class EmbeddingStack:
    """K: text tokens first, then face blocks in stacking order."""

    tokens: Tensor
    layout: BlockLayout
    identities: tuple[str, ...]

    def __post_init__(self):
        if self.tokens.shape[0] != self.layout.n_keys:
            raise ShapeError(f"stack has {self.tokens.shape[0]} rows, layout "
                             f"says {self.layout.n_keys}")

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def project_face(feature: FaceFeature, params: ProjectionParams) -> FaceTokenBlock:
    """Project one identity into its token block (global token first)."""
    if feature.global_vec.shape[1] != params.w_global.shape[0]:
        raise ShapeError(f"global feature width {feature.global_vec.shape[1]} vs "
                         f"projection input {params.w_global.shape[0]}")
    if feature.local_grid.shape[1] != params.w_local.shape[0]:
        raise ShapeError(f"local feature width {feature.local_grid.shape[1]} vs "
                         f"projection input {params.w_local.shape[0]}")
    g = tc.add(tc.matmul(feature.global_vec, params.w_global), params.b_global)
    l = tc.add(tc.matmul(feature.local_grid, params.w_local), params.b_local)
    return FaceTokenBlock(tc.concat_rows([g, l]), feature.identity)


def stack_embeddings(text: TextEmbedding, blocks) -> EmbeddingStack:
    """Concatenate text tokens with face blocks, in the given order."""
    blocks = list(blocks)
    for b in blocks:
        if b.tokens.shape[1] != text.width:
            raise ShapeError(f"face block width {b.tokens.shape[1]} differs from "
                             f"text width {text.width}")
    sizes = {b.tokens.shape[0] for b in blocks}
    if len(sizes) > 1:
        raise ShapeError(f"face blocks disagree on token count: {sorted(sizes)}")
    block_size = sizes.pop() if blocks else 0
    layout = make_layout(text.count, block_size, len(blocks))
    if blocks:
        tokens = tc.concat_rows([text.tokens] + [b.tokens for b in blocks])
    else:
        tokens = text.tokens
    return EmbeddingStack(tokens, layout, tuple(b.identity for b in blocks))


def hash_text_tokens(text: str, n_tokens: int, d_k: int) -> TextEmbedding:
    """Deterministic stand-in text encoder: tokens seeded from sha256(text)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    seed = np.frombuffer(digest[:16], dtype=np.uint64)
    rng = np.random.default_rng(seed.tolist())
    tokens = rng.standard_normal((n_tokens, d_k))
    return TextEmbedding(tc.constant(tokens))


def pooled_text_vector(text: str, dim: int) -> np.ndarray:
    """Deterministic text vector for the toy metric encoder."""
    return hash_text_tokens(text, 1, dim).tokens.data[0].copy()
