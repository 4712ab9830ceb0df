"""Identity-preservation metrics behind pluggable encoder interfaces.

The three scores are cosine based. The two-identity score rewards each
generated image matching its own input identity and penalizes the two
generated identities resembling each other: perfect preservation of two
orthogonal identities scores exactly 2.0, total mixing exactly 1.0, and any
input stays inside [-1, 3]. Encoders are deterministic objects with a fixed
output dimension; two toys ship with the package, a vector passthrough and a
region-pooling image encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import pooled_text_vector
from .masks import FaceBox


class VectorEncoder:
    """Passthrough for inputs that already are embedding vectors."""

    kind = "face-encoder"

    def __init__(self, dim: int):
        self.dim = int(dim)

    def embed(self, value) -> np.ndarray:
        vec = np.asarray(value, dtype=np.float64).reshape(-1)
        if vec.size != self.dim:
            raise ValueError(f"expected a vector of dim {self.dim}, got {vec.size}")
        return vec


class HashTextEncoder:
    """Deterministic text embedding (hash seeded), toy stand-in for a real one."""

    kind = "text-encoder"

    def __init__(self, dim: int):
        self.dim = int(dim)

    def embed(self, text: str) -> np.ndarray:
        return pooled_text_vector(text, self.dim)


class RegionPoolEncoder:
    """Pools an image region over a fixed grid; input is (image, box)."""

    kind = "image-encoder"

    def __init__(self, pool: int = 4, channels: int = 4):
        self.pool = int(pool)
        self.channels = int(channels)
        self.dim = self.pool * self.pool * self.channels

    def embed(self, value) -> np.ndarray:
        from .data import _pool_cells
        image, box = value
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != self.channels:
            raise ValueError(f"expected [H x W x {self.channels}] image, "
                             f"got shape {image.shape}")
        if not isinstance(box, FaceBox):
            box = FaceBox(*box)
        region = image[int(box.y0):int(np.ceil(box.y1)),
                       int(box.x0):int(np.ceil(box.x1))]
        return _pool_cells(region, self.pool).reshape(-1)


def cosine_sim(u, v) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.size != v.size:
        raise ValueError(f"dimension mismatch: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def text_sim(prompt: str, generated, text_encoder, image_encoder) -> float:
    """How well a generated image reflects the prompt (cosine of embeddings)."""
    if text_encoder.dim != image_encoder.dim:
        raise ValueError(f"encoder dims differ: text {text_encoder.dim}, "
                         f"image {image_encoder.dim}")
    return cosine_sim(text_encoder.embed(prompt), image_encoder.embed(generated))


def single_sim(reference, generated, face_encoder) -> float:
    """Identity preservation of one subject: cosine of face embeddings."""
    return cosine_sim(face_encoder.embed(reference), face_encoder.embed(generated))


def multi_sim(a, b, a_prime, b_prime, face_encoder) -> float:
    """Two-identity preservation with a mixing penalty.

    Averages each generated image's similarity to its own input identity and
    adds one minus the similarity between the two generated images, exactly
    one cross term.
    """
    kept = (single_sim(a, a_prime, face_encoder)
            + single_sim(b, b_prime, face_encoder)) / 2.0
    return kept + (1.0 - single_sim(a_prime, b_prime, face_encoder))


def all_pairs_multi_sim(references, generated, face_encoder):
    """Extension beyond the two-identity definition: score every unordered
    pair of a larger identity set, reported separately from the pair metric."""
    if len(references) != len(generated) or len(references) < 2:
        raise ValueError("need aligned lists with at least two identities")
    out = []
    for i in range(len(references)):
        for j in range(i + 1, len(references)):
            out.append(((i, j), multi_sim(references[i], references[j],
                                          generated[i], generated[j],
                                          face_encoder)))
    return out


@dataclass
class MetricReport:
    """Per-pair rows plus the summary; validates metric ranges on build."""

    rows: list = field(default_factory=list)
    # each row: dict with single_a, single_b, text_a, text_b, multi

    COLUMNS = ("single_a", "single_b", "text_a", "text_b", "multi")

    def __post_init__(self):
        for row in self.rows:
            for col in ("single_a", "single_b", "text_a", "text_b"):
                if not -1.0 <= row[col] <= 1.0:
                    raise ValueError(f"{col}={row[col]} outside [-1, 1]")
            if not -1.0 <= row["multi"] <= 3.0:
                raise ValueError(f"multi={row['multi']} outside [-1, 3]")

    def mean(self, col: str) -> float:
        return float(np.mean([r[col] for r in self.rows]))

    def std(self, col: str) -> float:
        return float(np.std([r[col] for r in self.rows]))

    def summary(self) -> dict:
        return {col: (self.mean(col), self.std(col)) for col in self.COLUMNS}

    def csv_rows(self):
        yield ("pair",) + self.COLUMNS
        for i, row in enumerate(self.rows):
            yield (i,) + tuple(row[c] for c in self.COLUMNS)
        yield ("mean",) + tuple(self.mean(c) for c in self.COLUMNS)
        yield ("std",) + tuple(self.std(c) for c in self.COLUMNS)


def evaluate_batch(pairs, generated, prompts, face_encoder, text_encoder,
                   image_encoder) -> MetricReport:
    """Score aligned lists of input pairs, generated pairs, and prompts."""
    if not pairs:
        raise ValueError("nothing to evaluate")
    if not (len(pairs) == len(generated) == len(prompts)):
        raise ValueError(f"misaligned lists: {len(pairs)} pairs, "
                         f"{len(generated)} generated, {len(prompts)} prompts")
    rows = []
    for (a, b), (a_p, b_p), prompt in zip(pairs, generated, prompts):
        rows.append({
            "single_a": single_sim(a, a_p, face_encoder),
            "single_b": single_sim(b, b_p, face_encoder),
            "text_a": text_sim(prompt, a_p, text_encoder, image_encoder),
            "text_b": text_sim(prompt, b_p, text_encoder, image_encoder),
            "multi": multi_sim(a, b, a_p, b_p, face_encoder),
        })
    return MetricReport(rows)
