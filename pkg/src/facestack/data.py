"""Annotated records, the face selection policy, and the synthetic corpus.

Synthetic records are small pixel grids: a fixed background texture plus a
handful of non-overlapping "faces", each showing its identity's canonical
pattern resampled into the face box. Identity patterns are deterministic
functions of the identity label, so features never need to be stored and the
generated image can be scored against the template later.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import io as fio
from . import tensor as tc
from .embedding import FaceFeature
from .masks import FaceBox

TEMPLATE_SIDE = 8   # canonical identity pattern resolution


@dataclass(frozen=True)
class FaceAnnotation:
    box: FaceBox
    keypoints: tuple            # ((x, y, confidence), ...), center first
    identity: str
    feature: FaceFeature | None = None


@dataclass(frozen=True)
class AnnotatedRecord:
    image: np.ndarray           # [H x W x C]
    caption: str
    faces: tuple

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class Dataset:
    records: tuple
    identities: tuple
    height: int
    width: int
    channels: int


@dataclass(frozen=True)
class Selection:
    order: tuple                # selected face indices, stacking order
    circled: frozenset          # == set(order)


def select_and_order_faces(record, capacity: int, rng: np.random.Generator) -> Selection:
    """Pick min(capacity, N') faces uniformly and stack them in random order.

    Unselected faces stay pose-only: their keypoints still reach the control
    image, but no circle, no embedding block, no mask block.
    """
    n_present = record.n_faces if hasattr(record, "n_faces") else int(record)
    k = min(capacity, n_present)
    order = tuple(int(i) for i in rng.permutation(n_present)[:k])
    return Selection(order, frozenset(order))


# ---------------------------------------------------------------------------
# identity patterns and the toy region encoder

def _label_rng(label: str, salt: str = "") -> np.random.Generator:
    digest = hashlib.sha256((salt + label).encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64).tolist())


def identity_template(label: str, channels: int) -> np.ndarray:
    """Raw canonical pattern for one identity: blocky, strong, in [-1, 1]."""
    rng = _label_rng(label, salt="template:")
    coarse = rng.uniform(-1.0, 1.0, (TEMPLATE_SIDE // 2, TEMPLATE_SIDE // 2, channels))
    return np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)


def identity_template_set(labels, channels: int) -> dict:
    """Templates centered across the identity set and rescaled to [-1, 1].

    Centering makes the pixel-wise mean over identities exactly zero, so a
    face region's content cannot be predicted without knowing which identity
    sits there; for two identities the patterns are exact negatives. This is
    what makes the conditioning genuinely load-bearing in the synthetic task.
    """
    raw = np.stack([identity_template(label, channels) for label in labels])
    centered = raw - raw.mean(axis=0, keepdims=True)
    peak = np.abs(centered).max()
    if peak > 0:
        centered = centered / peak
    return {label: centered[i] for i, label in enumerate(labels)}


def resample_nearest(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ys = (np.arange(out_h) * src.shape[0]) // out_h
    xs = (np.arange(out_w) * src.shape[1]) // out_w
    return src[ys][:, xs]


def _pool_cells(region: np.ndarray, side: int) -> np.ndarray:
    """Average the region over a side x side grid of cells -> [side, side, C]."""
    h, w, c = region.shape
    ye = np.linspace(0, h, side + 1).round().astype(int)
    xe = np.linspace(0, w, side + 1).round().astype(int)
    out = np.empty((side, side, c))
    for i in range(side):
        for j in range(side):
            cell = region[ye[i]:max(ye[i] + 1, ye[i + 1]),
                          xe[j]:max(xe[j] + 1, xe[j + 1])]
            out[i, j] = cell.mean(axis=(0, 1))
    return out


def _cycle_to(vec: np.ndarray, dim: int) -> np.ndarray:
    if vec.size >= dim:
        return vec[:dim].copy()
    reps = -(-dim // vec.size)
    return np.tile(vec, reps)[:dim]


def encode_face_region(image: np.ndarray, box: FaceBox, grid_l: int,
                       d_gf: int, d_lf: int, identity: str) -> FaceFeature:
    """Toy face encoder: pooled statistics of the box region.

    Global row: channel means, quadrant means, and coarse pooled values.
    Local rows: grid_l x grid_l cell channel means, cycled to width d_lf.
    Deterministic in the pixels, so equal regions encode identically.
    """
    region = image[int(box.y0):int(np.ceil(box.y1)),
                   int(box.x0):int(np.ceil(box.x1))]
    if region.size == 0:
        raise ValueError(f"box {box} selects an empty region")
    cells = _pool_cells(region, grid_l)
    local = np.stack([_cycle_to(cells[i, j], d_lf)
                      for i in range(grid_l) for j in range(grid_l)])
    quad = _pool_cells(region, 2).mean(axis=2).reshape(-1)
    stats = np.concatenate([region.mean(axis=(0, 1)), quad,
                            _pool_cells(region, 2).reshape(-1)])
    global_vec = _cycle_to(stats, d_gf)[None, :]
    return FaceFeature(tc.constant(global_vec), tc.constant(local), identity)


# ---------------------------------------------------------------------------
# synthetic corpus

def background_texture(h: int, w: int, channels: int) -> np.ndarray:
    """Fixed low-amplitude texture shared by every record."""
    ys = np.arange(h)[:, None, None]
    xs = np.arange(w)[None, :, None]
    cs = np.arange(channels)[None, None, :]
    return 0.1 * np.cos(2 * np.pi * (ys / h + cs / max(1, channels))) \
        + 0.1 * np.sin(2 * np.pi * xs / w)


def _place_boxes(rng, n_faces, h, w, min_side, max_side, max_tries=200):
    boxes = []
    for _ in range(n_faces):
        for attempt in range(max_tries):
            side = int(rng.integers(min_side, max_side + 1))
            x0 = int(rng.integers(0, w - side + 1))
            y0 = int(rng.integers(0, h - side + 1))
            cand = FaceBox(x0, y0, x0 + side, y0 + side)
            if all(cand.x1 <= b.x0 or b.x1 <= cand.x0 or
                   cand.y1 <= b.y0 or b.y1 <= cand.y0 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise RuntimeError(f"could not place {n_faces} non-overlapping faces "
                               f"in a {h}x{w} grid after {max_tries} tries")
    return boxes


def make_synthetic_dataset(n_records: int, h: int, w: int, n_identities: int,
                           seed: int, faces_range=(1, 6), channels: int = 4,
                           grid_l: int = 2, d_gf: int = 8, d_lf: int = 4) -> Dataset:
    """Build a deterministic multi-identity corpus on small pixel grids."""
    if n_identities < 2:
        raise ValueError("need at least two identities")
    lo, hi = faces_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad faces_range {faces_range}")
    identities = tuple(f"id{k:02d}" for k in range(n_identities))
    templates = identity_template_set(identities, channels)
    bg = background_texture(h, w, channels)
    min_side = max(3, min(h, w) // 4)
    max_side = max(min_side, (min(h, w) * 2) // 5)

    records = []
    for r in range(n_records):
        rng = np.random.default_rng([seed, 3, r])
        n_faces = int(rng.integers(lo, hi + 1))
        boxes = _place_boxes(rng, n_faces, h, w, min_side, max_side)
        if n_faces <= n_identities:
            chosen = rng.choice(n_identities, size=n_faces, replace=False)
        else:
            chosen = rng.choice(n_identities, size=n_faces, replace=True)
        image = bg.copy()
        faces = []
        for box, ident_idx in zip(boxes, chosen):
            label = identities[int(ident_idx)]
            bh, bw = int(box.y1 - box.y0), int(box.x1 - box.x0)
            image[int(box.y0):int(box.y1), int(box.x0):int(box.x1)] = \
                resample_nearest(templates[label], bh, bw)
            cx, cy = box.center
            keypoints = ((cx, cy, 1.0), (box.x0, box.y0, 1.0), (box.x1 - 1, box.y0, 1.0),
                         (box.x0, box.y1 - 1, 1.0), (box.x1 - 1, box.y1 - 1, 1.0))
            faces.append((box, keypoints, label))
        faces_out = tuple(
            FaceAnnotation(box, kps, label,
                           encode_face_region(image, box, grid_l, d_gf, d_lf, label))
            for box, kps, label in faces)
        caption = f"{n_faces} people in a synthetic scene"
        records.append(AnnotatedRecord(image, caption, faces_out))
    return Dataset(tuple(records), identities, h, w, channels)


# ---------------------------------------------------------------------------
# on-disk dataset layout: one directory per record plus a top-level index

def save_dataset(dataset: Dataset, root) -> None:
    fio.ensure_dir(root)
    names = []
    for i, rec in enumerate(dataset.records):
        name = f"record_{i:04d}"
        names.append(name)
        d = fio.ensure_dir(os.path.join(root, name))
        fio.dump_tensor(rec.image, os.path.join(d, "image.txt"))
        manifest = {
            "caption_ref": rec.caption,
            "faces": [{
                "box": [f.box.x0, f.box.y0, f.box.x1, f.box.y1],
                "keypoints": [list(kp) for kp in f.keypoints],
                "identity": f.identity,
            } for f in rec.faces],
        }
        with open(os.path.join(d, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)
        for k, f in enumerate(rec.faces):
            if f.feature is not None:
                fio.save_face_feature(os.path.join(d, f"face_{k}.txt"), f.feature)
    with open(os.path.join(root, "dataset.json"), "w") as fh:
        json.dump({"records": names, "identities": list(dataset.identities),
                   "height": dataset.height, "width": dataset.width,
                   "channels": dataset.channels}, fh, indent=1)


def load_dataset(root) -> Dataset:
    with open(os.path.join(root, "dataset.json")) as fh:
        index = json.load(fh)
    records = []
    for name in index["records"]:
        d = os.path.join(root, name)
        image = fio.load_tensor(os.path.join(d, "image.txt"))
        with open(os.path.join(d, "manifest.json")) as fh:
            manifest = json.load(fh)
        faces = []
        for k, f in enumerate(manifest["faces"]):
            feature_path = os.path.join(d, f"face_{k}.txt")
            feature = fio.load_face_feature(feature_path) \
                if os.path.exists(feature_path) else None
            faces.append(FaceAnnotation(FaceBox(*f["box"]),
                                        tuple(tuple(kp) for kp in f["keypoints"]),
                                        f["identity"], feature))
        records.append(AnnotatedRecord(image, manifest["caption_ref"], tuple(faces)))
    return Dataset(tuple(records), tuple(index["identities"]),
                   index["height"], index["width"], index["channels"])
