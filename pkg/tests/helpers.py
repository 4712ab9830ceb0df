"""Shared builders for the test suite."""

import numpy as np

from facestack import tensor as tc
from facestack.embedding import FaceFeature
from facestack.masks import FaceBox


def make_feature(rng, d_gf=8, d_lf=4, grid_l=2, identity="id0"):
    return FaceFeature(tc.constant(rng.standard_normal((1, d_gf))),
                       tc.constant(rng.standard_normal((grid_l * grid_l, d_lf))),
                       identity)


def random_box(rng, size, min_side=2):
    x0 = rng.integers(0, size - min_side)
    y0 = rng.integers(0, size - min_side)
    x1 = rng.integers(x0 + min_side, size + 1)
    y1 = rng.integers(y0 + min_side, size + 1)
    return FaceBox(float(x0), float(y0), float(x1), float(y1))
