"""Runtime configuration: model dims, grid sizes, schedule, and training knobs."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace


@dataclass(frozen=True)
class Config:
    # token widths
    d_k: int = 16            # key/value token width (text and face tokens)
    d_gf: int = 8            # global face feature width
    d_lf: int = 4            # local face feature width
    grid_l: int = 2          # local feature grid side L (block size is L*L + 1)
    text_tokens: int = 4     # text token count T
    # denoiser
    d_model: int = 16
    heads: int = 4
    d_head: int = 4
    time_dim: int = 8
    image_size: int = 16
    channels: int = 4
    stage_resolutions: tuple[int, ...] = (16, 8, 4, 2)
    # noise schedule
    t_max: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # training
    train_steps: int = 1500
    batch_size: int = 2
    learning_rate: float = 0.03
    seed: int = 0
    # conditioning
    n_capacity: int = 4      # N, stacking capacity during training
    mask_margin: float = 0.25

    def __post_init__(self):
        if self.n_capacity < 1:
            raise ValueError("n_capacity must be >= 1")
        if self.mask_margin < 0:
            raise ValueError("mask_margin must be >= 0")
        if self.heads * self.d_head <= 0:
            raise ValueError("heads and d_head must be positive")
        for r in self.stage_resolutions:
            if r < 1 or self.image_size % r:
                raise ValueError(f"stage resolution {r} does not divide "
                                 f"image size {self.image_size}")
        if list(self.stage_resolutions) != sorted(self.stage_resolutions, reverse=True):
            raise ValueError("stage_resolutions must be strictly descending")
        if not 0.0 < self.beta_start < 1.0 or not 0.0 < self.beta_end < 1.0:
            raise ValueError("beta range must lie in (0, 1)")

    @property
    def block_size(self) -> int:
        return self.grid_l * self.grid_l + 1

    @classmethod
    def desk(cls) -> "Config":
        """The default desk-scale configuration (16x16 grids, trainable on CPU)."""
        return cls()

    @classmethod
    def tiny(cls) -> "Config":
        """Smallest configuration that still exercises every code path.

        Used by the gradient-check suite: 8x8 grid, d_k=16, L=2.
        """
        return cls(d_model=4, heads=1, d_head=2, time_dim=4, text_tokens=2,
                   image_size=8, channels=2, stage_resolutions=(8, 4),
                   n_capacity=2, t_max=50)

    @classmethod
    def paper_scale(cls) -> "Config":
        """Dimensions mirroring the production-scale setup; not trainable here."""
        return cls(d_k=768, d_gf=512, d_lf=256, grid_l=7, text_tokens=77,
                   d_model=320, heads=8, d_head=40, image_size=512,
                   stage_resolutions=(64, 32, 16, 8), t_max=1000)

    def to_json(self) -> str:
        d = asdict(self)
        d["stage_resolutions"] = list(self.stage_resolutions)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        d = json.loads(text)
        if "stage_resolutions" in d:
            d["stage_resolutions"] = tuple(d["stage_resolutions"])
        return cls(**d)

    def with_overrides(self, **kwargs) -> "Config":
        return replace(self, **kwargs)


def load_config(path) -> Config:
    with open(path) as fh:
        return Config.from_json(fh.read())


def save_config(cfg: Config, path) -> None:
    with open(path, "w") as fh:
        fh.write(cfg.to_json() + "\n")
