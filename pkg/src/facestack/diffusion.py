"""Desk-scale noise predictor with a main branch and a pose-control branch.

The denoiser runs on small pixel grids directly (no latent encoder). Each
stage applies a position-wise affine, masked cross-attention against the
embedding stack at that stage's mask resolution, and a SiLU, wrapped in a
residual connection so the noisy grid content survives depth. The control
branch is a structural copy of the encoder, initialized with the same
parameters; it consumes the pose raster and feeds the main branch through
fusion projections that start at exactly zero, so an untrained model is
bitwise indifferent to the control image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor
from .attention import AttentionParams, masked_cross_attention
from .config import Config
from .data import AnnotatedRecord, Selection, select_and_order_faces
from .embedding import (EmbeddingStack, ProjectionParams, hash_text_tokens,
                        project_face, stack_embeddings)
from .masks import (AttentionMask, all_ones_attention_mask,
                    assemble_attention_mask, box_mask_pyramid)
from .pose import PoseControl, render_pose_control


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the trace collected so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


RESIDUAL_SCALE = 0.25   # damps the per-stage residual branch so depth stays tame


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if ((self.betas <= 0) | (self.betas >= 1)).any():
            raise ValueError("betas must lie strictly inside (0, 1)")
        if (np.diff(self.alpha_bars) >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing")

    @classmethod
    def linear(cls, t_max: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, t_max)
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas))

    @classmethod
    def from_config(cls, cfg: Config) -> "NoiseSchedule":
        return cls.linear(cfg.t_max, cfg.beta_start, cfg.beta_end)

    @property
    def t_max(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class DiffusionState:
    z_0: np.ndarray
    z_t: np.ndarray
    t: int
    eps: np.ndarray


def add_noise(z_0: np.ndarray, t: int, eps: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """Forward process: z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= schedule.t_max:
        raise ValueError(f"t={t} outside [1, {schedule.t_max}]")
    if eps.shape != z_0.shape:
        raise ValueError(f"noise shape {eps.shape} != signal shape {z_0.shape}")
    abar = schedule.alpha_bars[t - 1]
    return np.sqrt(abar) * z_0 + np.sqrt(1.0 - abar) * eps


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the step index, [1 x dim]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(1, half))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb[None, :]


# ---------------------------------------------------------------------------
# model parameters

def _rng_for(seed: int, tag: int, *rest: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(tag), *map(int, rest)])


@dataclass
class ToyDenoiser:
    """Flat named parameter store plus the wiring knowledge to run it."""

    config: Config
    params: dict

    @staticmethod
    def _stage_names(cfg: Config, branch: str):
        res = cfg.stage_resolutions
        names = [(f"{branch}.down{r}", r) for r in res[:-1]]
        names.append((f"{branch}.bottom", res[-1]))
        if branch == "main":
            names += [(f"{branch}.up{r}", r) for r in reversed(res[:-1])]
        return names

    @classmethod
    def init(cls, cfg: Config, rng: np.random.Generator) -> "ToyDenoiser":
        res = cfg.stage_resolutions
        for a, b in zip(res, res[1:]):
            if b * 2 != a:
                raise ValueError(f"stage resolutions must halve, got {res}")
        d, c = cfg.d_model, cfg.channels
        p: dict[str, Tensor] = {}

        def affine(name, n_in, n_out, w_scale):
            p[f"{name}.w"] = tc.leaf(rng.standard_normal((n_in, n_out))
                                     * w_scale / np.sqrt(n_in))
            p[f"{name}.b"] = tc.leaf(np.zeros((1, n_out)))

        proj = ProjectionParams.init(rng, cfg.d_gf, cfg.d_lf, cfg.d_k)
        p.update(proj.named())

        affine("main.in", c, d, 0.8)
        affine("main.out", d, c, 0.05)  # near-zero start: eps_hat ~ 0, loss ~ 1
        for name, _r in cls._stage_names(cfg, "main"):
            affine(f"{name}.time", cfg.time_dim, d, 0.3)
            mix = np.eye(d) + 0.1 * rng.standard_normal((d, d))
            p[f"{name}.mix.w"] = tc.leaf(mix)
            p[f"{name}.mix.b"] = tc.leaf(np.zeros((1, d)))
            attn = AttentionParams.init(rng, d, cfg.d_k, cfg.heads, cfg.d_head)
            p.update(attn.named(f"{name}.attn"))

        # control branch: encoder copied parameter-for-parameter, then its own
        # pose embedding; fusion starts at exactly zero
        p["ctrl.in.w"] = tc.leaf(p["main.in.w"].data.copy())
        p["ctrl.in.b"] = tc.leaf(p["main.in.b"].data.copy())
        affine("ctrl.cond", 3, d, 0.8)
        for name, _r in cls._stage_names(cfg, "ctrl"):
            src = name.replace("ctrl", "main", 1)
            for suffix in ("time.w", "time.b", "mix.w", "mix.b",
                           "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"):
                p[f"{name}.{suffix}"] = tc.leaf(p[f"{src}.{suffix}"].data.copy())
        def affine_zero(name):
            p[f"{name}.w"] = tc.leaf(np.zeros((d, d)))
            p[f"{name}.b"] = tc.leaf(np.zeros((1, d)))

        affine_zero("fuse.bottom")
        for r in res[:-1]:
            affine_zero(f"fuse.up{r}")
        return cls(cfg, p)

    def attn_params(self, prefix: str) -> AttentionParams:
        return AttentionParams(self.params[f"{prefix}.w_q"], self.params[f"{prefix}.w_k"],
                               self.params[f"{prefix}.w_v"], self.params[f"{prefix}.w_o"],
                               self.config.heads, self.config.d_head)

    @property
    def projections(self) -> ProjectionParams:
        p = self.params
        return ProjectionParams(p["proj.w_global"], p["proj.b_global"],
                                p["proj.w_local"], p["proj.b_local"])

    def with_params(self, params: dict) -> "ToyDenoiser":
        return ToyDenoiser(self.config, params)

    def as_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, cfg: Config, arrays: dict) -> "ToyDenoiser":
        return cls(cfg, {k: tc.leaf(v) for k, v in arrays.items()
                         if not k.startswith("meta.")})


# ---------------------------------------------------------------------------
# conditioning assembly

@dataclass(frozen=True)
class Conditioning:
    stack: EmbeddingStack
    attention_masks: dict           # resolution -> AttentionMask
    pose: PoseControl
    pyramids: tuple                 # per stacked face, a MaskPyramid


def build_conditioning(caption: str, faces, order, cfg: Config,
                       projections: ProjectionParams, ablate_mask: bool = False,
                       colors=None) -> Conditioning:
    """Assemble stack, per-level attention masks, and the pose raster.

    `order` lists the stacked face indices in stacking order; every face in
    `faces` contributes pose keypoints regardless of selection.
    """
    order = list(order)
    blocks = [project_face(faces[i].feature, projections) for i in order]
    text = hash_text_tokens(caption, cfg.text_tokens, cfg.d_k)
    stack = stack_embeddings(text, blocks)

    pyramids = tuple(
        box_mask_pyramid(faces[i].box, cfg.mask_margin, cfg.image_size,
                         cfg.stage_resolutions, face_index=slot)
        for slot, i in enumerate(order))
    attention_masks = {}
    for r in cfg.stage_resolutions:
        if ablate_mask or not order:
            attention_masks[r] = all_ones_attention_mask(r * r, stack.layout)
        else:
            attention_masks[r] = assemble_attention_mask(
                cfg.text_tokens, stack.layout.block_size,
                [pyr.levels[r] for pyr in pyramids])
    pose = render_pose_control([f.keypoints for f in faces], order,
                               cfg.image_size, cfg.image_size, colors=colors)
    return Conditioning(stack, attention_masks, pose, pyramids)


# ---------------------------------------------------------------------------
# forward pass

def _grid_to_tokens(grid: np.ndarray) -> Tensor:
    h, w, c = grid.shape
    return tc.constant(grid.reshape(h * w, c))


def _tokens_pool(x: Tensor, r: int) -> Tensor:
    d = x.shape[1]
    grid = tc.reshape(x, (r, r, d))
    return tc.reshape(tc.pool_down(grid, "mean"), ((r // 2) * (r // 2), d))


def _tokens_upsample(x: Tensor, r: int) -> Tensor:
    d = x.shape[1]
    grid = tc.reshape(x, (r, r, d))
    return tc.reshape(tc.upsample_nearest(grid), ((2 * r) * (2 * r), d))


def predict_noise(model: ToyDenoiser, z_t: np.ndarray, t: int,
                  stack: EmbeddingStack, attention_masks: dict, pose,
                  retain_maps: bool = False):
    """Run both branches and return eps_hat as a tensor shaped like z_t.

    attention_masks maps each stage resolution to the assembled mask at that
    level; the same mask gates both branches at that stage. When retain_maps
    is set, returns (eps_hat, {site: (resolution, per-head weight tensors)}).
    """
    cfg = model.config
    res = cfg.stage_resolutions
    h = w = cfg.image_size
    if z_t.shape != (h, w, cfg.channels):
        raise tc.ShapeError(f"z_t is {z_t.shape}, config wants "
                            f"{(h, w, cfg.channels)}")
    for r in res:
        m = attention_masks.get(r)
        if m is None or m.n_queries != r * r:
            raise tc.ShapeError(f"missing or misshaped attention mask for "
                                f"stage resolution {r}")
    pose_img = pose.image if isinstance(pose, PoseControl) else np.asarray(pose)
    if pose_img.shape != (h, w, 3):
        raise tc.ShapeError(f"pose raster is {pose_img.shape}, expected {(h, w, 3)}")

    p = model.params
    t_emb = tc.constant(time_embedding(t, cfg.time_dim))
    maps: dict[str, list] = {}

    def dense(name, x):
        return tc.add(tc.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])

    def stage(name, u, r):
        v = tc.add(u, dense(f"{name}.time", t_emb))
        v = dense(f"{name}.mix", v)
        att = masked_cross_attention(v, stack, attention_masks[r],
                                     model.attn_params(f"{name}.attn"),
                                     retain_maps=retain_maps)
        if retain_maps:
            maps[name] = (r, att.maps)
        return tc.add(u, tc.scale(tc.silu(tc.add(v, att.out)), RESIDUAL_SCALE))

    z_tokens = _grid_to_tokens(z_t)
    pose_tokens = _grid_to_tokens(pose_img)

    # control branch: encoder over z_t plus the embedded pose raster
    c = tc.add(dense("ctrl.in", z_tokens), dense("ctrl.cond", pose_tokens))
    ctrl_skips = {}
    for r in res[:-1]:
        c = stage(f"ctrl.down{r}", c, r)
        ctrl_skips[r] = c
        c = _tokens_pool(c, r)
    c = stage("ctrl.bottom", c, res[-1])

    # main branch with zero-initialized control injections
    x = dense("main.in", z_tokens)
    skips = {}
    for r in res[:-1]:
        x = stage(f"main.down{r}", x, r)
        skips[r] = x
        x = _tokens_pool(x, r)
    x = stage("main.bottom", x, res[-1])
    x = tc.add(x, dense("fuse.bottom", c))
    for r in reversed(res[:-1]):
        x = _tokens_upsample(x, r // 2)
        x = tc.add(x, tc.add(skips[r], dense(f"fuse.up{r}", ctrl_skips[r])))
        x = stage(f"main.up{r}", x, r)

    eps_hat = tc.reshape(dense("main.out", x), (h, w, cfg.channels))
    if retain_maps:
        return eps_hat, maps
    return eps_hat


# ---------------------------------------------------------------------------
# loss, training, sampling

def training_loss(model: ToyDenoiser, batch, schedule: NoiseSchedule,
                  rng: np.random.Generator, ablate_mask: bool = False) -> Tensor:
    """Mean squared error between drawn and predicted noise over a batch.

    batch items are (record, t, eps); per-record conditioning applies the
    training policies: random min(N, N') selection, random stacking order,
    circles only on stacked faces.
    """
    if not batch:
        raise ValueError("empty batch")
    cfg = model.config
    total = None
    for record, t, eps in batch:
        sel = select_and_order_faces(record, cfg.n_capacity, rng)
        cond = build_conditioning(record.caption, record.faces, sel.order, cfg,
                                  model.projections, ablate_mask=ablate_mask)
        z_t = add_noise(record.image, t, eps, schedule)
        eps_hat = predict_noise(model, z_t, t, cond.stack,
                                cond.attention_masks, cond.pose)
        diff = tc.sub(eps_hat, tc.constant(eps))
        item = tc.mean_all(tc.hadamard(diff, diff))
        total = item if total is None else tc.add(total, item)
    return tc.scale(total, 1.0 / len(batch))


@dataclass(frozen=True)
class RoutingSummary:
    """Aggregate attention-routing masses for the desk-scale experiment."""

    own_mass: float       # mean weight an in-mask query puts on its own block
    foreign_mass: float   # mean per-block weight on the other face blocks
    text_mass: float
    query_count: int

    @property
    def ratio(self) -> float:
        return self.own_mass / self.foreign_mass if self.foreign_mass > 0 else np.inf


def routing_concentration(model: ToyDenoiser, dataset, timesteps=(20, 50, 80),
                          n_records: int = 4, ablate_mask: bool = False,
                          seed: int = 1234) -> RoutingSummary:
    """Measure where in-mask queries send attention, pooled over sites.

    The model runs with its own masks (all-ones when ablate_mask, matching how
    an ablated model was trained); the query selection always uses the true
    face masks so masked and ablated models are scored identically.
    """
    from .attention import attention_concentration

    cfg = model.config
    schedule = NoiseSchedule.from_config(cfg)
    own = foreign = text = 0.0
    queries = 0
    for i, record in enumerate(dataset.records[:n_records]):
        rng = _rng_for(seed, 4, i)
        sel = select_and_order_faces(record, cfg.n_capacity, rng)
        cond = build_conditioning(record.caption, record.faces, sel.order, cfg,
                                  model.projections, ablate_mask=False)
        run_cond = cond if not ablate_mask else build_conditioning(
            record.caption, record.faces, sel.order, cfg, model.projections,
            ablate_mask=True)
        for t in timesteps:
            eps = rng.standard_normal(record.image.shape)
            z_t = add_noise(record.image, int(t), eps, schedule)
            _, maps = predict_noise(model, z_t, int(t), run_cond.stack,
                                    run_cond.attention_masks, run_cond.pose,
                                    retain_maps=True)
            for _site, (r, head_maps) in maps.items():
                rows = [pyr.levels[r].grid.reshape(-1).astype(bool)
                        for pyr in cond.pyramids]
                stats = attention_concentration(head_maps, cond.stack.layout, rows)
                for s in stats:
                    own += s.own_mass * s.query_count
                    foreign += s.foreign_mass * s.query_count
                    text += s.text_mass * s.query_count
                    queries += s.query_count
    if queries == 0:
        raise ValueError("no in-mask queries; dataset has no usable faces")
    return RoutingSummary(own / queries, foreign / queries, text / queries, queries)


def sgd_step(model: ToyDenoiser, loss: Tensor, learning_rate: float) -> ToyDenoiser:
    grads = tc.backward(loss)
    new_params = {}
    for name, param in model.params.items():
        g = grads.get(param)
        if g is None:
            new_params[name] = param
        else:
            new_params[name] = tc.leaf(param.data - learning_rate * g)
    return model.with_params(new_params)


def train(dataset, cfg: Config, steps: int | None = None,
          ablate_mask: bool = False, start_model: ToyDenoiser | None = None,
          start_step: int = 0, on_step=None):
    """Run the SGD loop; returns (model, trace) with trace rows (step, loss).

    Fully deterministic under cfg.seed: the per-step random state is derived
    from (seed, step), so a run resumed from a checkpoint at any step
    reproduces the unbroken run exactly.
    """
    steps = cfg.train_steps if steps is None else steps
    schedule = NoiseSchedule.from_config(cfg)
    model = start_model if start_model is not None \
        else ToyDenoiser.init(cfg, _rng_for(cfg.seed, 0))
    records = dataset.records
    trace = []
    for step in range(start_step, steps):
        rng = _rng_for(cfg.seed, 1, step)
        batch = []
        for _ in range(cfg.batch_size):
            rec = records[int(rng.integers(0, len(records)))]
            t = int(rng.integers(1, schedule.t_max + 1))
            eps = rng.standard_normal(rec.image.shape)
            batch.append((rec, t, eps))
        try:
            loss = training_loss(model, batch, schedule, rng,
                                 ablate_mask=ablate_mask)
            trace.append((step, loss.item()))
            model = sgd_step(model, loss, cfg.learning_rate)
        except tc.NonFiniteError as exc:
            raise DivergenceError(f"non-finite loss at step {step}: {exc}",
                                  trace) from exc
        if on_step is not None:
            on_step(step, trace[-1][1])
    return model, trace


def sample(model: ToyDenoiser, stack: EmbeddingStack, attention_masks: dict,
           pose, steps: int, seed: int,
           schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Ancestral denoising from pure noise, strided to `steps` model calls."""
    if steps < 1:
        raise ValueError("sampling needs at least one step")
    cfg = model.config
    schedule = schedule or NoiseSchedule.from_config(cfg)
    # strided timesteps, highest first; steps=1 denoises once at t_max
    ts = np.unique(np.linspace(schedule.t_max, 1, min(steps, schedule.t_max))
                   .round().astype(int))[::-1]
    rng = _rng_for(seed, 2)
    x = rng.standard_normal((cfg.image_size, cfg.image_size, cfg.channels))
    for i, t_cur in enumerate(ts):
        abar = schedule.alpha_bars[t_cur - 1]
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        abar_prev = schedule.alpha_bars[t_prev - 1] if t_prev > 0 else 1.0
        eps_hat = predict_noise(model, x, int(t_cur), stack,
                                attention_masks, pose).data
        x0 = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        beta_eff = 1.0 - abar / abar_prev
        mean = (np.sqrt(abar_prev) * beta_eff / (1.0 - abar)) * x0 \
            + (np.sqrt(abar / abar_prev) * (1.0 - abar_prev) / (1.0 - abar)) * x
        if t_prev > 0:
            var = (1.0 - abar_prev) / (1.0 - abar) * beta_eff
            x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        else:
            x = mean
    return x
