"""Training loop: batching, loss weighting, curricula, and checkpoints.

Each step samples one currently-active image, draws a ray batch from it,
renders through the world-to-canonical path, evaluates the cycle term on
occupied samples through the canonical-to-world path, and applies one Adam
update per parameter group at that group's learning rate.

Two schedules run on top: frames unlock linearly from the first ~10% of the
sequence until a quarter of the run, and the canonical grid is upsampled at
configured iterations.

Config files are plain text, one `key = value` per line with `#` comments;
command-line overrides win. The training log is tab-separated with columns
`iter loss photo cycle per_pt entropy tv psnr`.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time

import numpy as np

from . import checkpoint, engine, grids, model as model_mod, render
from .engine import AdamState, Value
from .metrics import PSNR_CAP_DB


class NonFiniteLossError(RuntimeError):
    """A loss component became non-finite; carries the component name."""

    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is non-finite ({value})")
        self.component = component


@dataclasses.dataclass
class TrainConfig:
    """Every knob of a run; defaults follow the full-scale recipe.

    The loss weights and the curriculum fractions are not sourced from a
    published recipe; they are exposed here and recorded in run logs.
    """

    # optimization
    total_iters: int = 20000
    rays_per_batch: int = 4096
    lr_motion_grids: float = 0.08
    lr_canonical_grid: float = 0.01
    lr_extractors_decoders: float = 6e-4
    lr_other_nets: float = 8e-4
    lr_decay: float = 0.0            # 0 disables; else final lr multiplier
    w_cycle: float = 0.01
    w_per_pt: float = 0.01
    w_entropy: float = 0.001
    w_tv: float = 0.0001
    density_eps: float = 1e-4
    cycle_points_max: int = 0    # cap on occupied points per step; 0 = all
    seed: int = 0
    precision: str = "f32"           # f32 for training, f64 for checking
    reproducible: bool = True
    # schedules
    upsample_iters: tuple = (4000, 6000, 8000)
    upsample_res: tuple = ()         # derived geometrically when empty
    curriculum_start: float = 0.1
    curriculum_until: float = 0.25
    # rendering
    n_samples: int = 128
    stratified: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    near: float = 0.0
    far: float = 0.0                 # 0 means: take from the dataset manifest
    # model
    motion_res: int = 50
    motion_channels: int = 20
    canonical_res: int = 160
    canonical_init_res: int = 40
    canonical_channels: int = 6
    strides: tuple = (1, 2, 4)
    hidden: int = 128
    trunk_depth: int = 2
    motion_dim: int = 32
    slot_count: int = 12
    slot_dim: int = 16
    n_freq_feat: int = 5
    n_freq_time: int = 4
    n_freq_dir: int = 4
    tau: float = 1.0
    density_shift: float = -4.0
    # bookkeeping
    log_every: int = 50
    checkpoint_every: int = 0        # 0: final checkpoint only

    def __post_init__(self):
        for name in ("lr_motion_grids", "lr_canonical_grid",
                     "lr_extractors_decoders", "lr_other_nets"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        ups = tuple(int(i) for i in self.upsample_iters)
        if any(b <= a for a, b in zip(ups, ups[1:])):
            raise ValueError(f"upsample_iters must be strictly increasing, got {ups}")
        if ups and ups[-1] >= self.total_iters:
            raise ValueError("upsample_iters must be < total_iters")
        self.upsample_iters = ups
        self.upsample_res = tuple(int(r) for r in self.upsample_res)
        self.strides = tuple(int(s) for s in self.strides)
        self.background = tuple(float(v) for v in self.background)
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    def resolved_upsample_res(self) -> tuple:
        """Target resolutions per upsample event (geometric by default)."""
        if self.upsample_res:
            if len(self.upsample_res) != len(self.upsample_iters):
                raise ValueError("upsample_res length must match upsample_iters")
            return self.upsample_res
        k = len(self.upsample_iters)
        if k == 0:
            return ()
        r0, rf = self.canonical_init_res, self.canonical_res
        out = []
        for j in range(1, k + 1):
            r = int(round(r0 * (rf / r0) ** (j / k)))
            out.append(max(r, (out[-1] if out else r0) + 1))
        out[-1] = rf
        return tuple(out)

    def model_config(self, aabb) -> model_mod.ModelConfig:
        return model_mod.ModelConfig(
            aabb=aabb, motion_res=self.motion_res, motion_channels=self.motion_channels,
            canonical_res=self.canonical_res, canonical_init_res=self.canonical_init_res,
            canonical_channels=self.canonical_channels, strides=self.strides,
            hidden=self.hidden, trunk_depth=self.trunk_depth, motion_dim=self.motion_dim,
            slot_count=self.slot_count, slot_dim=self.slot_dim,
            n_freq_feat=self.n_freq_feat, n_freq_time=self.n_freq_time,
            n_freq_dir=self.n_freq_dir, tau=self.tau, density_shift=self.density_shift)


_TUPLE_FIELDS = {"upsample_iters", "upsample_res", "strides", "background"}
_BOOL_FIELDS = {"stratified", "reproducible"}


def parse_config_text(text: str) -> dict:
    """`key = value` lines into a raw string dict; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def config_from_sources(path: str | None = None, overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from an optional file plus CLI overrides."""
    raw: dict[str, str] = {}
    if path:
        with open(path) as fh:
            raw.update(parse_config_text(fh.read()))
    raw.update(overrides or {})
    known = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        if key in _TUPLE_FIELDS:
            parts = value.replace(",", " ").split()
            kwargs[key] = tuple(float(p) if "." in p or "e" in p.lower() else int(p)
                                for p in parts)
        elif key in _BOOL_FIELDS:
            kwargs[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            factory = known[key].type
            if factory in ("int", int):
                kwargs[key] = int(value)
            elif factory in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
    return TrainConfig(**kwargs)


def total_loss(photo: Value, cycle: Value, per_pt: Value, entropy: Value,
               tv: Value, cfg: TrainConfig) -> Value:
    """Weighted sum of the five terms; rejects non-finite components by name."""
    for name, val in (("photo", photo), ("cycle", cycle), ("per_pt", per_pt),
                      ("entropy", entropy), ("tv", tv)):
        v = float(val.data)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return (photo + cfg.w_cycle * cycle + cfg.w_per_pt * per_pt
            + cfg.w_entropy * entropy + cfg.w_tv * tv)


class Trainer:
    """Owns the model, optimizer states, and the two schedules."""

    def __init__(self, cfg: TrainConfig, dataset, out_dir: str | None = None):
        engine.set_default_dtype(np.float64 if cfg.precision == "f64" else np.float32)
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = out_dir
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        aabb = dataset.aabb
        if aabb is None:
            raise ValueError("dataset manifest provides no aabb; training needs scene bounds")
        self.near = cfg.near if cfg.near > 0 else dataset.near
        self.far = cfg.far if cfg.far > 0 else dataset.far
        if self.near is None or self.far is None or not self.near < self.far:
            raise ValueError(f"invalid ray bounds near={self.near} far={self.far}")
        self.rng = np.random.default_rng(cfg.seed)
        self.model = model_mod.SceneModel(cfg.model_config(aabb), self.rng)
        self.adam: dict[str, AdamState] = {}
        self._init_adam()
        self.iteration = 0
        self.log_rows: list[str] = []

    # -- optimizer plumbing -------------------------------------------------

    def group_lr(self, name: str) -> float:
        if name.startswith("canonical_grid"):
            return self.cfg.lr_canonical_grid
        if name.startswith(("eulerian_grid", "lagrangian_grid")):
            return self.cfg.lr_motion_grids
        if name.startswith(("extractor_", "rot_head", "trans_head")):
            return self.cfg.lr_extractors_decoders
        return self.cfg.lr_other_nets

    def _init_adam(self):
        self.adam = {
            name: AdamState.for_param(p, lr=self.group_lr(name))
            for name, p in self.model.named_parameters()
        }

    def _lr_scale(self) -> float:
        if self.cfg.lr_decay <= 0:
            return 1.0
        return self.cfg.lr_decay ** (self.iteration / self.cfg.total_iters)

    # -- schedules ---------------------------------------------------------

    def active_frame_count(self, iteration: int) -> int:
        """Progressive image curriculum: first ceil(10%) frames, then a
        linear unlock completing at `curriculum_until` of the run."""
        n = len(self.dataset.frames)
        start = math.ceil(self.cfg.curriculum_start * n)
        start = min(max(start, 1), n)
        horizon = self.cfg.curriculum_until * self.cfg.total_iters
        if horizon <= 0:
            return n
        frac = min(1.0, iteration / horizon)
        return min(n, start + int((n - start) * frac))

    def maybe_upsample(self, iteration: int) -> int | None:
        """Upsample the canonical grid if this iteration is scheduled."""
        targets = dict(zip(self.cfg.upsample_iters, self.cfg.resolved_upsample_res()))
        if iteration not in targets:
            return None
        new_res = targets[iteration]
        self.model.canonical_grid = grids.upsample_grid(self.model.canonical_grid, new_res)
        # moments restart at the new shape
        self.adam["canonical_grid.values"] = AdamState.for_param(
            self.model.canonical_grid.values, lr=self.group_lr("canonical_grid.values"))
        return new_res

    # -- a single optimization step -----------------------------------------

    def train_step(self) -> dict:
        cfg = self.cfg
        ds = self.dataset
        mdl = self.model
        frame_idx = int(self.rng.integers(self.active_frame_count(self.iteration)))
        n_px = ds.width * ds.height
        chosen = self.rng.choice(n_px, size=min(cfg.rays_per_batch, n_px), replace=False)
        pixels = np.stack([chosen % ds.width, chosen // ds.width], axis=1)
        gt = ds.images[frame_idx].reshape(-1, 3)[chosen].astype(engine.get_default_dtype())

        cam = ds.camera(frame_idx)
        t = ds.frames[frame_idx].time
        rays = render.generate_rays(cam, pixels, t, self.near, self.far)
        rays, hit = render.clip_rays_to_aabb(rays, mdl.cfg.aabb)
        b_total = len(rays)
        bg = np.asarray(cfg.background)

        miss_sq = float(((bg[None, :] - gt[~hit]) ** 2).sum())
        miss_entropy = (~hit).sum() * render.binary_entropy(0.0)

        breakdown: dict[str, float]
        if hit.any():
            hit_rays = rays.select(hit)
            z, delta, pts = render.sample_points(hit_rays, cfg.n_samples, cfg.stratified, self.rng)
            flat = pts.reshape(-1, 3)
            times = np.repeat(hit_rays.times, cfg.n_samples)
            eul = mdl.eulerian_query(flat, times)
            dirs_rep = np.repeat(hit_rays.dirs, cfg.n_samples, axis=0)
            color, sigma = mdl.canonical_query(eul.mapped, dirs_rep)
            out = render.volume_render(
                engine.reshape(sigma, z.shape), engine.reshape(color, (*z.shape, 3)),
                delta, bg)

            gt_hit = gt[hit]
            diff = out.rgb - Value(gt_hit)
            photo = (engine.vsum(diff * diff) + miss_sq) * (1.0 / b_total)
            cdiff = engine.reshape(color, (*z.shape, 3)) - Value(gt_hit[:, None, :])
            per_pt = engine.vsum(out.weights * engine.vsum(cdiff * cdiff, axis=2)) * (1.0 / b_total)
            ent_hit = render.entropy_loss(out.acc) * (len(hit_rays) / b_total)
            entropy = ent_hit + miss_entropy / b_total

            occ = sigma.data > cfg.density_eps
            if occ.any():
                idx = np.nonzero(occ)[0]
                if cfg.cycle_points_max and len(idx) > cfg.cycle_points_max:
                    # stochastic subset keeps the cycle term's cost bounded
                    idx = np.sort(self.rng.choice(idx, cfg.cycle_points_max,
                                                  replace=False))
                x_c_sub = engine.take_rows(eul.mapped, idx)
                f_em_sub = engine.take_rows(eul.feature, idx)
                lag = mdl.lagrangian_query(x_c_sub, times[idx], noise=True, rng=self.rng)
                cycle = render.cycle_loss(sigma.data[idx], f_em_sub, lag.feature, cfg.density_eps)
            else:
                cycle = Value(0.0)
        else:
            photo = Value(miss_sq / b_total)
            per_pt = Value(0.0)
            entropy = Value(miss_entropy / b_total)
            cycle = Value(0.0)

        tv = (grids.tv_loss(mdl.canonical_grid) + grids.tv_loss(mdl.eulerian_grid)
              + grids.tv_loss(mdl.lagrangian_grid))
        try:
            loss = total_loss(photo, cycle, per_pt, entropy, tv, cfg)
        except NonFiniteLossError:
            self._crash_checkpoint()
            raise

        engine.backward(loss)
        scale = self._lr_scale()
        for name, param in mdl.named_parameters():
            state = self.adam[name]
            base_lr = self.group_lr(name)
            state.lr = base_lr * scale
            engine.adam_step(param, state)
            param.zero_grad()

        mse = float(photo.data) / 3.0
        breakdown = {
            "loss": float(loss.data), "photo": float(photo.data),
            "cycle": float(cycle.data), "per_pt": float(per_pt.data),
            "entropy": float(entropy.data), "tv": float(tv.data),
            "psnr": 10.0 * math.log10(1.0 / mse) if mse > 0 else PSNR_CAP_DB,
        }
        self.iteration += 1
        return breakdown

    def _crash_checkpoint(self):
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "crash.ckpt"))

    # -- the full schedule ------------------------------------------------------

    def run(self, log_path: str | None = None) -> str | None:
        """Train to completion; returns the final checkpoint path (if any)."""
        cfg = self.cfg
        header = "iter\tloss\tphoto\tcycle\tper_pt\tentropy\ttv\tpsnr"
        self.log_rows = [header]
        sink = open(log_path, "w") if log_path else None
        if sink:
            sink.write(header + "\n")
            sink.flush()
        t_start = time.monotonic()
        for i in range(cfg.total_iters):
            self.maybe_upsample(i)
            stats = self.train_step()
            if i % cfg.log_every == 0 or i == cfg.total_iters - 1:
                row = (f"{i}\t{stats['loss']:.6g}\t{stats['photo']:.6g}\t"
                       f"{stats['cycle']:.6g}\t{stats['per_pt']:.6g}\t"
                       f"{stats['entropy']:.6g}\t{stats['tv']:.6g}\t{stats['psnr']:.4f}")
                self.log_rows.append(row)
                if sink:
                    sink.write(row + "\n")
                    sink.flush()
            if (cfg.checkpoint_every and self.out_dir and i
                    and i % cfg.checkpoint_every == 0):
                self.save(os.path.join(self.out_dir, f"iter_{i:06d}.ckpt"))
        elapsed = time.monotonic() - t_start
        self.log_rows.append(f"# wall_clock_seconds = {elapsed:.1f}")
        if sink:
            sink.write(self.log_rows[-1] + "\n")
            sink.close()
        if self.out_dir:
            final = os.path.join(self.out_dir, "final.ckpt")
            self.save(final)
            return final
        return None

    # -- persistence ------------------------------------------------------------

    def save(self, path: str) -> None:
        meta = self.model.meta()
        meta.update({
            "iteration": self.iteration,
            "seed": self.cfg.seed,
            "near": f"{self.near:.17g}",
            "far": f"{self.far:.17g}",
            "background": " ".join(f"{v:.17g}" for v in self.cfg.background),
            "n_samples": self.cfg.n_samples,
            "density_eps": f"{self.cfg.density_eps:.17g}",
        })
        checkpoint.save_checkpoint(path, self.model.named_parameters(), meta)


def load_model(path: str):
    """Rebuild a SceneModel (and its render settings) from a checkpoint.

    The engine precision is switched to the checkpoint's dtype so that a
    save/load round-trip reproduces parameters bitwise.
    """
    meta, params = checkpoint.load_checkpoint(path)
    if params:
        engine.set_default_dtype(next(iter(params.values())).dtype)
    mdl = model_mod.SceneModel.from_meta(meta)
    mdl.load_parameters(params)
    settings = {
        "near": float(meta["near"]),
        "far": float(meta["far"]),
        "background": tuple(float(v) for v in meta["background"].split()),
        "n_samples": int(meta["n_samples"]),
        "density_eps": float(meta.get("density_eps", 1e-4)),
    }
    return mdl, settings
