"""Ray generation, stratified sampling, quadrature rendering, and losses.

Cameras follow the synthetic-blender convention: camera x right, y up, the
optical axis along -z, stored as a 4x4 camera-to-world matrix. Transmittance
is computed as exp(-cumsum(sigma * delta)), which telescopes exactly, so a
constant-density segment reproduces exp(-sigma * length) to round-off for
any sample count.

The rendering pipeline maps every sample into the canonical frame through
the world-to-canonical motion module and shades it there; the
canonical-to-world module enters training only through the feature cycle
loss on occupied samples.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import engine
from .engine import Value


@dataclasses.dataclass
class Camera:
    """Pinhole camera with a shared horizontal field of view (radians)."""

    width: int
    height: int
    fov_x: float
    c2w: np.ndarray

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if not (0.0 < self.fov_x < np.pi):
            raise ValueError(f"fov_x must be in (0, pi), got {self.fov_x}")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)


@dataclasses.dataclass
class RayBatch:
    """Rays with per-ray integration bounds and a capture time."""

    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray     # (B, 3) unit
    near: np.ndarray     # (B,)
    far: np.ndarray      # (B,)
    times: np.ndarray    # (B,)
    pixels: np.ndarray | None = None  # (B, 2) integer (x, y)

    def __len__(self):
        return len(self.origins)

    def select(self, mask) -> "RayBatch":
        return RayBatch(self.origins[mask], self.dirs[mask], self.near[mask],
                        self.far[mask], self.times[mask],
                        None if self.pixels is None else self.pixels[mask])


def generate_rays(camera: Camera, pixels: np.ndarray, time: float,
                  near: float, far: float) -> RayBatch:
    """Back-project pixel centers through the camera.

    Args:
        camera: intrinsics + pose; focal must be positive.
        pixels: (B, 2) integer (x, y) pixel indices.
        time: capture time carried by every ray.
        near, far: integration bounds, near < far.
    """
    if not np.isfinite(camera.focal) or camera.focal <= 0:
        raise ValueError(f"invalid focal {camera.focal}")
    if not near < far:
        raise ValueError(f"near {near} must be < far {far}")
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    f = camera.focal
    x = (pixels[:, 0] + 0.5 - camera.width / 2.0) / f
    y = -(pixels[:, 1] + 0.5 - camera.height / 2.0) / f
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
    R = camera.c2w[:3, :3]
    dirs = dirs_cam @ R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    b = len(pixels)
    return RayBatch(origins, dirs, np.full(b, float(near)), np.full(b, float(far)),
                    np.full(b, float(time)), pixels)


def full_frame_pixels(camera: Camera) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def project(camera: Camera, points: np.ndarray) -> np.ndarray:
    """World points (N, 3) to continuous pixel coordinates (N, 2)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = (points - camera.c2w[:3, 3]) @ camera.c2w[:3, :3]
    depth = -rel[:, 2]
    f = camera.focal
    px = f * rel[:, 0] / depth + camera.width / 2.0 - 0.5
    py = -f * rel[:, 1] / depth + camera.height / 2.0 - 0.5
    return np.stack([px, py], axis=1)


def clip_rays_to_aabb(rays: RayBatch, aabb: np.ndarray) -> tuple[RayBatch, np.ndarray]:
    """Intersect each ray's [near, far] with the box; returns (rays, hit mask).

    Misses keep their original bounds but are flagged False; callers shade
    only the hits and composite pure background for the rest.
    """
    aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.dirs
        t0 = (aabb[0] - rays.origins) * inv
        t1 = (aabb[1] - rays.origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
    near = np.maximum(rays.near, lo)
    far = np.minimum(rays.far, hi)
    hit = near < far
    out = RayBatch(rays.origins, rays.dirs,
                   np.where(hit, near, rays.near), np.where(hit, far, rays.far),
                   rays.times, rays.pixels)
    return out, hit


def sample_points(rays: RayBatch, n: int, stratified: bool,
                  rng: np.random.Generator | None = None):
    """Quadrature nodes along each ray: uniform bins, one sample per bin.

    Unstratified sampling lands on bin centers; stratified draws uniformly
    inside each bin. delta is the constant bin width, so it always sums to
    far - near exactly.

    Returns:
        z: (B, n) depths; delta: (B, n) interval lengths; points: (B, n, 3).
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    b = len(rays)
    width = (rays.far - rays.near) / n  # (B,)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling requires an rng")
        jitter = rng.uniform(0.0, 1.0, size=(b, n))
    else:
        jitter = np.full((b, n), 0.5)
    z = rays.near[:, None] + (np.arange(n)[None, :] + jitter) * width[:, None]
    delta = np.broadcast_to(width[:, None], (b, n)).copy()
    points = rays.origins[:, None, :] + z[..., None] * rays.dirs[:, None, :]
    return z, delta, points


@dataclasses.dataclass
class RenderOutput:
    rgb: Value            # (B, 3)
    acc: Value            # (B,)
    depth: Value | None   # (B,)
    weights: Value        # (B, S)
    t_final: Value        # (B,)


def volume_render(sigma: Value, color: Value, delta: np.ndarray,
                  background, z: np.ndarray | None = None,
                  far: np.ndarray | None = None) -> RenderOutput:
    """Alpha-composite samples along rays.

    alpha_i = 1 - exp(-sigma_i delta_i); T_i = exp(-sum_{j<i} sigma_j delta_j);
    w_i = T_i alpha_i; rgb = sum w_i c_i + T_final * background. Expected
    depth is sum w_i z_i + T_final * far when z is provided.
    """
    if np.any(sigma.data < 0):
        raise ValueError("volume_render requires sigma >= 0")
    background = np.asarray(background, dtype=engine.get_default_dtype()).reshape(3)
    sdelta = sigma * Value(delta)
    cum = engine.cumsum_exclusive(sdelta, axis=1)
    trans = engine.exp(engine.neg(cum))
    alpha = 1.0 - engine.exp(engine.neg(sdelta))
    weights = trans * alpha
    t_final = engine.exp(engine.neg(engine.vsum(sdelta, axis=1)))
    acc = engine.vsum(weights, axis=1)
    w3 = engine.reshape(weights, (*weights.shape, 1))
    rgb = engine.vsum(w3 * color, axis=1) + engine.reshape(t_final, (-1, 1)) * Value(background)
    depth = None
    if z is not None:
        depth = engine.vsum(weights * Value(z), axis=1)
        if far is not None:
            depth = depth + t_final * Value(far)
    return RenderOutput(rgb=rgb, acc=acc, depth=depth, weights=weights, t_final=t_final)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def photometric_loss(rendered: Value, target: np.ndarray) -> Value:
    """Mean over rays of the squared color error (summed over channels)."""
    diff = rendered - Value(np.asarray(target))
    return engine.vsum(diff * diff) * (1.0 / rendered.shape[0])


def per_point_loss(weights: Value, colors: Value, target: np.ndarray) -> Value:
    """Weight-modulated per-sample color supervision, averaged over rays."""
    target = np.asarray(target)
    diff = colors - Value(target[:, None, :])
    sq = engine.vsum(diff * diff, axis=2)  # (B, S)
    return engine.vsum(weights * sq) * (1.0 / weights.shape[0])


def entropy_loss(acc: Value) -> Value:
    """Mean binary entropy of per-ray opacity, pushing it toward {0, 1}."""
    a = engine.clip(acc, 1e-6, 1.0 - 1e-6)
    ent = engine.neg(a * engine.log(a) + (1.0 - a) * engine.log(1.0 - a))
    return engine.vmean(ent)


def binary_entropy(a: float) -> float:
    a = min(max(float(a), 1e-6), 1.0 - 1e-6)
    return -(a * np.log(a) + (1.0 - a) * np.log(1.0 - a))


def cycle_loss(sigma, f_eulerian: Value, f_lagrangian: Value, eps: float = 1e-4) -> Value:
    """Mean squared motion-feature difference over occupied points.

    Only points with density above eps count; an empty selection gives 0.
    """
    sigma_data = sigma.data if isinstance(sigma, Value) else np.asarray(sigma)
    mask = sigma_data > eps
    count = int(mask.sum())
    if count == 0:
        return Value(0.0)
    idx = np.nonzero(mask)[0]
    fe = engine.take_rows(f_eulerian, idx) if count != len(sigma_data) else f_eulerian
    fl = engine.take_rows(f_lagrangian, idx) if count != len(sigma_data) else f_lagrangian
    diff = fe - fl
    return engine.vsum(diff * diff) * (1.0 / count)


# ---------------------------------------------------------------------------
# full-frame rendering (inference)
# ---------------------------------------------------------------------------


def render_image(model, camera: Camera, time: float, near: float, far: float,
                 n_samples: int, background=(1.0, 1.0, 1.0), chunk: int = 8192):
    """Render one frame; returns float arrays (rgb HxWx3, depth HxW, acc HxW).

    Depth is expected ray depth, with full-miss pixels at the far bound.
    """
    pixels = full_frame_pixels(camera)
    h, w = camera.height, camera.width
    rgb = np.zeros((h * w, 3))
    depth = np.full(h * w, float(far))
    acc = np.zeros(h * w)
    bg = np.asarray(background, dtype=np.float64)
    aabb = model.cfg.aabb
    with engine.no_grad():
        for start in range(0, len(pixels), chunk):
            piece = pixels[start:start + chunk]
            rays = generate_rays(camera, piece, time, near, far)
            rays, hit = clip_rays_to_aabb(rays, aabb)
            rows = np.arange(start, start + len(piece))
            rgb[rows[~hit]] = bg
            if not hit.any():
                continue
            hit_rays = rays.select(hit)
            z, delta, pts = sample_points(hit_rays, n_samples, stratified=False)
            flat = pts.reshape(-1, 3)
            times = np.repeat(hit_rays.times, n_samples)
            eul = model.eulerian_query(flat, times)
            dirs_rep = np.repeat(hit_rays.dirs, n_samples, axis=0)
            color, sigma = model.canonical_query(eul.mapped, dirs_rep)
            out = volume_render(
                engine.reshape(sigma, z.shape),
                engine.reshape(color, (*z.shape, 3)),
                delta, bg, z=z, far=hit_rays.far)
            rgb[rows[hit]] = out.rgb.data
            depth[rows[hit]] = out.depth.data
            acc[rows[hit]] = out.acc.data
    return rgb.reshape(h, w, 3), depth.reshape(h, w), acc.reshape(h, w)
