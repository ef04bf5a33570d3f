"""Datasets: monocular manifest loading and an analytic synthetic generator.

The on-disk convention matches the public synthetic-blender layout so real
scenes load unmodified: one `transforms_<split>.json` per split holding a
global `camera_angle_x` plus per-frame records `{file_path, time,
transform_matrix}` (row-major 4x4 camera-to-world). This package adds
optional top-level keys `near`, `far`, and `aabb` (six floats) that training
uses when present.

The generator renders rigid box/sphere primitives with constant interior
density through an independent closed-form ray tracer: per-ray intersection
intervals are composited with the same alpha/transmittance algebra the
learned renderer uses, but integrated exactly instead of by sampling. It
also emits per-pixel part masks (label 0 = background) and ground-truth
trajectories.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import pngio, render, rigid


class DatasetError(ValueError):
    pass


@dataclasses.dataclass
class FrameRecord:
    image_path: str
    time: float
    c2w: np.ndarray


@dataclasses.dataclass
class Dataset:
    root: str
    split: str
    fov_x: float
    frames: list
    images: np.ndarray            # (N, H, W, 3) float in [0, 1], composited
    masks: np.ndarray | None      # (N, H, W) uint8 labels, when present
    near: float | None
    far: float | None
    aabb: np.ndarray | None
    background: np.ndarray

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    def camera(self, index: int) -> render.Camera:
        return render.Camera(self.width, self.height, self.fov_x, self.frames[index].c2w)

    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])


def _frame_image_path(root: str, file_path: str) -> str:
    rel = file_path[2:] if file_path.startswith("./") else file_path
    full = os.path.join(root, rel)
    if not os.path.splitext(full)[1]:
        full += ".png"
    return full


def load_dataset(root: str, split: str = "train", background=(1.0, 1.0, 1.0)) -> Dataset:
    """Load one split; images are composited onto `background`.

    Rejects missing files, malformed matrices, out-of-range times, and
    mixed image sizes, naming the offending path and field.
    """
    manifest = os.path.join(root, f"transforms_{split}.json")
    if not os.path.exists(manifest):
        raise DatasetError(f"{manifest}: manifest not found")
    with open(manifest) as fh:
        doc = json.load(fh)
    if "camera_angle_x" not in doc:
        raise DatasetError(f"{manifest}: missing camera_angle_x")
    fov_x = float(doc["camera_angle_x"])
    background = np.asarray(background, dtype=np.float64).reshape(3)

    frames: list[FrameRecord] = []
    images = []
    masks = []
    size = None
    for i, rec in enumerate(doc.get("frames", [])):
        where = f"{manifest}: frames[{i}]"
        for field in ("file_path", "time", "transform_matrix"):
            if field not in rec:
                raise DatasetError(f"{where}: missing {field}")
        t = float(rec["time"])
        if not (0.0 <= t <= 1.0):
            raise DatasetError(f"{where}: time {t} outside [0, 1]")
        mat = np.asarray(rec["transform_matrix"], dtype=np.float64)
        if mat.shape != (4, 4):
            raise DatasetError(f"{where}: transform_matrix shape {mat.shape} != (4, 4)")
        R = mat[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-4:
            raise DatasetError(f"{where}: rotation block not orthonormal")
        path = _frame_image_path(root, rec["file_path"])
        if not os.path.exists(path):
            raise DatasetError(f"{where}: image {path} not found")
        raw = pngio.read_png(path)
        if raw.ndim == 2:
            raw = np.repeat(raw[..., None], 3, axis=2)
        if size is None:
            size = raw.shape[:2]
        elif raw.shape[:2] != size:
            raise DatasetError(f"{where}: image size {raw.shape[:2]} != {size}")
        rgbf = raw[..., :3].astype(np.float64) / 255.0
        if raw.shape[2] == 4:
            alpha = raw[..., 3:4].astype(np.float64) / 255.0
            rgbf = rgbf * alpha + background * (1.0 - alpha)
        images.append(rgbf.astype(np.float32))
        frames.append(FrameRecord(path, t, mat))

        stem = os.path.splitext(os.path.basename(path))[0]
        mask_path = os.path.join(root, "masks", stem + ".png")
        if os.path.exists(mask_path):
            m = pngio.read_png(mask_path)
            masks.append(m if m.ndim == 2 else m[..., 0])
    if not frames:
        raise DatasetError(f"{manifest}: no frames")

    order = np.argsort([f.time for f in frames], kind="stable")
    frames = [frames[j] for j in order]
    images = [images[j] for j in order]
    if masks and len(masks) == len(frames):
        masks_arr = np.stack([masks[j] for j in order]).astype(np.uint8)
    else:
        masks_arr = None

    aabb = None
    if "aabb" in doc:
        vals = [float(v) for v in doc["aabb"]]
        if len(vals) != 6:
            raise DatasetError(f"{manifest}: aabb must hold 6 floats")
        aabb = np.array(vals).reshape(2, 3)
    return Dataset(
        root=root, split=split, fov_x=fov_x, frames=frames,
        images=np.stack(images), masks=masks_arr,
        near=float(doc["near"]) if "near" in doc else None,
        far=float(doc["far"]) if "far" in doc else None,
        aabb=aabb, background=background)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Primitive:
    """A rigid constant-density body on a linear/constant-rate trajectory."""

    kind: str                 # "box" or "sphere"
    center: np.ndarray
    size: np.ndarray          # box half-extents, or [radius, 0, 0]
    albedo: np.ndarray
    density: float = 40.0
    translate: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))
    rotate_axis: np.ndarray = dataclasses.field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    rotate_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise DatasetError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(-1)
        if self.kind == "box" and (len(self.size) != 3 or np.any(self.size <= 0)):
            raise DatasetError(f"box half-extents must be 3 positive values, got {self.size}")
        if self.kind == "sphere" and self.size[0] <= 0:
            raise DatasetError(f"sphere radius must be positive, got {self.size[0]}")
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.translate = np.asarray(self.translate, dtype=np.float64).reshape(3)
        self.rotate_axis = np.asarray(self.rotate_axis, dtype=np.float64).reshape(3)
        if self.density <= 0:
            raise DatasetError("primitive density must be positive")

    def pose_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Object-to-world rotation and position at time t in [0, 1]."""
        if self.rotate_deg != 0.0:
            R = rigid.axis_angle(self.rotate_axis, np.deg2rad(self.rotate_deg) * t)
        else:
            R = np.eye(3)
        return R, self.center + self.translate * t

    def ray_interval(self, origins: np.ndarray, dirs: np.ndarray, t: float):
        """Entry/exit distances of unit rays; empty hits return t0 >= t1."""
        R, p = self.pose_at(t)
        o = (origins - p) @ R
        d = dirs @ R
        if self.kind == "box":
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                ta = (-self.size - o) * inv
                tb = (self.size - o) * inv
            lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb)).max(axis=1)
            hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb)).min(axis=1)
            return lo, hi
        r = self.size[0]
        b = np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - r * r
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        lo = -b - root
        hi = -b + root
        miss = disc <= 0
        lo = np.where(miss, 0.0, lo)
        hi = np.where(miss, 0.0, hi)
        return lo, hi


@dataclasses.dataclass
class SyntheticSceneSpec:
    """A camera orbit around rigid primitives, one view per time step."""

    primitives: list
    frames: int = 60
    width: int = 64
    height: int = 64
    fov_x_deg: float = 50.0
    orbit_radius: float = 3.0
    orbit_height: float = 0.6
    orbit_start_deg: float = 0.0
    orbit_degrees: float = 120.0
    target: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))
    near: float = 1.5
    far: float = 4.8
    aabb: np.ndarray = dataclasses.field(
        default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))
    background: np.ndarray = dataclasses.field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        if not self.primitives:
            raise DatasetError("scene spec needs at least one primitive")
        if self.frames < 1:
            raise DatasetError("frame count must be >= 1")
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def camera_pose(self, frame: int) -> np.ndarray:
        frac = frame / max(self.frames - 1, 1)
        az = np.deg2rad(self.orbit_start_deg + self.orbit_degrees * frac)
        pos = self.target + np.array([
            self.orbit_radius * np.cos(az),
            self.orbit_radius * np.sin(az),
            self.orbit_height,
        ])
        z = pos - self.target
        z = z / np.linalg.norm(z)
        up = np.array([0.0, 0.0, 1.0])
        x = np.cross(up, z)
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, pos
        return c2w

    def frame_time(self, frame: int) -> float:
        return frame / max(self.frames - 1, 1)


def parse_scene_spec(text: str) -> SyntheticSceneSpec:
    """Parse the line-based scene format (see bundled configs/*.scene)."""
    scalars: dict[str, str] = {}
    prims: list[Primitive] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("primitive "):
            prims.append(_parse_primitive(line, lineno))
        elif "=" in line:
            key, _, value = line.partition("=")
            scalars[key.strip()] = value.strip()
        else:
            raise DatasetError(f"scene spec line {lineno}: cannot parse {raw!r}")

    def vec(key, default):
        if key not in scalars:
            return default
        return np.array([float(v) for v in scalars[key].split()])

    kwargs = dict(primitives=prims)
    for key, cast in (("frames", int), ("width", int), ("height", int),
                      ("fov_x_deg", float), ("orbit_radius", float),
                      ("orbit_height", float), ("orbit_start_deg", float),
                      ("orbit_degrees", float), ("near", float), ("far", float)):
        if key in scalars:
            kwargs[key] = cast(scalars[key])
    kwargs["target"] = vec("target", np.zeros(3))
    kwargs["background"] = vec("background", np.ones(3))
    if "aabb" in scalars:
        kwargs["aabb"] = vec("aabb", None).reshape(2, 3)
    return SyntheticSceneSpec(**kwargs)


def _parse_primitive(line: str, lineno: int) -> Primitive:
    tokens = line.split()
    kind = tokens[1]
    fields: dict[str, list[float]] = {}
    key = None
    for tok in tokens[2:]:
        if "=" in tok:
            key, _, first = tok.partition("=")
            fields[key] = [float(first)] if first else []
        elif key is not None:
            fields[key].append(float(tok))
        else:
            raise DatasetError(f"scene spec line {lineno}: stray token {tok!r}")
    try:
        if kind == "sphere":
            size = [fields["radius"][0], 0.0, 0.0]
        else:
            size = fields["size"]
        return Primitive(
            kind=kind, center=fields["center"], size=size, albedo=fields["albedo"],
            density=fields.get("density", [40.0])[0],
            translate=np.array(fields.get("translate", [0.0, 0.0, 0.0])),
            rotate_axis=np.array(fields.get("rotate_axis", [0.0, 0.0, 1.0])),
            rotate_deg=fields.get("rotate_deg", [0.0])[0])
    except KeyError as exc:
        raise DatasetError(f"scene spec line {lineno}: missing field {exc}") from exc


def trace_frame(spec: SyntheticSceneSpec, c2w: np.ndarray, t: float):
    """Exact volume render of the primitives for one camera/time.

    Returns (straight rgb (H,W,3), alpha (H,W), mask (H,W) uint8). The mask
    labels each pixel with 1 + index of the primitive holding the largest
    share of rendering weight; pixels with accumulated opacity < 0.5 are 0.
    """
    cam = render.Camera(spec.width, spec.height, np.deg2rad(spec.fov_x_deg), c2w)
    rays = render.generate_rays(cam, render.full_frame_pixels(cam), t, spec.near, spec.far)
    n = len(rays)
    nprim = len(spec.primitives)

    t0 = np.empty((n, nprim))
    t1 = np.empty((n, nprim))
    for k, prim in enumerate(spec.primitives):
        lo, hi = prim.ray_interval(rays.origins, rays.dirs, t)
        lo = np.maximum(lo, spec.near)
        hi = np.minimum(hi, spec.far)
        empty = lo >= hi
        t0[:, k] = np.where(empty, spec.far, lo)
        t1[:, k] = np.where(empty, spec.far, hi)

    # event-sorted exact compositing over piecewise-constant density
    times = np.concatenate([t0, t1], axis=1)               # (n, 2P)
    densities = np.array([p.density for p in spec.primitives])
    emit = np.stack([p.density * p.albedo for p in spec.primitives])  # (P, 3)
    delta_sigma = np.concatenate([np.broadcast_to(densities, (n, nprim)),
                                  -np.broadcast_to(densities, (n, nprim))], axis=1)
    member = np.concatenate([np.eye(nprim), -np.eye(nprim)])  # (2P, P)

    order = np.argsort(times, axis=1, kind="stable")
    times_s = np.take_along_axis(times, order, axis=1)
    dsig_s = np.take_along_axis(delta_sigma, order, axis=1)
    active = np.clip(np.cumsum(member[order], axis=1), 0.0, None)  # (n, 2P, P)

    seg_len = np.diff(times_s, axis=1)                      # (n, 2P-1)
    seg_active = active[:, :-1, :]                          # (n, 2P-1, P)
    sig_seg = seg_active @ densities                        # (n, 2P-1)
    od = sig_seg * seg_len
    cum = np.cumsum(od, axis=1) - od
    t_before = np.exp(-cum)
    w_seg = t_before * (1.0 - np.exp(-od))                  # (n, 2P-1)
    acc = w_seg.sum(axis=1)

    emis_seg = seg_active @ emit                            # (n, 2P-1, 3)
    safe = np.where(sig_seg > 0, sig_seg, 1.0)
    seg_color = emis_seg / safe[..., None]
    rgb = (w_seg[..., None] * seg_color).sum(axis=1)

    per_prim_w = (w_seg / safe)[..., None] * (seg_active * densities)  # (n, 2P-1, P)
    prim_weight = per_prim_w.sum(axis=1)                    # (n, P)
    label = np.argmax(prim_weight, axis=1) + 1
    label = np.where(acc >= 0.5, label, 0).astype(np.uint8)

    straight = np.where(acc[:, None] > 0, rgb / np.where(acc[:, None] > 0, acc[:, None], 1.0), 0.0)
    h, w = spec.height, spec.width
    return (straight.reshape(h, w, 3), acc.reshape(h, w), label.reshape(h, w))


def generate_synthetic(spec: SyntheticSceneSpec, out_root: str, rng=None,
                       split: str = "train") -> str:
    """Render a dataset with ground-truth masks and trajectories to disk.

    The tracer is deterministic; `rng` is accepted for interface parity and
    unused. Returns out_root.
    """
    del rng
    img_dir = os.path.join(out_root, split)
    mask_dir = os.path.join(out_root, "masks")
    traj_dir = os.path.join(out_root, "trajectories")
    for d in (img_dir, mask_dir, traj_dir):
        os.makedirs(d, exist_ok=True)

    records = []
    for i in range(spec.frames):
        t = spec.frame_time(i)
        c2w = spec.camera_pose(i)
        rgb, alpha, mask = trace_frame(spec, c2w, t)
        rgba = np.concatenate([pngio.to_uint8(rgb), pngio.to_uint8(alpha)[..., None]], axis=2)
        name = f"r_{i:03d}"
        pngio.write_png(os.path.join(img_dir, name + ".png"), rgba)
        pngio.write_png(os.path.join(mask_dir, name + ".png"), mask)
        records.append({
            "file_path": f"./{split}/{name}",
            "time": t,
            "transform_matrix": c2w.tolist(),
        })

    frame_times = np.array([spec.frame_time(i) for i in range(spec.frames)])
    for k, prim in enumerate(spec.primitives):
        poses = []
        for t in frame_times:
            R, p = prim.pose_at(t)
            P = np.eye(4)
            P[:3, :3] = R
            P[:3, 3] = p
            poses.append(P)
        rigid.PoseSequence(frame_times, np.array(poses)).save_text(
            os.path.join(traj_dir, f"part_{k + 1}.txt"))

    manifest = {
        "camera_angle_x": float(np.deg2rad(spec.fov_x_deg)),
        "near": spec.near,
        "far": spec.far,
        "aabb": [float(v) for v in spec.aabb.reshape(-1)],
        "frames": records,
    }
    with open(os.path.join(out_root, f"transforms_{split}.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out_root
