"""The learned scene: canonical radiance field plus dual motion fields.

Three trainable blocks share one world AABB:
  * canonical field: multi-distance features from a voxel grid, encoded and
    decoded by a small MLP into (color, density). Density ignores direction.
  * world-to-canonical motion ("eulerian"): a motion grid and a two-layer
    extractor produce a per-query motion feature; two linear heads decode a
    6D rotation and a translation, giving x_c = R (x - t).
  * canonical-to-world motion ("lagrangian"): same construction over the
    canonical grid, but features are first pushed through hard slot grouping
    so that every member of a group moves with one shared rigid transform;
    the decoded map is x = R^T x_c + t.

Both rotation heads start with zero weight and bias (1, 0, 0, 0, 1, 0), the
translation heads with zeros, so the initial deformation is exactly the
identity everywhere.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import engine, grids, rigid
from .engine import Value
from .grids import FeatureGrid3D, MultiDistanceConfig


@dataclasses.dataclass
class ModelConfig:
    """Architecture hyperparameters; grid extents come from the scene AABB."""

    aabb: np.ndarray
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

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        self.strides = tuple(int(s) for s in self.strides)
        if self.slot_count < 1:
            raise ValueError("slot_count must be >= 1")


class Linear:
    """Dense layer y = x W + b with torch-style uniform fan-in init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_weight: bool = False, bias_init=None):
        if zero_weight:
            w = np.zeros((d_in, d_out))
        else:
            k = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-k, k, size=(d_in, d_out))
        b = np.zeros(d_out) if bias_init is None else np.asarray(bias_init, dtype=np.float64)
        self.w = Value(w, requires_grad=True)
        self.b = Value(b, requires_grad=True)

    def __call__(self, x: Value) -> Value:
        return engine.matmul(x, self.w) + self.b


@dataclasses.dataclass
class GroupAssignment:
    """Hard one-hot point-to-slot matrix with straight-through gradients.

    `hard` equals one_hot(argmax(soft)) exactly in the forward pass while
    backpropagating as if it were `soft`. Ties break to the lowest slot.
    """

    soft: Value      # (N, L), rows sum to 1
    hard: Value      # (N, L), one-hot rows
    hard_idx: np.ndarray  # (N,) int slot ids


@dataclasses.dataclass
class MotionOut:
    """One motion-module evaluation on a batch of points."""

    feature: Value                      # (N, motion_dim) low-level motion feature
    rot_cols: tuple                     # three (N, 3) Values, columns of R
    trans: Value                        # (N, 3)
    mapped: Value                       # (N, 3) mapped points
    assignment: GroupAssignment | None  # grouping, lagrangian side only


class SceneModel:
    """Canonical + eulerian + lagrangian fields with shared configuration."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg
        self.mdconfig = MultiDistanceConfig(c.strides)

        self.canonical_grid = FeatureGrid3D(c.canonical_init_res, c.canonical_channels, c.aabb)
        self.eulerian_grid = FeatureGrid3D(c.motion_res, c.motion_channels, c.aabb)
        self.lagrangian_grid = FeatureGrid3D(c.motion_res, c.motion_channels, c.aabb)

        t_dim = 1 + 2 * c.n_freq_time
        feat_in = c.motion_channels + t_dim
        self.extractor_e = [Linear(feat_in, c.hidden, rng), Linear(c.hidden, c.motion_dim, rng)]
        self.extractor_l = [Linear(feat_in, c.hidden, rng), Linear(c.hidden, c.motion_dim, rng)]
        # one decoder pair serves both motion modules: the cycle loss matches
        # the low-level motion features, so sharing the heads is what makes
        # matched features imply matched rigid transforms. Zero weights plus
        # the identity rotation bias give an exact identity deformation at
        # initialization.
        ident6 = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
        self.rot_head = Linear(c.motion_dim, 6, rng, zero_weight=True, bias_init=ident6)
        self.trans_head = Linear(c.motion_dim, 3, rng, zero_weight=True)

        self.slots = Value(rng.standard_normal((c.slot_count, c.slot_dim)), requires_grad=True)
        self.w_q = Linear(c.motion_channels + 3, c.slot_dim, rng)
        self.w_k = Linear(c.slot_dim, c.slot_dim, rng)

        enc_feat = c.canonical_channels * len(c.strides) * (1 + 2 * c.n_freq_feat)
        self.trunk = [Linear(enc_feat, c.hidden, rng)]
        for _ in range(c.trunk_depth - 1):
            self.trunk.append(Linear(c.hidden, c.hidden, rng))
        self.sigma_head = Linear(c.hidden, 1, rng)
        enc_dir = 3 * (1 + 2 * c.n_freq_dir)
        self.color_hidden = Linear(c.hidden + enc_dir, c.hidden, rng)
        self.color_out = Linear(c.hidden, 3, rng)

    # -- parameter registry -------------------------------------------------

    def named_parameters(self):
        """All trainable arrays in a fixed declaration order."""
        out = [
            ("canonical_grid.values", self.canonical_grid.values),
            ("eulerian_grid.values", self.eulerian_grid.values),
            ("lagrangian_grid.values", self.lagrangian_grid.values),
        ]

        def layers(prefix, ls):
            for i, lin in enumerate(ls):
                out.append((f"{prefix}.{i}.w", lin.w))
                out.append((f"{prefix}.{i}.b", lin.b))

        layers("extractor_e", self.extractor_e)
        layers("extractor_l", self.extractor_l)
        layers("rot_head", [self.rot_head])
        layers("trans_head", [self.trans_head])
        out.append(("slots", self.slots))
        layers("w_q", [self.w_q])
        layers("w_k", [self.w_k])
        layers("trunk", self.trunk)
        layers("sigma_head", [self.sigma_head])
        layers("color_hidden", [self.color_hidden])
        layers("color_out", [self.color_out])
        return out

    # -- encodings ------------------------------------------------------------

    def time_encoding(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=engine.get_default_dtype()).reshape(-1, 1)
        return grids.positional_encoding(t, self.cfg.n_freq_time)

    # -- canonical field -------------------------------------------------------

    def canonical_query(self, x_c, dirs) -> tuple[Value, Value]:
        """Color in [0,1]^3 and density >= 0 at canonical points.

        Args:
            x_c: (N, 3) canonical points, ndarray or Value.
            dirs: (N, 3) unit view directions (ndarray; not differentiated).
        Returns:
            (color (N, 3), sigma (N,)); sigma does not depend on dirs.
        """
        feats = grids.multi_distance_interp(self.canonical_grid, x_c, self.mdconfig)
        h = grids.positional_encoding(feats, self.cfg.n_freq_feat)
        for lin in self.trunk:
            h = engine.relu(lin(h))
        sigma = engine.softplus(self.sigma_head(h) + self.cfg.density_shift)
        sigma = engine.reshape(sigma, (-1,))
        enc_d = grids.positional_encoding(
            np.asarray(dirs, dtype=engine.get_default_dtype()), self.cfg.n_freq_dir)
        ch = engine.relu(self.color_hidden(engine.concat([h, Value(enc_d)], axis=1)))
        color = engine.sigmoid(self.color_out(ch))
        return color, sigma

    def density(self, x_c) -> Value:
        """Density only (skips the color branch)."""
        feats = grids.multi_distance_interp(self.canonical_grid, x_c, self.mdconfig)
        h = grids.positional_encoding(feats, self.cfg.n_freq_feat)
        for lin in self.trunk:
            h = engine.relu(lin(h))
        sigma = engine.softplus(self.sigma_head(h) + self.cfg.density_shift)
        return engine.reshape(sigma, (-1,))

    # -- eulerian module ---------------------------------------------------------

    def eulerian_query(self, x: np.ndarray, t: np.ndarray) -> MotionOut:
        """Map world points at time t into the canonical frame.

        Args:
            x: (N, 3) world points (constants).
            t: (N,) times in [0, 1].
        Returns:
            MotionOut with mapped = x_c = R (x - t_vec).
        """
        x = np.asarray(x, dtype=engine.get_default_dtype())
        feat = grids.trilinear(self.eulerian_grid, x)
        enc_t = Value(self.time_encoding(t))
        h = engine.relu(self.extractor_e[0](engine.concat([feat, enc_t], axis=1)))
        f_m = self.extractor_e[1](h)
        cols = rigid.rotation_columns_from_6d(self.rot_head(f_m))
        trans = self.trans_head(f_m)
        x_c = rigid.rotate_rows(cols, Value(x) - trans)
        return MotionOut(feature=f_m, rot_cols=cols, trans=trans, mapped=x_c, assignment=None)

    # -- grouping -------------------------------------------------------------------

    def group_assign(self, points, features: Value, noise: bool = False,
                     rng: np.random.Generator | None = None,
                     tau: float | None = None) -> GroupAssignment:
        """Slot-attention style hard assignment of points to motion groups.

        Similarity row i, slot l: (W_q [f_i ++ x_i]) . (W_k S_l), plus
        Gumbel(0,1) noise per entry when `noise`, softmaxed over slots at
        temperature tau. The hard matrix is the one-hot argmax with
        straight-through gradients.
        """
        if features.shape[0] != np.shape(points)[0]:
            raise ValueError("points/features row counts differ")
        tau = self.cfg.tau if tau is None else float(tau)
        pts = points if isinstance(points, Value) else Value(np.asarray(points))
        fused = engine.concat([features, pts], axis=1)
        q = self.w_q(fused)                      # (N, D)
        k = self.w_k(self.slots)                 # (L, D)
        logits = engine.matmul(q, engine.transpose2d(k))  # (N, L)
        if noise:
            if rng is None:
                raise ValueError("noise=True requires an rng")
            u = rng.uniform(1e-12, 1.0, size=logits.shape)
            logits = logits + Value(-np.log(-np.log(u)))
        soft = engine.softmax(logits * (1.0 / tau), axis=1)
        hard_idx = np.argmax(soft.data, axis=1)
        one_hot = np.zeros_like(soft.data)
        one_hot[np.arange(len(hard_idx)), hard_idx] = 1.0
        # (soft - detach) cancels exactly, so hard is bitwise one-hot forward
        hard = Value(one_hot) + (soft - soft.detach())
        return GroupAssignment(soft=soft, hard=hard, hard_idx=hard_idx)

    @staticmethod
    def group_average(features: Value, assignment: GroupAssignment) -> Value:
        """Replace each point's feature with the mean of its hard group.

        Concatenated coordinates are not part of the averaged payload; only
        the raw grid features are. Gradients follow the straight-through
        assignment matrix on both the membership and the normalization.
        """
        hard = assignment.hard
        counts = engine.vsum(hard, axis=0)                      # (L,)
        safe = counts + (counts.data == 0).astype(counts.dtype)  # guard empty slots
        sums = engine.matmul(engine.transpose2d(hard), features)  # (L, C)
        means = sums / engine.reshape(safe, (-1, 1))
        return engine.matmul(hard, means)

    # -- lagrangian module ---------------------------------------------------------------

    def lagrangian_query(self, x_c, t: np.ndarray, noise: bool = False,
                         rng: np.random.Generator | None = None) -> MotionOut:
        """Track canonical points to their world position at time t.

        Points sharing a hard group share one rigid transform; the map is
        x = R^T x_c + t_vec, the exact inverse of the eulerian map under a
        matched transform.
        """
        pts = x_c if isinstance(x_c, Value) else Value(np.asarray(x_c))
        f_l = grids.trilinear(self.lagrangian_grid, pts)
        assignment = self.group_assign(pts, f_l, noise=noise, rng=rng)
        f_hat = self.group_average(f_l, assignment)
        enc_t = Value(self.time_encoding(t))
        h = engine.relu(self.extractor_l[0](engine.concat([f_hat, enc_t], axis=1)))
        f_m = self.extractor_l[1](h)
        cols = rigid.rotation_columns_from_6d(self.rot_head(f_m))
        trans = self.trans_head(f_m)
        x = rigid.rotate_rows_t(cols, pts) + trans
        return MotionOut(feature=f_m, rot_cols=cols, trans=trans, mapped=x, assignment=assignment)

    def group_features(self, points: np.ndarray) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Inference-time grouping of canonical points (noise off).

        Returns (hard slot id per point, {slot id: mean raw feature}).
        """
        with engine.no_grad():
            pts = np.asarray(points)
            f_l = grids.trilinear(self.lagrangian_grid, pts).data
            assignment = self.group_assign(pts, Value(f_l), noise=False)
        idx = assignment.hard_idx
        means = {}
        for slot in np.unique(idx):
            means[int(slot)] = f_l[idx == slot].mean(axis=0)
        return idx, means

    def decode_group_transform(self, feature: np.ndarray, t: float) -> rigid.RigidTransform:
        """Rigid transform of one group at one time, from its mean feature.

        Decoding happens once per (group, time), so every member point of a
        group receives a bitwise-identical transform.
        """
        with engine.no_grad():
            row = Value(np.asarray(feature).reshape(1, -1))
            enc_t = Value(self.time_encoding(np.array([t])))
            h = engine.relu(self.extractor_l[0](engine.concat([row, enc_t], axis=1)))
            f_m = self.extractor_l[1](h)
            r6 = self.rot_head(f_m).data[0]
            trans = self.trans_head(f_m).data[0]
        return rigid.RigidTransform(rigid.rotation_from_6d(r6), trans)

    # -- persistence -------------------------------------------------------------------------

    def meta(self) -> dict:
        c = self.cfg
        return {
            "aabb": " ".join(f"{v:.17g}" for v in c.aabb.reshape(-1)),
            "motion_res": c.motion_res,
            "motion_channels": c.motion_channels,
            "canonical_res": c.canonical_res,
            "canonical_init_res": c.canonical_init_res,
            "canonical_current_res": self.canonical_grid.res[0],
            "canonical_channels": c.canonical_channels,
            "strides": " ".join(str(s) for s in c.strides),
            "hidden": c.hidden,
            "trunk_depth": c.trunk_depth,
            "motion_dim": c.motion_dim,
            "slot_count": c.slot_count,
            "slot_dim": c.slot_dim,
            "n_freq_feat": c.n_freq_feat,
            "n_freq_time": c.n_freq_time,
            "n_freq_dir": c.n_freq_dir,
            "tau": c.tau,
            "density_shift": c.density_shift,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "SceneModel":
        aabb = np.array([float(v) for v in meta["aabb"].split()]).reshape(2, 3)
        cfg = ModelConfig(
            aabb=aabb,
            motion_res=int(meta["motion_res"]),
            motion_channels=int(meta["motion_channels"]),
            canonical_res=int(meta["canonical_res"]),
            canonical_init_res=int(meta["canonical_init_res"]),
            canonical_channels=int(meta["canonical_channels"]),
            strides=tuple(int(s) for s in meta["strides"].split()),
            hidden=int(meta["hidden"]),
            trunk_depth=int(meta["trunk_depth"]),
            motion_dim=int(meta["motion_dim"]),
            slot_count=int(meta["slot_count"]),
            slot_dim=int(meta["slot_dim"]),
            n_freq_feat=int(meta["n_freq_feat"]),
            n_freq_time=int(meta["n_freq_time"]),
            n_freq_dir=int(meta["n_freq_dir"]),
            tau=float(meta["tau"]),
            density_shift=float(meta["density_shift"]),
        )
        model = cls(cfg, np.random.default_rng(0))
        current = int(meta.get("canonical_current_res", cfg.canonical_init_res))
        if current != model.canonical_grid.res[0]:
            model.canonical_grid = FeatureGrid3D(current, cfg.canonical_channels, cfg.aabb)
        return model

    def load_parameters(self, params: dict) -> None:
        """Assign arrays by name; shape mismatches and missing names reject."""
        own = dict(self.named_parameters())
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in params.items():
            target = own[name]
            if arr.shape != target.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {target.data.shape}")
            target.data = arr.astype(engine.get_default_dtype())
            target.grad = None
