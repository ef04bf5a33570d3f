"""Dense voxel feature grids: interpolation, encoding, TV penalty, upsampling.

Grids store one trainable feature vector per lattice node over a world-space
axis-aligned box. Nodes sit exactly on the box corners, so a grid of
resolution (Nx, Ny, Nz) has Nx-1 cells along x. Queries outside the box clamp
to the boundary.

Interpolation is implemented as a fused graph op with a hand-written
vector-Jacobian product: the backward pass scatter-adds into the grid via
bincount and routes position gradients through the trilinear weights.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import engine
from .engine import Value

_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)  # (8, 3)


class FeatureGrid3D:
    """Trainable feature lattice over a world-space AABB.

    Args:
        res: (Nx, Ny, Nz) node counts, each >= 2.
        channels: feature dimension C.
        aabb: (2, 3) array, [min corner, max corner], min < max per axis.
        values: optional initial (Nx, Ny, Nz, C) array; zeros otherwise.
    """

    def __init__(self, res, channels: int, aabb, values=None):
        self.res = tuple(int(r) for r in (res if np.ndim(res) else (res, res, res)))
        if len(self.res) != 3 or any(r < 2 for r in self.res):
            raise ValueError(f"grid resolution must be three values >= 2, got {res}")
        self.channels = int(channels)
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        if not np.all(self.aabb[0] < self.aabb[1]):
            raise ValueError(f"aabb min must be < max per axis, got {aabb}")
        shape = (*self.res, self.channels)
        if values is None:
            data = np.zeros(shape)
        else:
            data = np.asarray(values)
            if data.shape != shape:
                raise ValueError(f"values shape {data.shape} != {shape}")
        self.values = Value(data, requires_grad=True)

    def world_to_index(self, x: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) to continuous lattice coordinates."""
        scale = (np.array(self.res) - 1) / (self.aabb[1] - self.aabb[0])
        return (x - self.aabb[0]) * scale

    def node_positions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(
            np.linspace(self.aabb[0][a], self.aabb[1][a], self.res[a]) for a in range(3)
        )


class MultiDistanceConfig:
    """Ordered interpolation strides; the first must be 1."""

    def __init__(self, strides=(1, 2, 4)):
        self.strides = tuple(int(s) for s in strides)
        if not self.strides or self.strides[0] != 1:
            raise ValueError(f"strides must start with 1, got {strides}")
        if any(s < 1 for s in self.strides):
            raise ValueError(f"strides must be positive, got {strides}")

    def validate_for(self, grid: FeatureGrid3D) -> None:
        if max(self.strides) >= min(grid.res):
            raise ValueError(
                f"stride {max(self.strides)} too coarse for grid resolution {grid.res}")


def _interp_graph(values: Value, full_res, index_coords, stride: int) -> Value:
    """Fused trilinear interpolation of a (possibly strided) lattice.

    Args:
        values: grid Value of shape full_res + (C,).
        full_res: node counts of `values`.
        index_coords: query positions in full-lattice index space; ndarray or
            Value of shape (N, 3). Gradients flow to it when it is a Value.
        stride: sample every `stride`-th node starting at 0, interpolating
            over the coarser spacing.
    """
    pos_value = index_coords if isinstance(index_coords, Value) else None
    u_full = index_coords.data if pos_value is not None else np.asarray(index_coords)

    sub_res = np.array([len(range(0, r, stride)) for r in full_res])
    if stride == 1:
        sub = values
    else:
        sub = _strided_slice(values, stride)
    grid_data = sub.data
    channels = grid_data.shape[-1]

    u = u_full / float(stride)
    inside = np.all((u >= 0.0) & (u <= sub_res - 1.0), axis=-1)
    u = np.clip(u, 0.0, sub_res - 1.0)
    i0 = np.minimum(np.floor(u), sub_res - 2.0).astype(np.int64)
    frac = (u - i0).astype(grid_data.dtype)  # (N, 3) in [0, 1]

    # per-axis corner factors and flat node indices, corner-major layout
    fac = np.stack([1.0 - frac, frac], axis=1)  # (N, 2, 3)
    w8 = (fac[:, _CORNERS[:, 0], 0]
          * fac[:, _CORNERS[:, 1], 1]
          * fac[:, _CORNERS[:, 2], 2])  # (N, 8)
    base = (i0[:, 0] * sub_res[1] + i0[:, 1]) * sub_res[2] + i0[:, 2]
    corner_off = (_CORNERS[:, 0] * sub_res[1] + _CORNERS[:, 1]) * sub_res[2] + _CORNERS[:, 2]
    grid2d = grid_data.reshape(-1, channels)

    out_data = np.zeros((len(u), channels), dtype=grid_data.dtype)
    for k in range(8):
        out_data += w8[:, k:k + 1] * grid2d[base + corner_off[k]]

    parents = (sub,) if pos_value is None else (sub, pos_value)

    def bwd(gout):
        if sub.requires_grad or sub._parents:
            flat_all = (base[:, None] + corner_off[None, :]).reshape(-1)  # (8N,)
            gv = np.empty_like(grid2d)
            for c in range(channels):
                contrib = (w8 * gout[:, c:c + 1]).reshape(-1)
                gv[:, c] = np.bincount(flat_all, weights=contrib,
                                       minlength=grid2d.shape[0])
            sub._accumulate_owned(gv.reshape(grid_data.shape))
        if pos_value is not None and (pos_value.requires_grad or pos_value._parents):
            dot = np.empty_like(w8)  # (N, 8): corner feature . upstream grad
            for k in range(8):
                dot[:, k] = np.einsum("nc,nc->n", grid2d[base + corner_off[k]], gout)
            gpos = np.empty_like(frac)
            for a in range(3):
                sign = np.where(_CORNERS[:, a] == 1, 1.0, -1.0).astype(frac.dtype)
                o1, o2 = [b for b in range(3) if b != a]
                part = (fac[:, _CORNERS[:, o1], o1] * fac[:, _CORNERS[:, o2], o2])
                gpos[:, a] = (dot * part * sign[None, :]).sum(axis=1)
            gpos *= inside[:, None].astype(frac.dtype) / float(stride)
            pos_value._accumulate_owned(gpos)

    return Value._from_op(out_data, parents, bwd)


def _strided_slice(values: Value, stride: int) -> Value:
    """Every stride-th node per axis starting at index 0, as a graph op."""
    s = stride
    out_data = np.ascontiguousarray(values.data[::s, ::s, ::s])

    def bwd(g):
        full = np.zeros_like(values.data)
        full[::s, ::s, ::s] = g
        values._accumulate_owned(full)

    return Value._from_op(out_data, (values,), bwd)


def trilinear(grid: FeatureGrid3D, x) -> Value:
    """Interpolate features at world points x; (N, 3) -> (N, C).

    x may be an ndarray or a Value; in the latter case gradients flow into
    the query positions (zeroed where the query clamps at the boundary).
    """
    if isinstance(x, Value):
        scale = (np.array(grid.res) - 1) / (grid.aabb[1] - grid.aabb[0])
        coords = (x - Value(grid.aabb[0])) * Value(scale)
    else:
        coords = grid.world_to_index(np.asarray(x))
    return _interp_graph(grid.values, grid.res, coords, stride=1)


def multi_distance_interp(grid: FeatureGrid3D, x, cfg: MultiDistanceConfig) -> Value:
    """Concatenate trilinear lookups over each strided sub-lattice.

    Output feature dimension is C * len(cfg.strides), in stride order.
    """
    cfg.validate_for(grid)
    if isinstance(x, Value):
        scale = (np.array(grid.res) - 1) / (grid.aabb[1] - grid.aabb[0])
        coords = (x - Value(grid.aabb[0])) * Value(scale)
    else:
        coords = grid.world_to_index(np.asarray(x))
    feats = [_interp_graph(grid.values, grid.res, coords, stride=s) for s in cfg.strides]
    return feats[0] if len(feats) == 1 else engine.concat(feats, axis=-1)


def positional_encoding(v, n_freq: int):
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(n-1) pi v), cos(...)].

    The identity term is always included; n_freq = 0 is a passthrough.
    Accepts a Value or ndarray and returns the same kind.
    """
    if n_freq < 0:
        raise ValueError(f"n_freq must be >= 0, got {n_freq}")
    if n_freq == 0:
        return v
    if isinstance(v, Value):
        parts = [v]
        for k in range(n_freq):
            scaled = v * float((2.0**k) * np.pi)
            parts.append(engine.sin(scaled))
            parts.append(engine.cos(scaled))
        return engine.concat(parts, axis=-1)
    v = np.asarray(v)
    parts = [v]
    for k in range(n_freq):
        scaled = v * ((2.0**k) * np.pi)
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def tv_loss(grid: FeatureGrid3D) -> Value:
    """Mean squared difference between adjacent nodes, over all axes/channels."""
    v = grid.values
    total = None
    count = 0
    for axis in range(3):
        n = grid.res[axis]
        if n < 2:
            continue
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        diff = v[tuple(hi)] - v[tuple(lo)]
        sq = engine.vsum(diff * diff)
        total = sq if total is None else total + sq
        count += (n - 1) * int(np.prod([grid.res[a] for a in range(3) if a != axis])) * grid.channels
    if total is None or count == 0:
        return Value(0.0)
    return total * (1.0 / count)


def upsample_grid(grid: FeatureGrid3D, new_res) -> FeatureGrid3D:
    """Trilinearly resample onto a finer lattice over the same AABB."""
    new_res = tuple(int(r) for r in (new_res if np.ndim(new_res) else (new_res,) * 3))
    if any(n < o for n, o in zip(new_res, grid.res)):
        raise ValueError(f"cannot shrink grid from {grid.res} to {new_res}")
    axes = [
        np.arange(new_res[a]) * ((grid.res[a] - 1) / (new_res[a] - 1)) if new_res[a] > 1
        else np.zeros(1)
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    with engine.no_grad():
        vals = _interp_graph(grid.values, grid.res, coords, stride=1).data
    out = FeatureGrid3D(new_res, grid.channels, grid.aabb,
                        values=vals.reshape(*new_res, grid.channels))
    return out
