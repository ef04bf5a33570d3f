"""Rigid motion: 6D rotation decoding, SE(3) maps, trajectories, pose error.

Conventions:
  * a rotation matrix acts on column vectors; batched helpers below take
    row-vector arrays (..., 3) and apply R or R^T accordingly.
  * the world-to-canonical map is x_c = R (x - t); its inverse, used for the
    canonical-to-world direction, is x = R^T x_c + t. The two maps with a
    shared (R, t) are exact mutual inverses.
  * a 4x4 pose P maps canonical points to the world frame at one time step.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import engine
from .engine import Value

_DEGENERACY_EPS = 1e-8


class DegenerateRotationError(ValueError):
    """6D input whose Gram-Schmidt frame is numerically undefined."""


def rotation_from_6d(r6) -> np.ndarray:
    """Decode a 6-vector (first two matrix columns, unconstrained) to R.

    b1 = normalize(a1); b2 = normalize(a2 - (b1.a2) b1); b3 = b1 x b2.
    Raises DegenerateRotationError when ||a1|| or the orthogonalized
    residual falls below 1e-8.
    """
    r6 = np.asarray(r6, dtype=np.float64).reshape(6)
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 < _DEGENERACY_EPS:
        raise DegenerateRotationError(f"first column norm {n1:.2e} below 1e-8")
    b1 = a1 / n1
    u2 = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < _DEGENERACY_EPS:
        raise DegenerateRotationError(f"orthogonal residual {n2:.2e} below 1e-8")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def rotation_columns_from_6d(r6: Value) -> tuple[Value, Value, Value]:
    """Graph variant of rotation_from_6d for batched (N, 6) inputs.

    Returns the three column vectors (N, 3) each; gradients flow to r6.
    Degenerate rows are rejected up front (they cannot occur with the
    identity-biased decoder initialization).
    """
    a1 = r6[:, 0:3]
    a2 = r6[:, 3:6]
    n1sq = engine.vsum(a1 * a1, axis=1, keepdims=True)
    if np.sqrt(n1sq.data.min()) < _DEGENERACY_EPS:
        raise DegenerateRotationError("batched 6D input has a near-zero first column")
    b1 = a1 / engine.sqrt(n1sq)
    d = engine.vsum(b1 * a2, axis=1, keepdims=True)
    u2 = a2 - d * b1
    n2sq = engine.vsum(u2 * u2, axis=1, keepdims=True)
    if np.sqrt(n2sq.data.min()) < _DEGENERACY_EPS:
        raise DegenerateRotationError("batched 6D input has parallel columns")
    b2 = u2 / engine.sqrt(n2sq)
    b3 = cross(b1, b2)
    return b1, b2, b3


def cross(a: Value, b: Value) -> Value:
    """Row-wise cross product of (N, 3) Values."""
    ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return engine.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def rotate_rows(cols: tuple[Value, Value, Value], v: Value) -> Value:
    """Apply R (given by columns) to row vectors: out_i = R v_i."""
    c1, c2, c3 = cols
    return c1 * v[:, 0:1] + c2 * v[:, 1:2] + c3 * v[:, 2:3]


def rotate_rows_t(cols: tuple[Value, Value, Value], v: Value) -> Value:
    """Apply R^T to row vectors: out_i = R^T v_i."""
    c1, c2, c3 = cols
    return engine.concat(
        [engine.vsum(c * v, axis=1, keepdims=True) for c in (c1, c2, c3)], axis=1)


@dataclasses.dataclass
class RigidTransform:
    """A proper rigid motion (R, t); validated to 1e-6 orthonormality."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation block not orthonormal (max error {err:.2e})")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise ValueError(f"rotation determinant {np.linalg.det(self.R):.6f} != +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def eulerian_map(x, transform: RigidTransform) -> np.ndarray:
    """World point(s) to canonical: x_c = R (x - t). Accepts (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    return (x - transform.t) @ transform.R.T


def lagrangian_map(x_c, transform: RigidTransform) -> np.ndarray:
    """Canonical point(s) to world: x = R^T x_c + t; exact inverse of
    eulerian_map for the same transform."""
    x_c = np.asarray(x_c, dtype=np.float64)
    return x_c @ transform.R + transform.t


def pose_matrix(transform: RigidTransform) -> np.ndarray:
    """Homogeneous canonical-to-world pose for one time step."""
    P = np.eye(4)
    P[:3, :3] = transform.R.T
    P[:3, 3] = transform.t
    return P


def se3_inverse(P: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid 4x4 pose."""
    R = P[:3, :3]
    t = P[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


@dataclasses.dataclass
class PoseSequence:
    """Time-stamped 4x4 poses of one motion group over [0, 1]."""

    times: np.ndarray
    poses: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 4, 4)
        if len(self.times) != len(self.poses):
            raise ValueError(
                f"{len(self.times)} timestamps for {len(self.poses)} poses")
        for i, P in enumerate(self.poses):
            err = np.abs(P[:3, :3].T @ P[:3, :3] - np.eye(3)).max()
            if err > 1e-5:
                raise ValueError(f"pose {i} rotation block not orthonormal ({err:.2e})")

    def save_text(self, path) -> None:
        """One row per pose: t r00 r01 ... r22 tx ty tz."""
        with open(path, "w") as fh:
            for t, P in zip(self.times, self.poses):
                fields = [f"{t:.17g}"]
                fields += [f"{v:.17g}" for v in P[:3, :3].reshape(-1)]
                fields += [f"{v:.17g}" for v in P[:3, 3]]
                fh.write(" ".join(fields) + "\n")

    @classmethod
    def load_text(cls, path) -> "PoseSequence":
        times, poses = [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(v) for v in line.split()]
                if len(vals) != 13:
                    raise ValueError(f"{path}: expected 13 fields per row, got {len(vals)}")
                times.append(vals[0])
                P = np.eye(4)
                P[:3, :3] = np.array(vals[1:10]).reshape(3, 3)
                P[:3, 3] = vals[10:13]
                poses.append(P)
        return cls(np.array(times), np.array(poses))


def ape(seq_i: PoseSequence, seq_j: PoseSequence) -> float:
    """Absolute pose error: sum_t ||inv(P_i^t) P_j^t - I||_F.

    The sequences must share identical timestamps.
    """
    if len(seq_i.times) != len(seq_j.times) or not np.array_equal(seq_i.times, seq_j.times):
        raise ValueError("APE requires identical timestamps")
    total = 0.0
    for Pi, Pj in zip(seq_i.poses, seq_j.poses):
        rel = se3_inverse(Pi) @ Pj - np.eye(4)
        total += float(np.linalg.norm(rel))
    return total


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix about a (non-zero) axis by `angle` radians."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("axis must be non-zero")
    x, y, z = axis / n
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
