"""Post-training part discovery, segmentation rendering, and scene editing.

Pipeline: sample a canonical lattice, keep occupied points, hard-group them
(noise off), decode one pose sequence per group from its mean feature, then
greedily merge the closest pair by absolute pose error until one group
remains, recording each cost. The stop rule cuts the trace before the
largest cost jump; merges that are free (cost ~ 0, duplicate trajectories)
are always applied.

Edits never touch learned parameters: they are render-time density and
transform overrides composed with each part's decoded trajectory.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from . import engine, grids, render, rigid
from .engine import Value

ZERO_COST = 1e-9


class EmptySceneError(RuntimeError):
    pass


class EditError(ValueError):
    pass


# ---------------------------------------------------------------------------
# occupancy + grouping
# ---------------------------------------------------------------------------


def sample_occupied_points(model, res: int = 64, eps: float = 1e-4,
                           chunk: int = 65536) -> np.ndarray:
    """Lattice points over the canonical AABB whose density exceeds eps."""
    aabb = model.cfg.aabb
    axes = [np.linspace(aabb[0][a], aabb[1][a], res) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    keep = []
    with engine.no_grad():
        for start in range(0, len(pts), chunk):
            piece = pts[start:start + chunk]
            sigma = model.density(piece).data
            keep.append(piece[sigma > eps])
    points = np.concatenate(keep) if keep else np.zeros((0, 3))
    if len(points) == 0:
        raise EmptySceneError(f"no canonical lattice point has density > {eps}")
    return points


def build_motion_sequences(model, means: dict[int, np.ndarray],
                           n_times: int = 16) -> dict[int, rigid.PoseSequence]:
    """Decode each group's trajectory at uniform times in [0, 1]."""
    times = np.linspace(0.0, 1.0, n_times)
    out = {}
    for slot, feature in sorted(means.items()):
        poses = [rigid.pose_matrix(model.decode_group_transform(feature, t)) for t in times]
        out[slot] = rigid.PoseSequence(times, np.array(poses))
    return out


# ---------------------------------------------------------------------------
# merging
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class MergeStep:
    step: int            # 1-based merge index
    pair: tuple          # (label_i, label_j), labels are slot ids
    cost: float
    winner: int          # label whose sequence/feature survives


@dataclasses.dataclass
class MergeTrace:
    steps: list

    def costs(self) -> list:
        return [s.cost for s in self.steps]

    def save_text(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step\tgroup_i\tgroup_j\tcost\twinner\n")
            for s in self.steps:
                fh.write(f"{s.step}\t{s.pair[0]}\t{s.pair[1]}\t{s.cost:.17g}\t{s.winner}\n")

    @classmethod
    def load_text(cls, path) -> "MergeTrace":
        steps = []
        with open(path) as fh:
            next(fh)
            for line in fh:
                f = line.split()
                steps.append(MergeStep(int(f[0]), (int(f[1]), int(f[2])), float(f[3]), int(f[4])))
        return cls(steps)


def merge_groups(sequences: dict[int, rigid.PoseSequence],
                 counts: dict[int, int]) -> MergeTrace:
    """Greedy agglomeration by smallest pairwise APE down to one group.

    The merged group keeps the sequence (and identity) of the member with
    the larger point count, ties toward the lower label. Fewer than two
    groups produce an empty trace.
    """
    alive = {label: (sequences[label], int(counts[label])) for label in sequences}
    steps: list[MergeStep] = []
    step = 0
    while len(alive) >= 2:
        labels = sorted(alive)
        best = None
        for a_i in range(len(labels)):
            for b_i in range(a_i + 1, len(labels)):
                la, lb = labels[a_i], labels[b_i]
                cost = rigid.ape(alive[la][0], alive[lb][0])
                if best is None or cost < best[0]:
                    best = (cost, la, lb)
        cost, la, lb = best
        (seq_a, cnt_a), (seq_b, cnt_b) = alive[la], alive[lb]
        if cnt_a > cnt_b or (cnt_a == cnt_b and la < lb):
            winner, seq = la, seq_a
        else:
            winner, seq = lb, seq_b
        step += 1
        steps.append(MergeStep(step, (la, lb), float(cost), winner))
        del alive[la], alive[lb]
        alive[winner] = (seq, cnt_a + cnt_b)
    return MergeTrace(steps)


def choose_stop(trace) -> int:
    """Number of merges to keep: stop just before the largest cost increase.

    With fewer than two recorded merges there is no increase to compare, so
    nothing is undone beyond the trace itself (stop = 0). Equal increases
    break toward the earliest jump; a trace whose increases are all tiny
    therefore stops after its first merge (degenerate but deterministic).
    """
    costs = trace.costs() if isinstance(trace, MergeTrace) else list(trace)
    if len(costs) < 2:
        return 0
    diffs = np.diff(costs)
    jump = int(np.argmax(diffs)) + 1  # index into costs of the jump step
    return jump


def _merges_to_apply(trace: MergeTrace) -> int:
    """choose_stop, but free merges (duplicate trajectories) always apply."""
    stop = choose_stop(trace)
    leading_free = 0
    for s in trace.steps:
        if s.cost <= ZERO_COST:
            leading_free += 1
        else:
            break
    return max(stop, leading_free)


# ---------------------------------------------------------------------------
# parts
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Part:
    id: int
    slots: list
    count: int
    centroid: np.ndarray
    feature: np.ndarray
    sequence: rigid.PoseSequence


@dataclasses.dataclass
class PartModel:
    parts: list
    slot_to_part: dict       # slot id -> part id; unmapped slots are background

    def part(self, part_id: int) -> Part:
        for p in self.parts:
            if p.id == part_id:
                return p
        raise KeyError(f"no part {part_id}")

    def ids(self) -> list:
        return [p.id for p in self.parts]


def extract_parts(model, res: int = 64, eps: float = 1e-4, n_times: int = 16,
                  merges: int | None = None):
    """Full discovery: occupancy, grouping, merging, and the PartModel.

    Returns (PartModel, MergeTrace, occupied points, hard slot index).
    `merges` overrides the stop rule when given.
    """
    points = sample_occupied_points(model, res=res, eps=eps)
    hard_idx, means = model.group_features(points)
    counts = {slot: int((hard_idx == slot).sum()) for slot in means}
    sequences = build_motion_sequences(model, means, n_times=n_times)
    trace = merge_groups(sequences, counts)
    n_apply = _merges_to_apply(trace) if merges is None else int(merges)

    # replay the kept merges to map each slot to its surviving label
    members: dict[int, list] = {slot: [slot] for slot in means}
    for s in trace.steps[:n_apply]:
        la, lb = s.pair
        loser = lb if s.winner == la else la
        members[s.winner].extend(members.pop(loser))

    final_labels = sorted(members)
    parts = []
    slot_to_part = {}
    for pid, label in enumerate(final_labels, start=1):
        slots = sorted(members[label])
        mask = np.isin(hard_idx, slots)
        parts.append(Part(
            id=pid, slots=slots, count=int(mask.sum()),
            centroid=points[mask].mean(axis=0),
            feature=means[label], sequence=sequences[label]))
        for slot in slots:
            slot_to_part[slot] = pid
    return PartModel(parts, slot_to_part), trace, points, hard_idx


def save_part_model(pm: PartModel, out_dir: str) -> str:
    """Write parts.txt plus one trajectory table per part; returns the path."""
    os.makedirs(out_dir, exist_ok=True)
    traj_dir = os.path.join(out_dir, "part_trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    path = os.path.join(out_dir, "parts.txt")
    with open(path, "w") as fh:
        fh.write("partrf-parts-v1\n")
        for p in pm.parts:
            rel = os.path.join("part_trajectories", f"part_{p.id}.txt")
            p.sequence.save_text(os.path.join(out_dir, rel))
            fields = [
                f"part id={p.id}",
                "count=" + str(p.count),
                "centroid=" + " ".join(f"{v:.17g}" for v in p.centroid),
                "slots=" + " ".join(str(s) for s in p.slots),
                "feature=" + " ".join(f"{v:.17g}" for v in p.feature),
                "trajectory=" + rel,
            ]
            fh.write(" ".join(fields) + "\n")
    return path


def load_part_model(path: str) -> PartModel:
    base = os.path.dirname(path)
    parts = []
    slot_to_part = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "partrf-parts-v1":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            tokens = line.split()
            if tokens[0] != "part":
                raise ValueError(f"{path}: malformed record {line!r}")
            fields: dict[str, list] = {}
            key = None
            for tok in tokens[1:]:
                if "=" in tok:
                    key, _, first = tok.partition("=")
                    fields[key] = [first] if first else []
                else:
                    fields[key].append(tok)
            pid = int(fields["id"][0])
            slots = [int(s) for s in fields["slots"]]
            seq = rigid.PoseSequence.load_text(os.path.join(base, fields["trajectory"][0]))
            parts.append(Part(
                id=pid, slots=slots, count=int(fields["count"][0]),
                centroid=np.array([float(v) for v in fields["centroid"]]),
                feature=np.array([float(v) for v in fields["feature"]]),
                sequence=seq))
            for s in slots:
                slot_to_part[s] = pid
    return PartModel(parts, slot_to_part)


# ---------------------------------------------------------------------------
# segmentation rendering
# ---------------------------------------------------------------------------


def _sample_part_ids(model, pm: PartModel, x_c: np.ndarray) -> np.ndarray:
    with engine.no_grad():
        f_l = grids.trilinear(model.lagrangian_grid, x_c)
        assignment = model.group_assign(x_c, f_l, noise=False)
    lut = np.zeros(model.cfg.slot_count, dtype=np.int64)
    for slot, pid in pm.slot_to_part.items():
        lut[slot] = pid
    return lut[assignment.hard_idx]


def render_segmentation(model, pm: PartModel, camera: render.Camera, time: float,
                        near: float, far: float, n_samples: int,
                        chunk: int = 8192) -> np.ndarray:
    """Per-pixel part labels: the part of the max-weight sample, or 0.

    Pixels whose accumulated opacity is below 0.5 are background. Grouping
    lives in canonical space, so labels are consistent across views/time.
    """
    pixels = render.full_frame_pixels(camera)
    labels = np.zeros(len(pixels), dtype=np.uint8)
    with engine.no_grad():
        for start in range(0, len(pixels), chunk):
            piece = pixels[start:start + chunk]
            rays = render.generate_rays(camera, piece, time, near, far)
            rays, hit = render.clip_rays_to_aabb(rays, model.cfg.aabb)
            if not hit.any():
                continue
            hit_rays = rays.select(hit)
            z, delta, pts = render.sample_points(hit_rays, n_samples, stratified=False)
            flat = pts.reshape(-1, 3)
            times = np.repeat(hit_rays.times, n_samples)
            eul = model.eulerian_query(flat, times)
            sigma = model.density(eul.mapped)
            out = render.volume_render(
                engine.reshape(sigma, z.shape),
                engine.reshape(Value(np.zeros((len(flat), 3))), (*z.shape, 3)),
                delta, (0.0, 0.0, 0.0))
            weights = out.weights.data
            acc = out.acc.data
            pid = _sample_part_ids(model, pm, eul.mapped.data).reshape(z.shape)
            best = np.argmax(weights, axis=1)
            ray_label = pid[np.arange(len(best)), best]
            ray_label = np.where(acc >= 0.5, ray_label, 0)
            rows = np.arange(start, start + len(piece))
            labels[rows[hit]] = ray_label.astype(np.uint8)
    return labels.reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class EditOp:
    kind: str                       # remove | duplicate | rescale | repose
    part: int
    offset: np.ndarray | None = None      # duplicate: 4x4 world-space offset
    factor: float | None = None           # rescale
    repose_times: np.ndarray | None = None
    repose_poses: np.ndarray | None = None


@dataclasses.dataclass
class EditScript:
    ops: list

    def validate(self, pm: PartModel) -> None:
        known = set(pm.ids())
        for op in self.ops:
            if op.part not in known:
                raise EditError(f"edit references unknown part id {op.part}")


def parse_edit_script(text: str) -> EditScript:
    """One operation per line::

        remove <part>
        duplicate <part> <tx> <ty> <tz> [r00 r01 ... r22]
        rescale <part> <factor>
        repose <part> <time> <r00> ... <r22> <tx> <ty> <tz>

    Repose rows for the same part stack into a time-indexed override.
    """
    ops: list[EditOp] = []
    repose_acc: dict[int, list] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0]
        try:
            if kind == "remove":
                ops.append(EditOp("remove", int(tok[1])))
            elif kind == "duplicate":
                part = int(tok[1])
                vals = [float(v) for v in tok[2:]]
                if len(vals) not in (3, 12):
                    raise ValueError("duplicate takes 3 or 12 numbers")
                M = np.eye(4)
                M[:3, 3] = vals[:3]
                if len(vals) == 12:
                    M[:3, :3] = np.array(vals[3:]).reshape(3, 3)
                ops.append(EditOp("duplicate", part, offset=M))
            elif kind == "rescale":
                f = float(tok[2])
                if f <= 0:
                    raise ValueError("rescale factor must be positive")
                ops.append(EditOp("rescale", int(tok[1]), factor=f))
            elif kind == "repose":
                part = int(tok[1])
                vals = [float(v) for v in tok[2:]]
                if len(vals) != 13:
                    raise ValueError("repose takes time + 9 rotation + 3 translation")
                P = np.eye(4)
                P[:3, :3] = np.array(vals[1:10]).reshape(3, 3)
                P[:3, 3] = vals[10:13]
                repose_acc.setdefault(part, []).append((vals[0], P))
            else:
                raise ValueError(f"unknown operation {kind!r}")
        except (IndexError, ValueError) as exc:
            raise EditError(f"edit script line {lineno}: {exc}") from exc
    for part, rows in repose_acc.items():
        rows.sort(key=lambda r: r[0])
        ops.append(EditOp("repose", part,
                          repose_times=np.array([r[0] for r in rows]),
                          repose_poses=np.array([r[1] for r in rows])))
    return EditScript(ops)


def _part_pose(model, pm: PartModel, part_id: int, t: float) -> np.ndarray:
    return rigid.pose_matrix(model.decode_group_transform(pm.part(part_id).feature, t))


def _repose_pose(op: EditOp, t: float) -> np.ndarray:
    idx = int(np.argmin(np.abs(op.repose_times - t)))
    return op.repose_poses[idx]


def render_edited(model, pm: PartModel, script: EditScript, camera: render.Camera,
                  time: float, near: float, far: float, n_samples: int,
                  background=(1.0, 1.0, 1.0), chunk: int = 4096):
    """Render one frame honoring the edit script.

    An empty script takes the unedited code path, so its output is
    bit-identical to `render.render_image`. Removed (and re-posed/rescaled)
    parts contribute zero density on the base pass; override streams add
    density/color looked up through each part's composed transform.
    """
    script.validate(pm)
    if not script.ops:
        return render.render_image(model, camera, time, near, far, n_samples,
                                   background=background)[0]

    removed = {op.part for op in script.ops if op.kind in ("remove", "rescale", "repose")}
    streams = [op for op in script.ops if op.kind in ("duplicate", "rescale", "repose")]
    bg = np.asarray(background, dtype=np.float64)
    h, w = camera.height, camera.width
    img = np.zeros((h * w, 3))
    pixels = render.full_frame_pixels(camera)

    with engine.no_grad():
        for start in range(0, len(pixels), chunk):
            piece = pixels[start:start + chunk]
            rays = render.generate_rays(camera, piece, time, near, far)
            rays, hit = render.clip_rays_to_aabb(rays, model.cfg.aabb)
            rows = np.arange(start, start + len(piece))
            img[rows[~hit]] = bg
            if not hit.any():
                continue
            hit_rays = rays.select(hit)
            z, delta, pts = render.sample_points(hit_rays, n_samples, stratified=False)
            flat = pts.reshape(-1, 3)
            times_rep = np.repeat(hit_rays.times, n_samples)
            dirs_rep = np.repeat(hit_rays.dirs, n_samples, axis=0)

            eul = model.eulerian_query(flat, times_rep)
            color, sigma = model.canonical_query(eul.mapped, dirs_rep)
            sigma_np = sigma.data.copy()
            color_np = color.data.copy()
            if removed:
                pid = _sample_part_ids(model, pm, eul.mapped.data)
                keep = ~np.isin(pid, list(removed))
                sigma_np *= keep

            sig_streams = [sigma_np]
            col_streams = [color_np]
            for op in streams:
                if op.kind == "duplicate":
                    M = op.offset @ _part_pose(model, pm, op.part, time)
                    cand = (flat - M[:3, 3]) @ np.linalg.inv(M[:3, :3]).T
                elif op.kind == "rescale":
                    P = _part_pose(model, pm, op.part, time)
                    g = pm.part(op.part).centroid
                    local = (flat - P[:3, 3]) @ np.linalg.inv(P[:3, :3]).T
                    cand = g + (local - g) / op.factor
                else:  # repose
                    M = _repose_pose(op, time)
                    cand = (flat - M[:3, 3]) @ np.linalg.inv(M[:3, :3]).T
                pid_c = _sample_part_ids(model, pm, cand)
                mask = pid_c == op.part
                if not mask.any():
                    continue
                c_s, s_s = model.canonical_query(cand, dirs_rep)
                sig_streams.append(s_s.data * mask)
                col_streams.append(c_s.data)

            sig_tot = np.sum(sig_streams, axis=0)
            safe = np.where(sig_tot > 0, sig_tot, 1.0)
            col_tot = np.zeros_like(color_np)
            for s_s, c_s in zip(sig_streams, col_streams):
                col_tot += (s_s / safe)[:, None] * c_s

            out = render.volume_render(
                engine.reshape(Value(sig_tot), z.shape),
                engine.reshape(Value(col_tot), (*z.shape, 3)),
                delta, bg)
            img[rows[hit]] = out.rgb.data
    return img.reshape(h, w, 3)
