import numpy as np
import pytest

from partrf import parts, rigid
from partrf.model import SceneModel
from partrf.parts import (EditError, EmptySceneError, MergeTrace, build_motion_sequences,
                          choose_stop, extract_parts, merge_groups, parse_edit_script,
                          sample_occupied_points)

from conftest import assert_close
from test_model import tiny_config, tiny_model
from test_rigid import random_sequence


def make_sequences(rng, n_groups, times=None):
    times = np.linspace(0, 1, 6) if times is None else times
    return {i: random_sequence(rng, times) for i in range(n_groups)}


def exhaustive_merge(sequences, counts):
    """Mirror of the greedy rule with a brutally explicit min search."""
    alive = {k: (sequences[k], counts[k]) for k in sequences}
    record = []
    while len(alive) > 1:
        pairs = []
        keys = sorted(alive)
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                pairs.append((rigid.ape(alive[a][0], alive[b][0]), a, b))
        cost, a, b = min(pairs, key=lambda p: (p[0], p[1], p[2]))
        (sa, ca), (sb, cb) = alive[a], alive[b]
        win = a if (ca > cb or (ca == cb and a < b)) else b
        record.append((cost, a, b, win))
        seq = sa if win == a else sb
        del alive[a], alive[b]
        alive[win] = (seq, ca + cb)
    return record


class TestMergeGroups:
    def test_identical_pair_merges_first_at_zero_cost(self, rng):
        times = np.linspace(0, 1, 5)
        s0 = random_sequence(rng, times)
        s1 = rigid.PoseSequence(times, s0.poses.copy())
        far = random_sequence(rng, times)
        trace = merge_groups({0: s0, 1: s1, 2: far}, {0: 5, 1: 3, 2: 4})
        assert trace.steps[0].pair == (0, 1)
        assert trace.steps[0].cost < 1e-9
        assert trace.steps[0].winner == 0  # larger member count

    def test_k_identical_groups_give_k_minus_1_zero_merges(self, rng):
        times = np.linspace(0, 1, 4)
        base = random_sequence(rng, times)
        k = 5
        seqs = {i: rigid.PoseSequence(times, base.poses.copy()) for i in range(k)}
        seqs[k] = random_sequence(rng, times)
        counts = {i: 2 + i for i in range(k + 1)}
        trace = merge_groups(seqs, counts)
        costs = trace.costs()
        assert all(c < 1e-9 for c in costs[:k - 1])
        assert costs[k - 1] > 1e-6

    def test_costs_match_exhaustive_pair_oracle(self, rng):
        for trial in range(25):
            n = int(rng.integers(2, 9))
            seqs = make_sequences(rng, n)
            counts = {i: int(rng.integers(1, 50)) for i in range(n)}
            trace = merge_groups(seqs, counts)
            want = exhaustive_merge(seqs, counts)
            assert len(trace.steps) == len(want) == n - 1
            for step, (cost, a, b, win) in zip(trace.steps, want):
                assert_close(step.cost, cost, rtol=1e-12, atol=1e-12)
                assert step.pair == (a, b)
                assert step.winner == win
            assert all(s.cost >= 0 for s in trace.steps)

    def test_single_group_empty_trace(self, rng):
        trace = merge_groups(make_sequences(rng, 1), {0: 3})
        assert trace.steps == []

    def test_trace_text_round_trip(self, rng, tmp_path):
        trace = merge_groups(make_sequences(rng, 4), {i: i + 1 for i in range(4)})
        p = tmp_path / "trace.tsv"
        trace.save_text(p)
        back = MergeTrace.load_text(p)
        assert [s.pair for s in back.steps] == [s.pair for s in trace.steps]
        assert_close([s.cost for s in back.steps], trace.costs(), rtol=0, atol=0)


class TestChooseStop:
    def test_fixture_trace(self):
        assert choose_stop([0.10, 0.12, 0.15, 2.0]) == 3

    def test_monotone_tiny_increases_degenerate(self):
        # equal increases tie toward the earliest jump
        assert choose_stop([0.1, 0.11, 0.12]) == 1

    def test_zero_then_jump(self):
        assert choose_stop([0.0, 0.0, 5.0]) == 2

    def test_short_traces(self):
        assert choose_stop([]) == 0
        assert choose_stop([0.4]) == 0

    def test_deterministic(self, rng):
        costs = rng.uniform(0, 1, size=9).tolist()
        assert choose_stop(costs) == choose_stop(list(costs))


class TestOccupancy:
    def test_zero_density_model_raises_empty_scene(self, rng):
        m = SceneModel(tiny_config(density_shift=-60.0), rng)
        with pytest.raises(EmptySceneError):
            sample_occupied_points(m, res=16, eps=1e-4)

    def test_infinite_threshold_empty(self, rng):
        m = tiny_model(rng)
        with pytest.raises(EmptySceneError):
            sample_occupied_points(m, res=16, eps=np.inf)

    def test_dense_cube_occupancy_iou(self, rng):
        # craft a crisp density cube: linear trunk, no encoding, huge contrast
        m = SceneModel(tiny_config(strides=(1,), n_freq_feat=0, trunk_depth=1,
                                   canonical_init_res=16, density_shift=-12.0), rng)
        m.trunk[0].w.data = np.full(m.trunk[0].w.shape, 0.1)
        m.trunk[0].b.data[:] = 0.0
        m.sigma_head.w.data = np.full(m.sigma_head.w.shape, 0.1)
        m.sigma_head.b.data[:] = 0.0
        m.canonical_grid.values.data[:] = -1e6
        m.canonical_grid.values.data[4:12, 4:12, 4:12, :] = 20.0

        res_pts = 64
        pts_all = np.stack(np.meshgrid(
            *[np.linspace(m.cfg.aabb[0][a], m.cfg.aabb[1][a], res_pts) for a in range(3)],
            indexing="ij"), axis=-1).reshape(-1, 3)
        kept = sample_occupied_points(m, res=res_pts, eps=1e-4)

        lo = m.cfg.aabb[0] + 4 / 15 * (m.cfg.aabb[1] - m.cfg.aabb[0])
        hi = m.cfg.aabb[0] + 11 / 15 * (m.cfg.aabb[1] - m.cfg.aabb[0])
        analytic = np.all((pts_all >= lo) & (pts_all <= hi), axis=1)
        kept_mask = np.zeros(len(pts_all), dtype=bool)
        kept_set = {tuple(np.round(p, 9)) for p in kept}
        for i, p in enumerate(pts_all):
            kept_mask[i] = tuple(np.round(p, 9)) in kept_set
        inter = np.logical_and(kept_mask, analytic).sum()
        union = np.logical_or(kept_mask, analytic).sum()
        assert inter / union > 0.95


class TestSequencesAndParts:
    def test_identity_model_all_poses_identity(self, rng):
        m = SceneModel(tiny_config(), rng)
        means = {0: np.zeros(m.cfg.motion_channels), 3: rng.normal(size=m.cfg.motion_channels)}
        seqs = build_motion_sequences(m, means, n_times=5)
        for seq in seqs.values():
            assert_close(seq.poses, np.tile(np.eye(4), (5, 1, 1)), rtol=0, atol=0)

    def test_uniform_time_stamps(self, rng):
        m = SceneModel(tiny_config(), rng)
        seqs = build_motion_sequences(m, {0: np.zeros(m.cfg.motion_channels)}, n_times=16)
        assert_close(seqs[0].times, np.linspace(0, 1, 16), rtol=0, atol=0)

    def test_identical_features_give_zero_ape(self, rng):
        m = tiny_model(rng)
        m.rot_head.w.data = rng.normal(size=m.rot_head.w.shape) * 0.3
        feat = rng.normal(size=m.cfg.motion_channels)
        seqs = build_motion_sequences(m, {0: feat, 1: feat.copy()}, n_times=8)
        assert rigid.ape(seqs[0], seqs[1]) < 1e-9

    def test_identity_model_collapses_to_one_part(self, rng):
        m = tiny_model(rng, density_shift=2.0)  # everything occupied
        pm, trace, points, idx = extract_parts(m, res=12, eps=1e-4, n_times=6)
        assert len(pm.parts) == 1
        assert pm.parts[0].count == len(points)

    def test_member_sets_partition_occupied_points(self, rng):
        m = tiny_model(rng, density_shift=2.0)
        m.rot_head.w.data = rng.normal(size=m.rot_head.w.shape) * 2.0
        m.trans_head.w.data = rng.normal(size=m.trans_head.w.shape) * 2.0
        pm, trace, points, idx = extract_parts(m, res=10, eps=1e-4, n_times=5)
        total = sum(p.count for p in pm.parts)
        assert total == len(points)
        covered = np.zeros(len(points), dtype=bool)
        for p in pm.parts:
            mask = np.isin(idx, p.slots)
            assert not (covered & mask).any()  # disjoint
            covered |= mask
        assert covered.all()

    def test_part_model_file_round_trip(self, rng, tmp_path):
        m = tiny_model(rng, density_shift=2.0)
        m.rot_head.w.data = rng.normal(size=m.rot_head.w.shape) * 2.0
        pm, _, _, _ = extract_parts(m, res=10, eps=1e-4, n_times=5)
        parts.save_part_model(pm, str(tmp_path))
        back = parts.load_part_model(str(tmp_path / "parts.txt"))
        assert back.ids() == pm.ids()
        assert back.slot_to_part == pm.slot_to_part
        for a, b in zip(pm.parts, back.parts):
            assert a.count == b.count and a.slots == b.slots
            assert_close(a.feature, b.feature, rtol=0, atol=0)
            assert_close(a.sequence.poses, b.sequence.poses, rtol=0, atol=0)


class TestEditScript:
    def test_parse_all_operations(self):
        text = """
        # comment
        remove 2
        duplicate 1 0.4 0 0
        rescale 3 1.5
        repose 1 0.0 1 0 0 0 1 0 0 0 1 0.1 0 0
        repose 1 1.0 1 0 0 0 1 0 0 0 1 0.2 0 0
        """
        script = parse_edit_script(text)
        kinds = sorted(op.kind for op in script.ops)
        assert kinds == ["duplicate", "remove", "repose", "rescale"]
        rep = [op for op in script.ops if op.kind == "repose"][0]
        assert rep.repose_times.tolist() == [0.0, 1.0]

    def test_bad_lines_rejected(self):
        with pytest.raises(EditError):
            parse_edit_script("duplicate 1 0.4")
        with pytest.raises(EditError):
            parse_edit_script("rescale 1 -2")
        with pytest.raises(EditError):
            parse_edit_script("explode 1")

    def test_unknown_part_rejected_before_render(self, rng):
        m = tiny_model(rng, density_shift=2.0)
        pm, _, _, _ = extract_parts(m, res=8, eps=1e-4, n_times=4)
        script = parse_edit_script("remove 99")
        with pytest.raises(EditError):
            script.validate(pm)
