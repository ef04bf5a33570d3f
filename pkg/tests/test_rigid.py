import numpy as np
import pytest

from partrf import engine, rigid
from partrf.engine import Value
from partrf.rigid import (DegenerateRotationError, PoseSequence, RigidTransform,
                          ape, eulerian_map, lagrangian_map, pose_matrix,
                          rotation_from_6d, se3_inverse)

from conftest import assert_close, grad_check


def random_rotation(rng) -> np.ndarray:
    return rotation_from_6d(rng.normal(size=6))


class TestRotation6D:
    def test_identity_bias_decodes_to_identity(self):
        R = rotation_from_6d([1, 0, 0, 0, 1, 0])
        assert_close(R, np.eye(3), rtol=0, atol=0)

    def test_hand_gram_schmidt(self):
        R = rotation_from_6d([0, 1, 0, 1, 0, 0])
        want = np.array([[0, 1, 0], [1, 0, 0], [0, 0, -1.0]])
        assert_close(R, want, rtol=0, atol=1e-12)
        assert_close(np.linalg.det(R), 1.0, rtol=0, atol=1e-12)

    def test_orthonormality_on_random_inputs(self, rng):
        for _ in range(10_000):
            R = rotation_from_6d(rng.normal(size=6))
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
            assert abs(np.linalg.det(R) - 1.0) < 1e-6

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(DegenerateRotationError):
            rotation_from_6d([0, 0, 0, 0, 1, 0])
        with pytest.raises(DegenerateRotationError):
            rotation_from_6d([1, 0, 0, 2, 0, 0])  # parallel columns

    def test_batched_variant_matches_single(self, rng):
        r6 = rng.normal(size=(5, 6))
        b1, b2, b3 = rigid.rotation_columns_from_6d(Value(r6))
        for i in range(5):
            R = rotation_from_6d(r6[i])
            got = np.stack([b1.data[i], b2.data[i], b3.data[i]], axis=1)
            assert_close(got, R, rtol=1e-12, atol=1e-12)

    def test_gradients_away_from_degeneracy(self, rng):
        r6 = rng.normal(size=(3, 6)) + np.array([2, 0, 0, 0, 2, 0])  # well-conditioned

        def f(v):
            b1, b2, b3 = rigid.rotation_columns_from_6d(v["r"])
            probe = Value(np.array([[0.3, -0.2, 0.5]] * 3))
            out = rigid.rotate_rows((b1, b2, b3), probe)
            return engine.vsum(out * engine.exp(out * 0.1))

        grad_check(f, {"r": r6})


class TestMaps:
    def test_identity_transform(self, rng):
        T = RigidTransform.identity()
        x = rng.normal(size=(4, 3))
        assert_close(eulerian_map(x, T), x, rtol=0, atol=0)
        assert_close(lagrangian_map(x, T), x, rtol=0, atol=0)

    def test_pure_translation(self):
        T = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
        assert_close(eulerian_map([2.0, 0.0, 0.0], T), [1.0, 0.0, 0.0], rtol=0, atol=0)

    def test_hand_rotation_lagrangian(self):
        R = rigid.axis_angle([0, 0, 1], np.pi / 2)
        T = RigidTransform(R, np.zeros(3))
        assert_close(lagrangian_map([0.0, 1.0, 0.0], T), [1.0, 0.0, 0.0],
                     rtol=0, atol=1e-12)

    def test_mutual_inverse_on_random_transforms(self, rng):
        for _ in range(200):
            T = RigidTransform(random_rotation(rng), rng.normal(size=3))
            x = rng.normal(size=(3, 3)) * 2.0
            assert_close(lagrangian_map(eulerian_map(x, T), T), x, rtol=1e-9, atol=1e-9)
            assert_close(eulerian_map(lagrangian_map(x, T), T), x, rtol=1e-9, atol=1e-9)

    def test_transform_validation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_batched_value_maps_match_numpy(self, rng):
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=(6, 3))
        cols = tuple(Value(T.R[:, i][None].repeat(6, axis=0)) for i in range(3))
        got_e = rigid.rotate_rows(cols, Value(x) - Value(T.t))
        assert_close(got_e.data, eulerian_map(x, T), rtol=1e-12, atol=1e-12)
        got_l = rigid.rotate_rows_t(cols, Value(x)) + Value(T.t)
        assert_close(got_l.data, lagrangian_map(x, T), rtol=1e-12, atol=1e-12)


def brute_force_ape(seq_a: PoseSequence, seq_b: PoseSequence) -> float:
    total = 0.0
    for Pa, Pb in zip(seq_a.poses, seq_b.poses):
        rel = np.linalg.inv(Pa) @ Pb - np.eye(4)
        total += np.sqrt((rel**2).sum())
    return total


def random_sequence(rng, times) -> PoseSequence:
    poses = []
    for _ in times:
        P = np.eye(4)
        P[:3, :3] = random_rotation(rng)
        P[:3, 3] = rng.normal(size=3)
        poses.append(P)
    return PoseSequence(times, np.array(poses))


class TestApe:
    def test_identical_sequences_zero(self, rng):
        s = random_sequence(rng, np.linspace(0, 1, 5))
        assert ape(s, s) < 1e-9

    def test_unit_translation_per_step(self):
        times = np.linspace(0, 1, 7)
        eye = np.array([np.eye(4)] * 7)
        shifted = eye.copy()
        shifted[:, 0, 3] = 1.0
        a = PoseSequence(times, eye)
        b = PoseSequence(times, shifted)
        assert_close(ape(a, b), 7.0, rtol=0, atol=1e-12)

    def test_matches_matrix_product_oracle(self, rng):
        times = np.linspace(0, 1, 4)
        for _ in range(50):
            a = random_sequence(rng, times)
            b = random_sequence(rng, times)
            assert_close(ape(a, b), brute_force_ape(a, b), rtol=1e-9, atol=1e-10)

    def test_nonnegative(self, rng):
        times = np.linspace(0, 1, 3)
        for _ in range(50):
            assert ape(random_sequence(rng, times), random_sequence(rng, times)) >= 0.0

    def test_mismatched_timestamps_rejected(self, rng):
        a = random_sequence(rng, np.linspace(0, 1, 4))
        b = random_sequence(rng, np.linspace(0, 0.9, 4))
        with pytest.raises(ValueError):
            ape(a, b)

    def test_se3_inverse_closed_form(self, rng):
        for _ in range(20):
            P = np.eye(4)
            P[:3, :3] = random_rotation(rng)
            P[:3, 3] = rng.normal(size=3)
            assert_close(se3_inverse(P), np.linalg.inv(P), rtol=1e-9, atol=1e-10)


class TestPoseSequenceIo:
    def test_text_round_trip(self, rng, tmp_path):
        s = random_sequence(rng, np.linspace(0, 1, 6))
        path = tmp_path / "seq.txt"
        s.save_text(path)
        back = PoseSequence.load_text(path)
        assert_close(back.times, s.times, rtol=0, atol=0)
        assert_close(back.poses, s.poses, rtol=0, atol=0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            PoseSequence(np.array([0.0, 1.0]), np.array([np.eye(4)]))

    def test_pose_matrix_is_canonical_to_world(self, rng):
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        P = pose_matrix(T)
        x_c = rng.normal(size=3)
        world = P[:3, :3] @ x_c + P[:3, 3]
        assert_close(world, lagrangian_map(x_c, T), rtol=1e-12, atol=1e-12)
