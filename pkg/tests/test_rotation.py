import numpy as np
import pytest

from quatflow.errors import DegenerateInput, ZeroNorm
from quatflow.rotation import (
    IDENTITY,
    angular_velocity,
    axis_angle_quat,
    canonicalize,
    conjugate,
    geodesic_angle,
    gram_schmidt_rotation,
    hamilton,
    integrate_quat,
    matrix_to_quat,
    quat_to_matrix,
    sample_uniform_quat,
    slerp,
)


def random_canonical(rng, n):
    return sample_uniform_quat(rng, (n,))


class TestCanonicalize:
    def test_sign_flip_of_identity(self):
        np.testing.assert_allclose(canonicalize([-1, 0, 0, 0]), IDENTITY)

    def test_w_zero_tie_break_on_first_nonzero(self):
        np.testing.assert_allclose(canonicalize([0, -0.6, 0, -0.8]), [0, 0.6, 0, 0.8])

    def test_normalize_then_flip(self):
        np.testing.assert_allclose(canonicalize([-2, 0, 0, 0]), IDENTITY)

    def test_zero_norm_raises(self):
        with pytest.raises(ZeroNorm):
            canonicalize([0.0, 0.0, 0.0, 0.0])

    def test_idempotent_and_antipode_exact(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal((200, 4))
        c = canonicalize(q)
        assert np.array_equal(c, canonicalize(c))
        assert np.array_equal(c, canonicalize(-q))

    def test_unit_norm_and_half_space(self):
        rng = np.random.default_rng(8)
        c = canonicalize(rng.standard_normal((500, 4)))
        np.testing.assert_allclose(np.linalg.norm(c, axis=-1), 1.0, atol=1e-9)
        lead = np.where(c[:, 0] != 0, c[:, 0], np.where(c[:, 1] != 0, c[:, 1], c[:, 2]))
        assert np.all(lead > 0)


class TestHamilton:
    def test_identity_element(self):
        rng = np.random.default_rng(1)
        q = random_canonical(rng, 10)
        np.testing.assert_allclose(hamilton(np.broadcast_to(IDENTITY, (10, 4)), q), q)

    def test_basis_relation_i_j_k(self):
        i = np.array([0.0, 1, 0, 0])
        j = np.array([0.0, 0, 1, 0])
        k = np.array([0.0, 0, 0, 1])
        np.testing.assert_allclose(hamilton(i, j), k)

    def test_inverse_on_unit_quaternions(self):
        rng = np.random.default_rng(2)
        q = random_canonical(rng, 50)
        np.testing.assert_allclose(
            hamilton(q, conjugate(q)), np.broadcast_to(IDENTITY, (50, 4)), atol=1e-12
        )

    def test_norm_preserved(self):
        rng = np.random.default_rng(3)
        q1, q2 = random_canonical(rng, 100), random_canonical(rng, 100)
        np.testing.assert_allclose(np.linalg.norm(hamilton(q1, q2), axis=-1), 1.0, atol=1e-9)


class TestConjugate:
    def test_identity(self):
        np.testing.assert_allclose(conjugate(IDENTITY), IDENTITY)

    def test_vector_part_sign(self):
        np.testing.assert_allclose(conjugate([0.6, 0.8, 0, 0]), [0.6, -0.8, 0, 0])

    def test_involution(self):
        rng = np.random.default_rng(4)
        q = random_canonical(rng, 30)
        np.testing.assert_allclose(conjugate(conjugate(q)), q)


class TestSlerp:
    def test_coincident_endpoints(self):
        rng = np.random.default_rng(5)
        q = random_canonical(rng, 20)
        np.testing.assert_allclose(slerp(q, q, 0.3), q, atol=1e-12)

    def test_endpoints(self):
        rng = np.random.default_rng(6)
        qa, qb = random_canonical(rng, 20), random_canonical(rng, 20)
        np.testing.assert_allclose(slerp(qa, qb, 0.0), qa, atol=1e-12)
        np.testing.assert_allclose(slerp(qa, qb, 1.0), qb, atol=1e-12)

    def test_midpoint_against_axis_angle_oracle(self):
        # Oracle: composing half the rotation about the same axis.
        q_t = axis_angle_quat([0, 0, 1], np.pi / 2)
        expected = axis_angle_quat([0, 0, 1], np.pi / 4)
        np.testing.assert_allclose(slerp(IDENTITY, q_t, 0.5), expected, atol=1e-12)

    def test_output_canonical_unit(self):
        rng = np.random.default_rng(9)
        qa, qb = random_canonical(rng, 300), random_canonical(rng, 300)
        tau = rng.uniform(0, 1, (300,))
        s = slerp(qa, qb, tau)
        np.testing.assert_allclose(np.linalg.norm(s, axis=-1), 1.0, atol=1e-9)
        assert np.array_equal(s, canonicalize(s))

    def test_geodesic_additivity(self):
        # Folded (antipode-identified) distances add up only while the path
        # stays within a quarter sphere, i.e. for non-negative dot; the
        # interpolation itself follows the unflipped arc by convention.
        rng = np.random.default_rng(10)
        qa, qb = random_canonical(rng, 400), random_canonical(rng, 400)
        dot = np.sum(qa * qb, axis=-1)
        keep = dot >= 0.0
        qa, qb = qa[keep], qb[keep]
        tau = rng.uniform(0, 1, qa.shape[0])
        mid = slerp(qa, qb, tau)
        total = geodesic_angle(qa, qb)
        split = geodesic_angle(qa, mid) + geodesic_angle(mid, qb)
        np.testing.assert_allclose(split, total, atol=1e-7)

    def test_arc_additivity_all_angles(self):
        # Without folding, arc lengths along the interpolation add exactly
        # for any separation below pi.
        def arc(u, v):
            return np.arccos(np.clip(np.sum(u * v, axis=-1), -1, 1))

        rng = np.random.default_rng(100)
        qa, qb = random_canonical(rng, 400), random_canonical(rng, 400)
        keep = arc(qa, qb) < np.pi - 1e-3
        qa, qb = qa[keep], qb[keep]
        tau = rng.uniform(0, 1, qa.shape[0])
        mid = slerp(qa, qb, tau)
        np.testing.assert_allclose(arc(qa, mid) + arc(mid, qb), arc(qa, qb), atol=1e-7)


class TestGeodesicAngle:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(11)
        q = random_canonical(rng, 20)
        np.testing.assert_allclose(geodesic_angle(q, q), 0.0, atol=1e-9)

    def test_right_angle_about_x(self):
        q = axis_angle_quat([1, 0, 0], np.pi / 2)
        assert abs(geodesic_angle(IDENTITY, q) - np.pi / 2) < 1e-12

    def test_antipode_identification(self):
        rng = np.random.default_rng(12)
        q = random_canonical(rng, 20)
        np.testing.assert_allclose(geodesic_angle(q, -q), 0.0, atol=1e-9)


class TestAngularVelocity:
    def test_zero_velocity(self):
        rng = np.random.default_rng(13)
        q = random_canonical(rng, 5)
        np.testing.assert_allclose(angular_velocity(q, np.zeros((5, 4))), 0.0)

    def test_identity_z_spin(self):
        # Oracle: finite difference of a rotation about z.  q(t) for spin at
        # rate 1 rad/s has q_dot(0) = (0, 0, 0, 0.5).
        omega = angular_velocity(IDENTITY, [0.0, 0, 0, 0.5])
        np.testing.assert_allclose(omega, [0, 0, 1], atol=1e-12)

    def test_constant_rate_trajectory_recovered(self):
        # Finite-difference q_dot from a sampled 1 rad/s rotation about x.
        h = 1e-6
        t = 0.4
        q = axis_angle_quat([1, 0, 0], t)
        q_dot = (axis_angle_quat([1, 0, 0], t + h) - axis_angle_quat([1, 0, 0], t - h)) / (2 * h)
        np.testing.assert_allclose(angular_velocity(q, q_dot), [1, 0, 0], atol=1e-6)


class TestIntegrateQuat:
    def test_zero_velocity_is_identity_map(self):
        rng = np.random.default_rng(14)
        q = random_canonical(rng, 5)
        np.testing.assert_allclose(integrate_quat(q, np.zeros((5, 4)), 0.5), q)

    def test_z_spin_against_axis_angle_oracle(self):
        # omega = (0, 0, pi) over dt = 0.5 must give a 90 degree z rotation.
        q_dot = np.array([0.0, 0, 0, np.pi / 2])  # = 0.5 * q x (0, omega)
        expected = axis_angle_quat([0, 0, 1], np.pi / 2)
        np.testing.assert_allclose(integrate_quat(IDENTITY, q_dot, 0.5), expected, atol=1e-12)

    def test_two_half_steps_equal_one_full_step(self):
        rng = np.random.default_rng(15)
        q = random_canonical(rng, 50)
        q_dot = rng.standard_normal((50, 4))
        one = integrate_quat(q, q_dot, 0.2)
        # Constant body velocity: recompute q_dot at the midpoint state so the
        # angular velocity matches.
        half_omega = hamilton(conjugate(q), q_dot)
        half_omega[..., 0] = 0.0
        half = integrate_quat(q, q_dot, 0.1)
        half2 = integrate_quat(half, hamilton(half, half_omega), 0.1)
        np.testing.assert_allclose(geodesic_angle(half2, one), 0.0, atol=1e-9)

    def test_slerp_derivative_advances_along_geodesic(self):
        from quatflow.flow import target_field_rotation

        rng = np.random.default_rng(16)
        qa, qb = random_canonical(rng, 20), random_canonical(rng, 20)
        tau0, delta = 0.2, 0.5
        q = slerp(qa, qb, tau0)
        n = 100
        h = delta / n
        for i in range(n):
            u = target_field_rotation(qb, qa, tau0 + i * h)
            q = integrate_quat(q, u, h)
        np.testing.assert_allclose(
            geodesic_angle(q, slerp(qa, qb, tau0 + delta)), 0.0, atol=1e-6
        )


class TestSampleUniformQuat:
    def test_deterministic_under_seed(self):
        a = sample_uniform_quat(np.random.default_rng(42), (10,))
        b = sample_uniform_quat(np.random.default_rng(42), (10,))
        assert np.array_equal(a, b)

    def test_mean_rotation_angle_matches_monte_carlo_oracle(self):
        # Independent oracle: legacy RandomState generator, plus the analytic
        # value E[2 arccos|w|] = pi/2 + 2/pi for the uniform sphere.
        analytic = np.pi / 2 + 2 / np.pi
        rs = np.random.RandomState(999)
        ref = rs.standard_normal((1_000_000, 4))
        ref /= np.linalg.norm(ref, axis=1, keepdims=True)
        oracle = np.mean(2 * np.arccos(np.minimum(1.0, np.abs(ref[:, 0]))))
        assert abs(oracle - analytic) < 0.01
        q = sample_uniform_quat(np.random.default_rng(1000), (1_000_000,))
        mean_angle = np.mean(geodesic_angle(q, IDENTITY))
        assert abs(mean_angle - analytic) < 0.01

    def test_all_outputs_canonical(self):
        q = sample_uniform_quat(np.random.default_rng(17), (2000,))
        assert np.array_equal(q, canonicalize(q))


class TestGramSchmidt:
    def test_identity_fixed_point(self):
        np.testing.assert_allclose(gram_schmidt_rotation(np.eye(3)), np.eye(3))

    def test_scaling_and_shear_removed(self):
        m = np.column_stack([[2.0, 0, 0], [1.0, 1, 0]])
        np.testing.assert_allclose(gram_schmidt_rotation(m), np.eye(3), atol=1e-12)

    def test_parallel_columns_raise(self):
        with pytest.raises(DegenerateInput):
            gram_schmidt_rotation(np.column_stack([[1.0, 0, 0], [2.0, 0, 0]]))

    def test_near_noisy_rotation_matches_polar_oracle(self):
        # Oracle: nearest rotation by the iterative polar-factor averaging
        # X <- (X + X^{-T}) / 2, independent of the implementation under test.
        def polar_factor(m):
            x = m.copy()
            for _ in range(100):
                nx = 0.5 * (x + np.linalg.inv(x).T)
                if np.max(np.abs(nx - x)) < 1e-15:
                    break
                x = nx
            return x

        rng = np.random.default_rng(18)
        for _ in range(20):
            r = quat_to_matrix(sample_uniform_quat(rng))
            noisy = r + 1e-3 * rng.standard_normal((3, 3))
            got = gram_schmidt_rotation(noisy)
            want = polar_factor(noisy)
            assert np.linalg.norm(got - want) < 5e-3

    def test_projection_idempotent(self):
        rng = np.random.default_rng(19)
        m = rng.standard_normal((3, 3))
        once = gram_schmidt_rotation(m)
        twice = gram_schmidt_rotation(once)
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_result_is_rotation(self):
        rng = np.random.default_rng(20)
        for _ in range(50):
            r = gram_schmidt_rotation(rng.standard_normal((3, 3)))
            np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(r) - 1.0) < 1e-9


class TestQuatMatrixConvert:
    def test_identity_both_ways(self):
        np.testing.assert_allclose(quat_to_matrix(IDENTITY), np.eye(3))
        np.testing.assert_allclose(matrix_to_quat(np.eye(3)), IDENTITY)

    def test_textbook_z_rotation(self):
        q = axis_angle_quat([0, 0, 1], np.pi / 2)
        want = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
        np.testing.assert_allclose(quat_to_matrix(q), want, atol=1e-12)
        np.testing.assert_allclose(matrix_to_quat(want), q, atol=1e-12)

    def test_roundtrip_sweep(self):
        rng = np.random.default_rng(21)
        q = sample_uniform_quat(rng, (10_000,))
        worst = 0.0
        for qi in q:
            back = matrix_to_quat(quat_to_matrix(qi))
            worst = max(worst, geodesic_angle(qi, back))
        assert worst < 1e-9
