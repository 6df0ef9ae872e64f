"""
Tests for the Löwner-John ellipsoid, the complementary strategy and the
disturbance schemes.
"""

import math
import unittest

import numpy as np

from plant import AccParams, LkParams, lk_linear_system
from polytope import Polytope, UnionRegion
from strategy import (
    DegenerateSetError,
    DualGameScheme,
    Ellipsoid,
    EllipsoidPlusDualScheme,
    LkBangBangScheme,
    MaxBrakeScheme,
    RandomScheme,
    TrackVdesScheme,
    ZeroScheme,
    acc_disturbance_box,
    complementary_strategy,
    default_r_d_bound,
    ellipsoid_plus_dual,
    heuristic_lk_bang_bang,
    heuristic_max_brake,
    heuristic_track_vdes,
    level,
    lj_ellipsoid,
)
from synthesis import LinearSystem, dual_winning


def interval(lo, hi):
    return Polytope.from_box([lo], [hi])


class TestEllipsoid(unittest.TestCase):
    """Level function and homogeneous form."""

    def test_unit_ball_levels(self):
        E = Ellipsoid(np.zeros(2), np.eye(2))

        self.assertEqual(level(E, [0.0, 0.0]), 0.0)
        self.assertAlmostEqual(level(E, [0.6, 0.8]), 1.0)

    def test_homogeneous_form_round_trip(self):
        E = Ellipsoid(np.array([1.0, -2.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
        back = Ellipsoid.from_Q(E.Q)

        np.testing.assert_allclose(back.center, E.center)
        np.testing.assert_allclose(back.shape, E.shape)

    def test_homogeneous_form_matches_level(self):
        E = Ellipsoid(np.array([1.0, -2.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
        x = np.array([0.3, 0.7])
        z = np.append(x, 1.0)

        self.assertAlmostEqual(z @ E.Q @ z, level(E, x), places=10)


class TestLjEllipsoid(unittest.TestCase):
    """Khachiyan's algorithm."""

    def test_square_gives_circle(self):
        E = lj_ellipsoid(Polytope.from_box([-1.0, -1.0], [1.0, 1.0]), eps=1e-4)

        np.testing.assert_allclose(E.center, [0.0, 0.0], atol=1e-3)
        np.testing.assert_allclose(E.shape, 0.5 * np.eye(2), atol=1e-3)
        self.assertAlmostEqual(level(E, [1.0, 1.0]), 1.0, delta=1e-3)

    def test_interval(self):
        E = lj_ellipsoid(np.array([[-1.0], [1.0]]), eps=1e-6)

        self.assertAlmostEqual(level(E, [0.5]), 0.25, places=4)

    def test_random_clouds_are_covered(self):
        rng = np.random.default_rng(5)
        eps = 1e-3
        for _ in range(20):
            points = rng.normal(size=(30, 3)) * rng.uniform(0.5, 3.0, size=3)
            E = lj_ellipsoid(points, eps=eps)
            levels = np.array([level(E, p) for p in points])

            self.assertLessEqual(levels.max(), 1.0 + eps + 1e-9)
            # shrinking by 1 + eps uncovers some point
            self.assertGreater(levels.max() * (1.0 + eps), 1.0)

    def test_flat_points_rejected(self):
        with self.assertRaises(DegenerateSetError):
            lj_ellipsoid(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))

    def test_unbounded_polytope_rejected(self):
        with self.assertRaises(DegenerateSetError):
            lj_ellipsoid(Polytope([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0]))

    def test_budget_exhaustion_still_covers(self):
        points = np.random.default_rng(2).normal(size=(40, 2))
        E = lj_ellipsoid(points, eps=1e-9, max_iter=3)

        self.assertLessEqual(max(level(E, p) for p in points), 1.0 + 1e-9)


class TestComplementaryStrategy(unittest.TestCase):
    """Level climbing over disturbance vertices."""

    def test_single_point_disturbance(self):
        sys = LinearSystem([[1.0]], [[1.0]], [[1.0]], [0.0], interval(-5, 5), interval(-1, 1),
                           interval(0, 0), dt=1.0)
        d = complementary_strategy([0.5], [0.0], sys, Ellipsoid(np.zeros(1), np.eye(1)))

        np.testing.assert_allclose(d, [0.0])

    def test_symmetric_tie_goes_to_first_vertex(self):
        """x+ = d with d ∈ [−1, 1]: both extremes tie, the first enumerated vertex wins."""
        sys = LinearSystem([[0.0]], [[0.0]], [[1.0]], [0.0], interval(-5, 5), interval(-1, 1),
                           interval(-1, 1), dt=1.0)
        d = complementary_strategy([0.0], [0.0], sys, Ellipsoid(np.zeros(1), np.eye(1)))

        self.assertEqual(abs(d[0]), 1.0)
        # from_box lists the upper bound first
        self.assertEqual(d[0], 1.0)

    def test_matches_grid_oracle(self):
        from plant import acc_linear_system

        params = AccParams()
        sys = acc_linear_system(params)
        E = Ellipsoid(np.array([10.0, 30.0, 10.0]), np.diag([0.01, 0.002, 0.01]))
        x, u = np.array([12.0, 25.0, 9.0]), np.array([100.0])

        d = complementary_strategy(x, u, sys, E)
        grid = np.arange(params.a_L_min, params.a_L_max + 1e-9, 1e-3)
        best = max(level(E, sys.step(x, u, [g])) for g in grid)
        self.assertGreaterEqual(level(E, sys.step(x, u, d)), best - 1e-9)


class TestEllipsoidPlusDual(unittest.TestCase):
    """Dispatch between the dual strategy and level climbing."""

    def setUp(self):
        self.sys = LinearSystem([[1.0]], [[1.0]], [[1.0]], [0.0], interval(-5, 10), interval(0, 0.5),
                                interval(-1, 0), dt=1.0)
        self.W = dual_winning(UnionRegion.single(interval(-5, 0)), self.sys, n_steps=1)
        self.E = Ellipsoid(np.array([5.0]), np.eye(1))

    def test_inside_union_uses_dual(self):
        d = ellipsoid_plus_dual([0.25], [0.0], self.sys, self.E, self.W)

        self.assertAlmostEqual(d[0], -0.875, places=5)

    def test_outside_union_climbs_levels(self):
        """At x = 6 the level grows fastest moving away from the center 5."""
        d = ellipsoid_plus_dual([6.0], [0.0], self.sys, self.E, self.W)

        self.assertEqual(d[0], 0.0)

    def test_scheme_wraps_strategy(self):
        scheme = EllipsoidPlusDualScheme(self.sys, self.E, self.W)

        np.testing.assert_allclose(scheme([0.25], [0.0], 0), [-0.875], atol=1e-5)


class TestHeuristics(unittest.TestCase):
    """Hand-written lead car and road schemes."""

    def setUp(self):
        self.params = AccParams()

    def test_max_brake(self):
        self.assertEqual(heuristic_max_brake(10.0, 0.1, self.params), -0.97)
        self.assertEqual(heuristic_max_brake(0.0, 0.1, self.params), 0.0)

    def test_max_brake_stops_at_zero(self):
        a = heuristic_max_brake(0.05, 0.1, self.params)

        self.assertAlmostEqual(0.05 + a * 0.1, 0.0, places=12)

    def test_track_vdes(self):
        self.assertEqual(heuristic_track_vdes(20.0, 1.0, self.params), 0.0)
        self.assertEqual(heuristic_track_vdes(0.0, 1.0, self.params), 0.65)
        self.assertEqual(heuristic_track_vdes(25.0, 1.0, self.params), -0.97)

    def test_lk_bang_bang(self):
        sys = lk_linear_system(LkParams())
        bounds = (-0.087, 0.087)

        # lateral velocity pushing y up
        self.assertEqual(heuristic_lk_bang_bang([0.0, 0.5, 0.0, 0.0], [0.0], sys, bounds), -0.087)
        self.assertEqual(heuristic_lk_bang_bang([0.0, -0.5, 0.0, 0.0], [0.0], sys, bounds), 0.087)
        self.assertEqual(heuristic_lk_bang_bang([0.0, 0.0, 0.0, 0.0], [0.0], sys, bounds), -0.087)

    def test_default_r_d_bound(self):
        self.assertAlmostEqual(default_r_d_bound(LkParams()), 20.0 / 230.0)


class TestSchemes(unittest.TestCase):
    """Scheme objects used by the simulator."""

    def setUp(self):
        self.D = acc_disturbance_box()

    def test_zero(self):
        np.testing.assert_array_equal(ZeroScheme(self.D)([10.0, 20.0, 10.0], [0.0], 0), [0.0])

    def test_max_brake_scheme(self):
        scheme = MaxBrakeScheme(self.D, 0.1)

        np.testing.assert_allclose(scheme([10.0, 20.0, 10.0], [0.0], 0), [-0.97])

    def test_track_vdes_needs_positive_gain(self):
        with self.assertRaises(ValueError):
            TrackVdesScheme(self.D, k_lead=0.0)

    def test_outputs_are_clipped_to_D(self):
        scheme = TrackVdesScheme(self.D, k_lead=100.0)

        np.testing.assert_allclose(scheme([0.0, 0.0, 0.0], [0.0], 0), [0.65])

    def test_lk_bang_bang_scheme_reads_bounds(self):
        scheme = LkBangBangScheme(lk_linear_system(LkParams(), r_d_bound=0.05))

        self.assertAlmostEqual(scheme.r_bounds[0], -0.05, places=9)
        self.assertAlmostEqual(scheme.r_bounds[1], 0.05, places=9)

    def test_random_is_reproducible_per_sample(self):
        first = RandomScheme(self.D, seed=3, scheme_index=1)
        second = RandomScheme(self.D, seed=3, scheme_index=1)
        first.reset(7)
        second.reset(7)
        a = [first([0, 0, 0], [0], k)[0] for k in range(5)]
        b = [second([0, 0, 0], [0], k)[0] for k in range(5)]

        self.assertEqual(a, b)
        self.assertTrue(all(-0.97 <= v <= 0.65 for v in a))

    def test_random_differs_across_samples(self):
        scheme = RandomScheme(self.D, seed=3)
        scheme.reset(0)
        a = scheme([0, 0, 0], [0], 0)[0]
        scheme.reset(1)
        b = scheme([0, 0, 0], [0], 0)[0]

        self.assertNotEqual(a, b)

    def test_dual_game_scheme_outside_union_is_zero(self):
        sys = LinearSystem([[1.0]], [[1.0]], [[1.0]], [0.0], interval(-5, 10), interval(0, 0.5),
                           interval(-1, 0), dt=1.0)
        W = dual_winning(UnionRegion.single(interval(-5, 0)), sys, n_steps=1)
        scheme = DualGameScheme(sys, W)

        np.testing.assert_array_equal(scheme([8.0], [0.0], 0), [0.0])
        self.assertTrue(math.isclose(scheme([0.25], [0.0], 0)[0], -0.875, abs_tol=1e-5))


if __name__ == "__main__":
    unittest.main()
