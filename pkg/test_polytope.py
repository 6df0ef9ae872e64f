"""
Tests for the polyhedral geometry kernel.
Covers the LP-based predicates, Fourier-Motzkin projection and slicing,
with vertex enumeration as an oracle on random polytopes.
"""

import math
import unittest

import numpy as np

from polytope import (
    DegenerateHullError,
    EmptyPolytopeError,
    Interval1D,
    Polytope,
    UnionRegion,
    bounding_box,
    chebyshev_ball,
    complement_within,
    contains_polytope,
    degenerate_parts,
    enumerate_vertices,
    feasible_point,
    hull_of_points,
    in_interior,
    intersect,
    is_empty,
    on_facet,
    product,
    project,
    regions_intersect,
    remove_redundant,
    slice_last_dim,
    support,
)


def random_polytope(rng, dim, cuts, offset_lo=0.3):
    """Box [−1, 1]^dim cut by random half-spaces."""
    box = Polytope.from_box(-np.ones(dim), np.ones(dim))
    normals = rng.normal(size=(cuts, dim))
    offsets = rng.uniform(offset_lo, 1.0, size=cuts) * np.linalg.norm(normals, axis=1)
    return Polytope(np.vstack([box.A, normals]), np.concatenate([box.b, offsets]), dim=dim)


def mutually_contained(P, Q, tol=1e-6):
    return contains_polytope(P, Q, tol) and contains_polytope(Q, P, tol)


class TestPolytopeBasics(unittest.TestCase):
    """Construction and point membership."""

    def test_rows_are_unit_normalized(self):
        P = Polytope([[2.0, 0.0], [0.0, -4.0]], [2.0, 0.0])

        np.testing.assert_allclose(np.linalg.norm(P.A, axis=1), [1.0, 1.0])
        np.testing.assert_allclose(P.b, [1.0, 0.0])

    def test_box_puts_upper_rows_first(self):
        P = Polytope.from_box([0.0, -1.0], [1.0, 2.0])

        np.testing.assert_allclose(P.A[:2], np.eye(2))
        np.testing.assert_allclose(P.b, [1.0, 2.0, 0.0, 1.0])

    def test_infinite_bounds_omitted(self):
        P = Polytope.from_box([0.0, -np.inf], [1.0, np.inf])

        self.assertEqual(P.n_rows, 2)
        self.assertTrue(P.contains([0.5, 1e9]))

    def test_zero_row_with_negative_offset_is_empty(self):
        P = Polytope([[0.0, 0.0]], [-1.0])

        self.assertTrue(is_empty(P))

    def test_zero_row_with_round_off_offset_is_dropped(self):
        P = Polytope([[0.0, 0.0], [1.0, 0.0]], [-1e-15, 1.0])

        self.assertEqual(P.n_rows, 1)
        self.assertFalse(is_empty(P))

    def test_contains_with_tolerance(self):
        P = Polytope.from_box([0.0], [1.0])

        self.assertTrue(P.contains([1.0 + 1e-9]))
        self.assertFalse(P.contains([1.0 + 1e-3]))
        self.assertTrue(P.contains([1.0 + 1e-3], tol=1e-2))

    def test_dict_round_trip(self):
        P = Polytope.from_box([0.0, 0.0], [1.0, 3.0])
        Q = Polytope.from_dict(P.to_dict())

        self.assertTrue(mutually_contained(P, Q))

    def test_mismatched_rows_rejected(self):
        with self.assertRaises(ValueError):
            Polytope([[1.0, 0.0], [0.0, 1.0]], [1.0])

    def test_union_requires_same_dim(self):
        with self.assertRaises(ValueError):
            UnionRegion([Polytope.from_box([0.0], [1.0]), Polytope.from_box([0.0, 0.0], [1.0, 1.0])])


class TestEmptiness(unittest.TestCase):
    """Phase-one emptiness test."""

    def test_contradictory_bounds(self):
        """{x <= 1, −x <= −2} is empty."""
        self.assertTrue(is_empty(Polytope([[1.0], [-1.0]], [1.0, -2.0])))

    def test_unit_box_is_not_empty(self):
        self.assertFalse(is_empty(Polytope.from_box([0.0, 0.0], [1.0, 1.0])))

    def test_full_space_is_not_empty(self):
        self.assertFalse(is_empty(Polytope.full_space(3)))

    def test_agrees_with_vertex_oracle(self):
        """Random bounded 4-D polytopes are empty iff they have no vertex."""
        rng = np.random.default_rng(11)
        for _ in range(20):
            box = Polytope.from_box(-np.ones(4), np.ones(4))
            normals = rng.normal(size=(4, 4))
            offsets = rng.uniform(-1.5, 0.5, size=4) * np.linalg.norm(normals, axis=1)
            P = Polytope(np.vstack([box.A, normals]), np.concatenate([box.b, offsets]), dim=4)

            has_vertices = enumerate_vertices(P, tol=1e-9).shape[0] > 0
            self.assertEqual(is_empty(P, tol=1e-9), not has_vertices)

    def test_feasible_point(self):
        P = Polytope.from_box([2.0, 2.0], [3.0, 3.0])

        self.assertTrue(P.contains(feasible_point(P)))
        with self.assertRaises(EmptyPolytopeError):
            feasible_point(Polytope.empty(2))


class TestSupport(unittest.TestCase):
    """Support function and Chebyshev ball."""

    def test_box_diagonal(self):
        self.assertAlmostEqual(support(Polytope.from_box([-1, -1], [1, 1]), [1.0, 1.0]), 2.0, places=8)

    def test_zero_direction(self):
        self.assertEqual(support(Polytope.from_box([-1, -1], [1, 1]), [0.0, 0.0]), 0.0)

    def test_simplex_vertex(self):
        simplex = Polytope(np.vstack([-np.eye(3), np.ones((1, 3))]), [0.0, 0.0, 0.0, 1.0])

        self.assertAlmostEqual(support(simplex, [1.0, 2.0, 3.0]), 3.0, places=8)

    def test_unbounded_direction(self):
        half = Polytope([[-1.0, 0.0]], [0.0])

        self.assertEqual(support(half, [1.0, 0.0]), math.inf)

    def test_empty_raises(self):
        with self.assertRaises(EmptyPolytopeError):
            support(Polytope([[1.0], [-1.0]], [1.0, -2.0]), [1.0])

    def test_chebyshev_ball_of_box(self):
        radius, center = chebyshev_ball(Polytope.from_box([0.0, 0.0], [2.0, 4.0]))

        self.assertAlmostEqual(radius, 1.0, places=7)
        self.assertAlmostEqual(center[0], 1.0, places=7)

    def test_chebyshev_ball_of_empty(self):
        radius, center = chebyshev_ball(Polytope([[1.0], [-1.0]], [1.0, -2.0]))

        self.assertEqual(radius, -math.inf)
        self.assertIsNone(center)

    def test_bounding_box(self):
        triangle = Polytope([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0])
        lo, hi = bounding_box(triangle)

        np.testing.assert_allclose(lo, [0.0, 0.0], atol=1e-8)
        np.testing.assert_allclose(hi, [1.0, 1.0], atol=1e-8)


class TestSetOperations(unittest.TestCase):
    """Intersection, containment, redundancy removal, products."""

    def test_interval_intersection(self):
        both = intersect(Polytope.from_box([0.0], [2.0]), Polytope.from_box([1.0], [3.0]))

        self.assertTrue(mutually_contained(both, Polytope.from_box([1.0], [2.0])))

    def test_intersection_with_full_space(self):
        P = Polytope.from_box([0.0, 0.0], [1.0, 1.0])

        self.assertTrue(mutually_contained(intersect(P, Polytope.full_space(2)), P))

    def test_disjoint_boxes(self):
        both = intersect(Polytope.from_box([0.0], [1.0]), Polytope.from_box([2.0], [3.0]))

        self.assertTrue(is_empty(both))

    def test_containment(self):
        small, large = Polytope.from_box([0.0], [1.0]), Polytope.from_box([0.0], [2.0])

        self.assertTrue(contains_polytope(large, small))
        self.assertFalse(contains_polytope(small, large))
        self.assertTrue(contains_polytope(small, small))

    def test_remove_redundant_drops_loose_rows(self):
        P = Polytope(np.vstack([np.eye(2), -np.eye(2), [[1.0, 1.0]]]), [1.0, 1.0, 0.0, 0.0, 5.0])
        minimal = remove_redundant(P)

        self.assertEqual(minimal.n_rows, 4)
        self.assertTrue(mutually_contained(minimal, P))

    def test_remove_redundant_keeps_parallel_tightest(self):
        P = Polytope([[1.0], [2.0], [-1.0]], [1.0, 1.0, 0.0])
        minimal = remove_redundant(P)

        self.assertEqual(minimal.n_rows, 2)
        self.assertAlmostEqual(support(minimal, [1.0]), 0.5, places=8)

    def test_product(self):
        P = product(Polytope.from_box([0.0], [1.0]), Polytope.from_box([2.0], [3.0]))

        self.assertEqual(P.dim, 2)
        self.assertTrue(P.contains([0.5, 2.5]))
        self.assertFalse(P.contains([0.5, 1.5]))


class TestProjection(unittest.TestCase):
    """Fourier-Motzkin projection."""

    def test_unit_square_onto_first_dim(self):
        projected = project(Polytope.from_box([0.0, 0.0], [1.0, 1.0]), [0])

        self.assertTrue(mutually_contained(projected, Polytope.from_box([0.0], [1.0])))

    def test_triangle_onto_second_dim(self):
        triangle = Polytope([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0])
        projected = project(triangle, [1])

        self.assertTrue(mutually_contained(projected, Polytope.from_box([0.0], [1.0])))

    def test_keep_dims_order(self):
        P = Polytope.from_box([0.0, 10.0, 20.0], [1.0, 11.0, 21.0])
        projected = project(P, [2, 0])

        self.assertTrue(mutually_contained(projected, Polytope.from_box([20.0, 0.0], [21.0, 1.0])))

    def test_empty_input(self):
        empty = Polytope([[1.0, 0.0], [-1.0, 0.0]], [1.0, -2.0])

        self.assertTrue(is_empty(project(empty, [1])))

    def test_invalid_keep_dims(self):
        with self.assertRaises(ValueError):
            project(Polytope.from_box([0.0, 0.0], [1.0, 1.0]), [2])

    def test_matches_vertex_oracle(self):
        """Projection equals the hull of the projected vertices on random 3-D and 4-D polytopes."""
        rng = np.random.default_rng(3)
        for trial in range(12):
            dim = 3 + trial % 2
            P = random_polytope(rng, dim, cuts=4)
            keep = sorted(rng.choice(dim, size=2, replace=False).tolist())

            projected = project(P, keep)
            oracle = hull_of_points(enumerate_vertices(P)[:, keep])
            self.assertTrue(mutually_contained(projected, oracle))


class TestSlicing(unittest.TestCase):
    """Last-coordinate slices."""

    def test_unit_square(self):
        interval = slice_last_dim(Polytope.from_box([0.0, 0.0], [1.0, 1.0]), [0.5])

        self.assertAlmostEqual(interval.lo, 0.0)
        self.assertAlmostEqual(interval.hi, 1.0)

    def test_triangle(self):
        triangle = Polytope([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0])
        interval = slice_last_dim(triangle, [0.5])

        self.assertAlmostEqual(interval.lo, 0.0)
        self.assertAlmostEqual(interval.hi, 0.5)

    def test_outside_is_empty(self):
        interval = slice_last_dim(Polytope.from_box([0.0, 0.0], [1.0, 1.0]), [2.0])

        self.assertTrue(interval.empty)
        self.assertEqual(interval.endpoints(), [])

    def test_point_interval_has_one_endpoint(self):
        self.assertEqual(Interval1D(1.0, 1.0).endpoints(), [1.0])


class TestBoundaryPredicates(unittest.TestCase):
    """Interior and facet checks, complements, degeneracy."""

    def setUp(self):
        self.square = Polytope.from_box([0.0, 0.0], [1.0, 1.0])

    def test_in_interior(self):
        self.assertTrue(in_interior(self.square, [0.5, 0.5], 1e-9))
        self.assertFalse(in_interior(self.square, [0.5, 0.0], 1e-9))
        self.assertFalse(in_interior(self.square, [2.0, 0.5], 1e-9))

    def test_in_interior_needs_positive_margin(self):
        with self.assertRaises(ValueError):
            in_interior(self.square, [0.5, 0.5], 0.0)

    def test_on_facet(self):
        self.assertTrue(on_facet(self.square, [1.0, 0.3]))
        self.assertFalse(on_facet(self.square, [0.5, 0.5]))

    def test_complement_is_disjoint_and_covers(self):
        domain = Polytope.from_box([-1.0, -1.0], [2.0, 2.0])
        outside = complement_within(self.square, domain)

        self.assertFalse(regions_intersect(UnionRegion.single(self.square), outside))
        for point in ([-0.5, 0.5], [1.5, 1.5], [0.5, -0.9]):
            self.assertTrue(outside.contains(point))
        self.assertFalse(outside.contains([0.5, 0.5]))

    def test_degenerate_parts(self):
        flat = Polytope.from_box([0.0, 0.0], [1.0, 0.0])
        region = UnionRegion([self.square, flat])

        self.assertEqual(degenerate_parts(region), [1])

    def test_flat_hull_raises(self):
        with self.assertRaises(DegenerateHullError):
            hull_of_points(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))


if __name__ == "__main__":
    unittest.main()
