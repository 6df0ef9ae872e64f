"""
Tests for invariant set synthesis, the dual game and supervision.
Most cases use the scalar system x+ = x + u + d, where every set is an
interval that can be checked by hand or on a dense grid.
"""

import os
import unittest
from unittest.mock import patch

import numpy as np

from config import PolyfalsifyError
from polytope import Polytope, UnionRegion, bounding_box, contains_polytope, is_empty, regions_intersect
from synthesis import (
    DualWinningSets,
    InvariantResult,
    LinearSystem,
    SupervisionImpossible,
    SupervisorMap,
    UnconvergedSetError,
    dual_strategy,
    dual_winning,
    max_invariant_set,
    robust_pre,
    supervise,
    supervisor_map,
    verify_invariance,
)

SLOW = os.getenv("POLYFALSIFY_SLOW_TESTS", "0") == "1"


def interval(lo, hi):
    return Polytope.from_box([lo], [hi])


def scalar_system(u=(-1.0, 1.0), d=(-0.5, 0.5), X=(-20.0, 20.0), b=1.0):
    return LinearSystem(A=[[1.0]], B=[[b]], E=[[1.0]], K=[0.0], X=interval(*X),
                        U=interval(*u), D=interval(*d), dt=1.0)


def region_interval(R):
    """Hull of a 1-D union as (lo, hi)."""
    lo, hi = bounding_box(R.parts[0])
    for part in R.parts[1:]:
        p_lo, p_hi = bounding_box(part)
        lo, hi = np.minimum(lo, p_lo), np.maximum(hi, p_hi)
    return float(lo[0]), float(hi[0])


def grid_pre(grid, target, u_grid, d_vertices):
    """Brute-force ∃u ∀d predecessor on a grid."""
    lo, hi = target
    keep = []
    for x in grid:
        if any(all(lo - 1e-9 <= x + u + d <= hi + 1e-9 for d in d_vertices) for u in u_grid):
            keep.append(x)
    return keep


class TestLinearSystem(unittest.TestCase):
    """Validation and channels."""

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            LinearSystem(A=[[1.0]], B=[[1.0]], E=[[1.0]], K=[0.0], X=interval(0, 1),
                         U=Polytope.from_box([0, 0], [1, 1]), D=interval(0, 1), dt=1.0)

    def test_empty_input_set_rejected(self):
        with self.assertRaises(ValueError):
            scalar_system(u=(1.0, -1.0))

    def test_step(self):
        sys = scalar_system()

        np.testing.assert_allclose(sys.step([1.0], [0.5], [0.25]), [1.75])

    def test_residual_channels(self):
        sys = LinearSystem(A=[[1.0]], B=[[1.0]], E=[[1.0]], K=[0.0], X=interval(-5, 5),
                           U=interval(-1, 1), D=interval(-1, 1), dt=1.0,
                           E_r=[[2.0]], R=interval(0, 1))
        E, D = sys.disturbance_channel()
        B, U = sys.input_channel()

        np.testing.assert_allclose(E, [[1.0, 2.0]])
        self.assertEqual(D.dim, 2)
        np.testing.assert_allclose(B, [[1.0, 2.0]])
        self.assertEqual(U.dim, 2)

    def test_content_hash_is_stable(self):
        self.assertEqual(scalar_system().content_hash(), scalar_system().content_hash())
        self.assertNotEqual(scalar_system().content_hash(), scalar_system(d=(-0.4, 0.5)).content_hash())

    def test_vertex_models_validated_and_hashed(self):
        plain = scalar_system()
        uncertain = LinearSystem(A=[[1.0]], B=[[1.0]], E=[[1.0]], K=[0.0], X=interval(-20, 20),
                                 U=interval(-1, 1), D=interval(-0.5, 0.5), dt=1.0,
                                 vertex_models=(([[1.1]], [[1.0]], [0.0]),))

        self.assertEqual(len(uncertain.models()), 2)
        self.assertEqual(uncertain.vertex_models[0][1].shape, (1, 1))
        self.assertNotEqual(plain.content_hash(), uncertain.content_hash())
        with self.assertRaises(ValueError):
            LinearSystem(A=[[1.0]], B=[[1.0]], E=[[1.0]], K=[0.0], X=interval(-1, 1),
                         U=interval(-1, 1), D=interval(0, 0), dt=1.0,
                         vertex_models=(([[1.0, 0.0]], [[1.0]], [0.0]),))


class TestRobustPre(unittest.TestCase):
    """One-step robust controllable predecessor."""

    def test_scalar_hand_computation(self):
        """x + u + d ∈ [0, 10] for all d needs x + u ∈ [0.5, 9.5], so x ∈ [−0.5, 10.5]."""
        pre = robust_pre(UnionRegion.single(interval(0, 10)), scalar_system())

        lo, hi = region_interval(pre)
        self.assertAlmostEqual(lo, -0.5, places=7)
        self.assertAlmostEqual(hi, 10.5, places=7)

    def test_every_vertex_model_must_land(self):
        """x+ ∈ {x + u, 1.1x + u}, u ∈ [−0.5, 0.5]: Pre([0, 10]) = [−0.5/1.1, 10.5/1.1]."""
        sys = LinearSystem(A=[[1.0]], B=[[1.0]], E=[[1.0]], K=[0.0], X=interval(-20, 20),
                           U=interval(-0.5, 0.5), D=interval(0, 0), dt=1.0,
                           vertex_models=(([[1.1]], [[1.0]], [0.0]),))
        pre = robust_pre(UnionRegion.single(interval(0, 10)), sys)

        lo, hi = region_interval(pre)
        self.assertAlmostEqual(lo, -0.5 / 1.1, places=6)
        self.assertAlmostEqual(hi, 10.5 / 1.1, places=6)

    def test_identity_dynamics(self):
        """With B = 0 and D = {0}, every state is its own predecessor."""
        sys = scalar_system(d=(0.0, 0.0), b=0.0)
        S = interval(0, 10)
        pre = robust_pre(UnionRegion.single(S), sys)

        self.assertTrue(any(contains_polytope(part, S, 1e-7) for part in pre))

    def test_matches_grid_oracle(self):
        """Interval predecessor agrees with a 0.01 grid brute force."""
        sys = scalar_system(u=(-0.3, 0.2), d=(-0.1, 0.4))
        pre = robust_pre(UnionRegion.single(interval(1, 3)), sys)
        lo, hi = region_interval(pre)

        grid = np.round(np.arange(-1.0, 5.0, 0.01), 10)
        u_grid = np.linspace(-0.3, 0.2, 51)
        winners = grid_pre(grid, (1.0, 3.0), u_grid, (-0.1, 0.4))
        self.assertAlmostEqual(lo, min(winners), delta=0.011)
        self.assertAlmostEqual(hi, max(winners), delta=0.011)


class TestMaxInvariantSet(unittest.TestCase):
    """Fixed point S ∩ Pre(S)."""

    def test_scalar_converges_in_one_iteration(self):
        result = max_invariant_set(UnionRegion.single(interval(0, 10)), scalar_system())

        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 1)
        lo, hi = region_interval(result.S_inv)
        self.assertAlmostEqual(lo, 0.0, places=7)
        self.assertAlmostEqual(hi, 10.0, places=7)

    def test_drift_without_control_shrinks_to_empty(self):
        """u ∈ {0}, d ∈ [−1, 1]: S_k = [k, 10 − k] until nothing is left."""
        sys = scalar_system(u=(0.0, 0.0), d=(-1.0, 1.0))
        result = max_invariant_set(UnionRegion.single(interval(0, 10)), sys, max_iter=20)

        self.assertTrue(result.converged)
        self.assertEqual(len(result.S_inv), 0)
        self.assertGreaterEqual(result.iterations, 5)

    def test_budget_exhausted(self):
        sys = scalar_system(u=(0.0, 0.0), d=(-1.0, 1.0))
        result = max_invariant_set(UnionRegion.single(interval(0, 10)), sys, max_iter=2)

        self.assertFalse(result.converged)
        lo, hi = region_interval(result.S_inv)
        self.assertAlmostEqual(lo, 2.0, places=6)
        self.assertAlmostEqual(hi, 8.0, places=6)

    def test_empty_safe_set(self):
        empty = UnionRegion([Polytope([[1.0], [-1.0]], [1.0, -2.0])])
        result = max_invariant_set(empty, scalar_system())

        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 0)
        self.assertEqual(len(result.S_inv), 0)

    def test_serialization(self):
        result = max_invariant_set(UnionRegion.single(interval(0, 10)), scalar_system())
        loaded = InvariantResult.from_dict(result.to_dict())

        self.assertEqual(loaded.iterations, result.iterations)
        self.assertTrue(contains_polytope(loaded.S_inv.parts[0], result.S_inv.parts[0]))


class TestVerifyInvariance(unittest.TestCase):
    """Sampling check of the invariance condition."""

    def test_converged_set_has_no_violations(self):
        sys = scalar_system()
        result = max_invariant_set(UnionRegion.single(interval(0, 10)), sys)
        report = verify_invariance(result.S_inv, sys, n_samples=300, seed=1)

        self.assertTrue(report.ok)
        self.assertEqual(report.n_samples, 300)

    def test_safe_set_under_drift_is_violated(self):
        sys = scalar_system(u=(0.0, 0.0), d=(-1.0, 1.0))
        report = verify_invariance(UnionRegion.single(interval(0, 10)), sys, n_samples=200, seed=1)

        self.assertGreater(report.violations, 0)
        self.assertEqual(len(report.violating_states), report.violations)

    def test_empty_set_is_vacuous(self):
        report = verify_invariance(UnionRegion([], dim=1), scalar_system(), n_samples=100)

        self.assertEqual(report.n_samples, 0)
        self.assertTrue(report.ok)


class TestDualGame(unittest.TestCase):
    """Winning sets and strategy of the disturbance player."""

    def setUp(self):
        # x+ = x + u + d, u ∈ [0, 0.5] adversarial, d ∈ [−1, 0] steering to x < 0
        self.sys = scalar_system(u=(0.0, 0.5), d=(-1.0, 0.0), X=(-5.0, 10.0))
        self.unsafe = UnionRegion.single(interval(-5, 0))

    def test_first_layer_hand_computation(self):
        """∀u: x + u + d <= 0 needs x + 0.5 + d <= 0; with d = −1, x <= 0.5."""
        W = dual_winning(self.unsafe, self.sys, n_steps=1)
        layer = W.layers_at(1)[0]

        lo, hi = bounding_box(layer.projected)
        self.assertAlmostEqual(lo[0], -5.0, places=7)
        self.assertAlmostEqual(hi[0], 0.5, places=7)

    def test_layers_grow_by_the_margin(self):
        W = dual_winning(self.unsafe, self.sys, n_steps=3)

        for step, expected in ((1, 0.5), (2, 1.0), (3, 1.5)):
            _, hi = bounding_box(W.layers_at(step)[0].projected)
            self.assertAlmostEqual(hi[0], expected, places=6)

    def test_winning_region_is_monotone_in_steps(self):
        W = dual_winning(self.unsafe, self.sys, n_steps=4)

        for step in range(4):
            smaller, larger = W.cumulative_union(step), W.cumulative_union(step + 1)
            self.assertTrue(all(any(contains_polytope(big, part, 1e-7) for big in larger) for part in smaller))
            inner = W.layers_at(step)[0].projected
            outer = W.layers_at(step + 1)[0].projected
            self.assertTrue(contains_polytope(outer, inner, 1e-7))

    def test_winning_must_hold_for_every_vertex_model(self):
        """An extra drift of +0.5 in one model moves the first layer bound from 0.5 to 0."""
        sys = LinearSystem(A=[[1.0]], B=[[1.0]], E=[[1.0]], K=[0.0], X=interval(-5, 10),
                           U=interval(0.0, 0.5), D=interval(-1.0, 0.0), dt=1.0,
                           vertex_models=(([[1.0]], [[1.0]], [0.5]),))
        W = dual_winning(self.unsafe, sys, n_steps=1)

        _, hi = bounding_box(W.layers_at(1)[0].projected)
        self.assertAlmostEqual(hi[0], 0.0, places=7)

    def test_zero_steps_keeps_only_unsafe(self):
        W = dual_winning(self.unsafe, self.sys, n_steps=0)

        self.assertEqual(len(W.layers), 1)
        self.assertEqual(W.layers[0].step, 0)

    def test_serialization(self):
        W = dual_winning(self.unsafe, self.sys, n_steps=2)
        loaded = DualWinningSets.from_dict(W.to_dict())

        self.assertEqual([l.step for l in loaded.layers], [l.step for l in W.layers])
        self.assertEqual(loaded.n_steps, 2)

    def test_strategy_picks_slice_center(self):
        """At x = 0.25 the d-slice of layer 1 is [−1, −0.75]."""
        W = dual_winning(self.unsafe, self.sys, n_steps=2)
        move = dual_strategy([0.25], W, self.sys)

        self.assertEqual(move.layer, 1)
        self.assertAlmostEqual(move.disturbance[0], -0.875, places=5)
        self.assertFalse(move.already_falsified)

    def test_strategy_drives_into_unsafe(self):
        """Following the strategy reaches x < 0 against the worst input."""
        W = dual_winning(self.unsafe, self.sys, n_steps=5)
        x = np.array([2.0])
        for _ in range(6):
            move = dual_strategy(x, W, self.sys)
            if move.already_falsified:
                break
            x = self.sys.step(x, [0.5], move.disturbance)
        self.assertLessEqual(x[0], 1e-6)

    def test_strategy_outside_union(self):
        W = dual_winning(self.unsafe, self.sys, n_steps=1)
        move = dual_strategy([5.0], W, self.sys)

        self.assertIsNone(move.disturbance)
        self.assertIsNone(move.layer)

    def test_strategy_inside_unsafe(self):
        W = dual_winning(self.unsafe, self.sys, n_steps=1)
        move = dual_strategy([-1.0], W, self.sys)

        self.assertTrue(move.already_falsified)
        self.assertIsNone(move.disturbance)

    def test_invariant_and_winning_sets_are_disjoint(self):
        sys = scalar_system(X=(-20.0, 20.0))
        safe = UnionRegion.single(interval(0, 10))
        unsafe = UnionRegion([interval(-20, -1e-5), interval(10 + 1e-5, 20)])
        S_inv = max_invariant_set(safe, sys).S_inv
        W = dual_winning(unsafe, sys, n_steps=5)

        self.assertFalse(regions_intersect(S_inv, W.union))


class TestSupervision(unittest.TestCase):
    """Admissible input map and the minimally intrusive filter."""

    def setUp(self):
        self.sys = scalar_system()
        self.S_inv = max_invariant_set(UnionRegion.single(interval(0, 10)), self.sys).S_inv
        self.M = supervisor_map(self.S_inv, self.sys)

    def test_admissible_slice_at_boundary(self):
        """At x = 0 the admissible inputs are [0.5, 1]."""
        slices = self.M.slices([0.0], tol=0.0)

        self.assertEqual(len(slices), 1)
        lo, hi = bounding_box(slices[0])
        self.assertAlmostEqual(lo[0], 0.5, places=7)
        self.assertAlmostEqual(hi[0], 1.0, places=7)

    def test_centered_state_admits_everything(self):
        lo, hi = bounding_box(self.M.slices([5.0], tol=0.0)[0])

        self.assertAlmostEqual(lo[0], -1.0, places=7)
        self.assertAlmostEqual(hi[0], 1.0, places=7)

    def test_outside_state_has_no_slice(self):
        self.assertEqual(self.M.slices([-3.0]), [])

    def test_pass_through(self):
        np.testing.assert_array_equal(supervise([0.75], [0.0], self.M), [0.75])

    def test_override_clamps(self):
        u = supervise([-1.0], [0.0], self.M)

        self.assertAlmostEqual(u[0], 0.5, places=12)

    @patch("synthesis.solve_qp")
    def test_scalar_override_needs_no_qp(self, mock_solve):
        u = supervise([2.0], [9.0], self.M)

        mock_solve.assert_not_called()
        self.assertTrue(self.M.is_admissible([9.0], u, tol=1e-12))
        self.assertAlmostEqual(u[0], 0.5, places=12)

    def test_unconverged_result_rejected(self):
        unfinished = InvariantResult(self.S_inv, 2, False)

        with self.assertRaises(UnconvergedSetError) as raised:
            supervisor_map(unfinished, self.sys)
        self.assertIsInstance(raised.exception, PolyfalsifyError)

    def test_converged_result_accepted(self):
        M = supervisor_map(InvariantResult(self.S_inv, 1, True), self.sys)

        self.assertTrue(M.is_admissible([0.0], [0.75]))

    def test_impossible(self):
        with self.assertRaises(SupervisionImpossible):
            supervise([0.0], [-3.0], self.M)

    def test_serialization(self):
        loaded = SupervisorMap.from_dict(self.M.to_dict())

        self.assertTrue(loaded.is_admissible([0.0], [0.75]))
        self.assertFalse(loaded.is_admissible([0.0], [0.0]))

    def test_empty_invariant_set_rejected(self):
        with self.assertRaises(ValueError):
            supervisor_map(UnionRegion([], dim=1), self.sys)


@unittest.skipUnless(SLOW, "set POLYFALSIFY_SLOW_TESTS=1 to run the ACC synthesis")
class TestAccSynthesis(unittest.TestCase):
    """Full ACC invariant set on the lead-agnostic model."""

    @classmethod
    def setUpClass(cls):
        from plant import AccParams, acc_invariance_system, acc_linear_system
        from specs import acc_invariance_safe_region, acc_safe_region, acc_unsafe_region

        cls.params = AccParams()
        cls.sys = acc_invariance_system(cls.params, 0.1)
        cls.safe = acc_invariance_safe_region(cls.params, 0.1)
        cls.result = max_invariant_set(cls.safe, cls.sys, max_iter=400)
        cls.S_inv = cls.result.S_inv
        cls.spec_safe = acc_safe_region(cls.params, h_cap=np.inf)
        cls.W = dual_winning(acc_unsafe_region(cls.params), acc_linear_system(cls.params), n_steps=10)

    def test_iteration_converges(self):
        self.assertTrue(self.result.converged)
        self.assertLess(self.result.iterations, 400)

    def test_invariant_set_is_nonempty_subset_of_safe(self):
        self.assertGreater(len(self.S_inv), 0)
        for part in self.S_inv:
            self.assertFalse(is_empty(part))
            self.assertTrue(contains_polytope(self.safe.parts[0], part, 1e-6))
            self.assertTrue(contains_polytope(self.spec_safe.parts[0], part, 1e-6))

    def test_sampled_invariance(self):
        window = Polytope([[0.0, 1.0, 0.0]], [200.0])
        report = verify_invariance(self.S_inv, self.sys, n_samples=10_000, seed=3, window=window)

        self.assertTrue(report.ok)
        self.assertEqual(report.n_samples, 10_000)

    def test_stopped_car_far_behind_is_kept(self):
        self.assertTrue(self.S_inv.contains([0.0, 50.0, 0.0]))
        self.assertTrue(self.S_inv.contains([0.0, 1000.0, 25.0]))
        self.assertFalse(self.S_inv.contains([25.0, 10.0, 0.0]))

    def test_disjoint_from_dual_union(self):
        self.assertFalse(regions_intersect(self.S_inv, self.W.union))

    def test_membership_ignores_lead_speed(self):
        for v, h in ((0.0, 4.1), (10.0, 40.0), (20.0, 80.0), (25.0, 150.0)):
            verdicts = {self.S_inv.contains([v, h, v_L]) for v_L in np.linspace(0.0, 25.0, 6)}

            self.assertEqual(len(verdicts), 1, (v, h))


if __name__ == "__main__":
    unittest.main()
