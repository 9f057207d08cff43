import unittest

import numpy as np

from PGEE.errors import SpecificationError
from PGEE.penalty import (PenaltySpec, convexity_check, lqa_weights, penalty_derivative, penalty_value,
                          reparametrize, scad_derivative, scad_l2_convexity_bound, scad_value)
from tests import TestCase

FAMILY_EXAMPLES = (
    PenaltySpec("none"),
    PenaltySpec("lasso", 0.7),
    PenaltySpec("ridge", 0.0, 0.4),
    PenaltySpec("en", 0.5, 0.3),
    PenaltySpec("scad", 1.0),
    PenaltySpec("scad_l2", 1.0, 0.2),
)


class PenaltySpecTest(TestCase):
    def test_invariants(self):
        with self.assertRaises(SpecificationError):
            PenaltySpec("lasso", 1.0, 0.5)
        with self.assertRaises(SpecificationError):
            PenaltySpec("ridge", 0.1, 0.5)
        with self.assertRaises(SpecificationError):
            PenaltySpec("scad", 1.0, a=2.0)
        with self.assertRaises(SpecificationError):
            PenaltySpec("en", -1.0, 0.5)
        with self.assertRaises(SpecificationError):
            PenaltySpec("bridge", 1.0)

    def test_reparametrize(self):
        self.assertEqual(reparametrize(2.0, 0.25), (0.5, 1.5))
        with self.assertRaises(SpecificationError):
            reparametrize(1.0, 1.5)

    def test_from_tuning_honours_family(self):
        self.assertEqual(PenaltySpec.from_tuning("lasso", 0.4, 0.2), PenaltySpec("lasso", 0.4, 0.0))
        self.assertEqual(PenaltySpec.from_tuning("ridge", 0.4, 0.9), PenaltySpec("ridge", 0.0, 0.4))
        self.assertEqual(PenaltySpec.from_tuning("en", 1.0, 0.75), PenaltySpec("en", 0.75, 0.25))
        self.assertEqual(PenaltySpec.from_tuning("none", 3.0, 0.5), PenaltySpec("none"))

    def test_config_forms(self):
        spec = PenaltySpec.from_config({"penalty": "scad_l2", "lambda": 1.0, "alpha": 0.5, "a": 3.7})
        self.assertEqual(spec, PenaltySpec("scad_l2", 0.5, 0.5, 3.7))
        self.assertEqual(PenaltySpec.from_config(spec.to_config()), spec)
        with self.assertRaises(SpecificationError):
            PenaltySpec.from_config({"penalty": "en", "lambda": 1.0, "lambda1": 0.5})


class ScadTest(TestCase):
    lam, a = 1.0, 3.7

    def test_regions(self):
        self.assertAlmostEqual(float(scad_value(0.5, self.lam, self.a)), 0.5)
        mid = (2 * self.a * 2.0 - 4.0 - 1.0) / (2 * (self.a - 1))
        self.assertAlmostEqual(float(scad_value(2.0, self.lam, self.a)), mid)
        self.assertAlmostEqual(float(scad_value(10.0, self.lam, self.a)), (self.a + 1) / 2)

    def test_continuity_at_knots(self):
        for knot in (self.lam, self.a * self.lam):
            below = float(scad_value(knot - 1e-9, self.lam, self.a))
            above = float(scad_value(knot + 1e-9, self.lam, self.a))
            self.assertAlmostEqual(below, above, places=7)

    def test_symmetric(self):
        self.assertAllClose(scad_value([-2.0, 2.0], self.lam, self.a), scad_value([2.0, 2.0], self.lam, self.a))

    def test_derivative(self):
        d = scad_derivative(np.array([0.0, 1.0, 2.0, 3.7, 5.0]), self.lam, self.a)
        self.assertAllClose(d, [1.0, 1.0, 1.7 / 2.7, 0.0, 0.0])

    def test_derivative_matches_finite_difference(self):
        h = 1e-6
        for theta in (0.3, 1.5, 3.0, 4.5):
            numeric = (scad_value(theta + h, self.lam, self.a) - scad_value(theta - h, self.lam, self.a)) / (2 * h)
            self.assertAlmostEqual(float(numeric), float(scad_derivative(theta, self.lam, self.a)), places=5)


class PenaltyValueTest(TestCase):
    def test_families(self):
        beta = np.array([1.0, -2.0, 0.0])
        self.assertAlmostEqual(penalty_value(PenaltySpec("lasso", 0.5), beta), 1.5)
        self.assertAlmostEqual(penalty_value(PenaltySpec("ridge", 0.0, 0.5), beta), 2.5)
        self.assertAlmostEqual(penalty_value(PenaltySpec("en", 0.5, 0.5), beta), 4.0)
        self.assertEqual(penalty_value(PenaltySpec("none"), beta), 0.0)

    def test_invariant_under_coordinate_permutation(self):
        rng = np.random.default_rng(3)
        beta = rng.uniform(-4.0, 4.0, size=10)
        for spec in FAMILY_EXAMPLES:
            value = penalty_value(spec, beta)
            for _ in range(20):
                self.assertAlmostEqual(penalty_value(spec, rng.permutation(beta)), value, places=10,
                                       msg=spec.family)

    def test_derivative_matches_finite_difference_for_every_family(self):
        rng = np.random.default_rng(4)
        h = 1e-6
        for spec in FAMILY_EXAMPLES:
            for theta in rng.uniform(0.01, 6.0, size=100):
                numeric = (penalty_value(spec, theta + h) - penalty_value(spec, theta - h)) / (2 * h)
                self.assertAlmostEqual(numeric, penalty_derivative(spec, theta), delta=1e-5,
                                       msg=f"{spec.family} at {theta}")

    def test_derivative_scalar_and_vector(self):
        spec = PenaltySpec("scad_l2", 1.0, 0.2)
        self.assertIsInstance(penalty_derivative(spec, 0.5), float)
        self.assertAlmostEqual(penalty_derivative(spec, 0.5), 1.0 + 0.2)
        self.assertAllClose(penalty_derivative(PenaltySpec("ridge", 0.0, 0.5), np.array([1.0, 2.0])), [1.0, 2.0])
        with self.assertRaises(SpecificationError):
            penalty_derivative(spec, -1.0)


class LqaWeightsTest(TestCase):
    def test_weights_and_mask(self):
        spec = PenaltySpec("en", 1.0, 0.5)
        sigma, U = lqa_weights(spec, np.array([2.0, -0.5, 0.0]), np.array([False, False, True]))
        self.assertAllClose(np.diag(sigma), [(1.0 + 2.0) / 2.0, (1.0 + 0.5) / 0.5, 0.0])
        self.assertAllClose(U, [3.0, -1.5, 0.0])

    def test_unmasked_zero_rejected(self):
        with self.assertRaises(SpecificationError):
            lqa_weights(PenaltySpec("lasso", 1.0), np.array([1.0, 0.0]))

    def test_vanishing_penalty(self):
        sigma, U = lqa_weights(PenaltySpec("none"), np.array([1.0, 0.0]))
        self.assertAllClose(sigma, np.zeros((2, 2)))


class ConvexityTest(TestCase):
    """Midpoint convexity of the per-coefficient SCAD + ridge penalty."""

    @staticmethod
    def penalty(spec, theta):
        return penalty_value(spec, np.array([theta]))

    def test_bound(self):
        self.assertAlmostEqual(scad_l2_convexity_bound(3.7), 1 / 5.4)
        self.assertTrue(convexity_check(PenaltySpec("scad_l2", 1.0, 0.19)))
        self.assertFalse(convexity_check(PenaltySpec("scad_l2", 1.0, 0.10)))
        self.assertFalse(convexity_check(PenaltySpec("scad", 1.0)))
        self.assertTrue(convexity_check(PenaltySpec("en", 1.0, 0.01)))

    def test_midpoint_convex_above_bound(self):
        spec = PenaltySpec("scad_l2", 1.0, 0.19, 3.7)
        rng = np.random.default_rng(5)
        pairs = rng.uniform(-6.0, 6.0, size=(1000, 2))
        for x, y in pairs:
            mid = self.penalty(spec, (x + y) / 2)
            self.assertLessEqual(mid, (self.penalty(spec, x) + self.penalty(spec, y)) / 2 + 1e-12)

    def test_midpoint_convexity_fails_below_bound(self):
        spec = PenaltySpec("scad_l2", 1.0, 0.10, 3.7)
        x, y = 1.5, 3.0
        self.assertGreater(self.penalty(spec, (x + y) / 2), (self.penalty(spec, x) + self.penalty(spec, y)) / 2)


if __name__ == "__main__":
    unittest.main()
