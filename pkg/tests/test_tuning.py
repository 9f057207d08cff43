import unittest

import numpy as np

from Panel_Data.longitudinal_data import standardize
from PGEE.errors import NumericalError, SpecificationError
from PGEE.penalty import PenaltySpec
from PGEE.solver import ModelSpec, SolverControl, fit_gee, fit_pgee
from PGEE.tuning import (CvPoint, CvSurface, GRID_TOP_MARGIN, TuningGrid, cv_then_fit, effective_parameters,
                         lambda_max, log_lambda_sequence, loso_cv, penalization_path, qgcv, select_qgcv,
                         select_tuning)
from tests import TestCase, anticorrelated_dataset, make_dataset, orthonormal_design

GAUSSIAN = ModelSpec.gaussian()
TIGHT = SolverControl(check_scaling=False, convergence_c=1e-12)


class GridTest(TestCase):
    def test_validation(self):
        with self.assertRaises(SpecificationError):
            TuningGrid((0.1, 0.2))
        with self.assertRaises(SpecificationError):
            TuningGrid((0.2, 0.1), (0.0, 1.5))
        with self.assertRaises(SpecificationError):
            TuningGrid(())

    def test_points_by_family(self):
        grid = TuningGrid((0.3, 0.2, 0.1), (0.25, 0.5, 1.0))
        self.assertEqual(grid.points("lasso"), [(0.3, 1.0), (0.2, 1.0), (0.1, 1.0)])
        self.assertEqual(grid.points("ridge"), [(0.3, 0.0), (0.2, 0.0), (0.1, 0.0)])
        self.assertEqual(grid.points("none"), [(0.0, 1.0)])
        self.assertEqual(len(grid.points("scad_l2")), 9)
        with self.assertRaises(SpecificationError):
            grid.points("bridge")

    def test_log_lambda_sequence(self):
        seq = log_lambda_sequence(2.0, 5, 1e-2)
        self.assertEqual(len(seq), 5)
        self.assertAlmostEqual(seq[0], 2.0 * GRID_TOP_MARGIN)
        self.assertAlmostEqual(seq[-1], 0.02)
        self.assertTrue(np.all(np.diff(seq) < 0))
        with self.assertRaisesRegex(NumericalError, "lambda_max is zero"):
            log_lambda_sequence(0.0)

    def test_default_grid_starts_above_lambda_max(self):
        d, _ = standardize(make_dataset(n=12, T=3, seed=1))
        grid = TuningGrid.default(d, GAUSSIAN, "lasso", n_lambda=4, alphas=(0.5, 1.0))
        self.assertAlmostEqual(grid.lambda_values[0], GRID_TOP_MARGIN * lambda_max(d, GAUSSIAN, 1.0))
        self.assertEqual(grid.alpha_values, (0.5, 1.0))

    def test_lambda_max_zeroes_lasso(self):
        d, _ = standardize(make_dataset(n=12, T=3, seed=2))
        lam = lambda_max(d, GAUSSIAN)
        fit = fit_pgee(d, GAUSSIAN, PenaltySpec("lasso", 2.0 * lam), TIGHT)
        self.assertEqual(fit.active_set, ())
        fit = fit_pgee(d, GAUSSIAN, PenaltySpec("lasso", 0.5 * lam), TIGHT)
        self.assertNotEqual(fit.active_set, ())


class SurfaceTest(TestCase):
    @staticmethod
    def point(lam, alpha, pl, se=0.5, valid=True):
        return CvPoint(lam, alpha, pl, se, 3, valid)

    def test_ties_prefer_larger_lambda_then_alpha(self):
        surface = CvSurface.from_points("en", [
            self.point(0.5, 0.5, 2.0), self.point(1.0, 0.5, 2.0), self.point(1.0, 1.0, 2.0), self.point(0.1, 1.0, 3.0),
        ])
        self.assertEqual(select_tuning(surface, "min"), (1.0, 1.0))

    def test_one_se_rule(self):
        surface = CvSurface.from_points("en", [
            self.point(2.0, 1.0, 2.4), self.point(1.0, 1.0, 2.0, se=0.5), self.point(4.0, 1.0, 2.6),
            self.point(3.0, 0.5, 2.5),
        ])
        self.assertEqual(select_tuning(surface, "min"), (1.0, 1.0))
        self.assertEqual(select_tuning(surface, "one_se"), (3.0, 0.5))
        self.assertIn(surface.best, surface.one_se_set)

    def test_invalid_points_skipped(self):
        surface = CvSurface.from_points("lasso", [self.point(1.0, 1.0, float("nan"), valid=False),
                                                  self.point(0.5, 1.0, 4.0)])
        self.assertEqual(select_tuning(surface), (0.5, 1.0))
        rows = surface.to_rows()
        self.assertEqual([r["valid"] for r in rows], [False, True])
        self.assertEqual(rows[1]["chosen"], "min;one_se")

    def test_select_qgcv(self):
        points = [self.point(1.0, 1.0, 2.0), self.point(0.5, 1.0, 1.0), self.point(0.2, 1.0, 3.0)]
        for q, value in zip(points, (1.5, 1.5, float("nan"))):
            q.qgcv = value
        surface = CvSurface.from_points("lasso", points)
        self.assertTrue(surface.has_qgcv)
        self.assertEqual(select_qgcv(surface), (1.0, 1.0))
        rows = surface.to_rows()
        self.assertEqual([r["qgcv"] for r in rows][:2], [1.5, 1.5])
        self.assertEqual(rows[0]["chosen"], "qgcv")
        self.assertEqual(rows[1]["chosen"], "min;one_se")
        bare = CvSurface.from_points("lasso", [self.point(1.0, 1.0, 2.0)])
        self.assertFalse(bare.has_qgcv)
        with self.assertRaisesRegex(NumericalError, "QGCV"):
            select_qgcv(bare)

    def test_no_valid_point(self):
        surface = CvSurface.from_points("lasso", [self.point(1.0, 1.0, float("nan"), valid=False)])
        with self.assertRaisesRegex(NumericalError, "no valid grid point"):
            select_tuning(surface)
        with self.assertRaises(SpecificationError):
            select_tuning(surface, "median")


class LosoCvTest(TestCase):
    def test_matches_brute_force(self):
        d = make_dataset(n=3, T=4, seed=3)
        grid = TuningGrid((0.05,), (1.0,))
        surface = loso_cv(d, GAUSSIAN, "lasso", grid, TIGHT)
        spec = PenaltySpec("lasso", 0.05)
        expected = 0.0
        for i in range(d.n):
            fit = fit_pgee(d.without(i), GAUSSIAN, spec, TIGHT)
            y_i, X_i, T_i = d.block(i)
            r = y_i - X_i @ fit.beta_nonnaive
            expected += float(r @ r) / T_i
        self.assertEqual(len(surface.points), 1)
        self.assertAlmostEqual(surface.points[0].pl_cv, expected, places=10)

    def test_null_model_loss(self):
        d = make_dataset(n=5, T=3, seed=4)
        surface = loso_cv(d, GAUSSIAN, "lasso", TuningGrid((1e6,), (1.0,)), TIGHT)
        expected = sum(float(d.block(i)[0] @ d.block(i)[0]) / 3 for i in range(d.n))
        self.assertAlmostEqual(surface.points[0].pl_cv, expected, places=10)

    def test_noiseless_duplicated_subjects(self):
        d = make_dataset(n=5, T=4, noise=0.0, seed=5).resample([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
        surface = loso_cv(d, GAUSSIAN, "none", TuningGrid((1.0,)), TIGHT)
        self.assertLess(surface.points[0].pl_cv, 1e-8)

    def test_subject_order_invariant(self):
        d = make_dataset(n=6, T=3, seed=6)
        grid = TuningGrid((0.3, 0.1), (0.5, 1.0))
        a = loso_cv(d, GAUSSIAN, "en", grid, TIGHT)
        b = loso_cv(d.subset([5, 2, 0, 4, 1, 3]), GAUSSIAN, "en", grid, TIGHT)
        self.assertAllClose([q.pl_cv for q in a.points], [q.pl_cv for q in b.points], atol=1e-10)

    def test_thread_count_does_not_change_results(self):
        d = make_dataset(n=6, T=3, seed=7)
        grid = TuningGrid((0.4, 0.2, 0.1), (0.5, 1.0))
        one = loso_cv(d, GAUSSIAN, "scad_l2", grid, TIGHT, threads=1)
        many = loso_cv(d, GAUSSIAN, "scad_l2", grid, TIGHT, threads=3)
        self.assertAllClose([q.pl_cv for q in one.points], [q.pl_cv for q in many.points], atol=0)
        self.assertEqual(select_tuning(one), select_tuning(many))

    def test_grid_enumeration_order(self):
        d = make_dataset(n=6, T=3, seed=30)
        up = loso_cv(d, GAUSSIAN, "en", TuningGrid((0.4, 0.1), (0.25, 0.5, 1.0)), TIGHT)
        down = loso_cv(d, GAUSSIAN, "en", TuningGrid((0.4, 0.1), (1.0, 0.5, 0.25)), TIGHT)
        self.assertEqual([(q.lambda_, q.alpha) for q in up.points], [(q.lambda_, q.alpha) for q in down.points])
        self.assertAllClose([q.pl_cv for q in up.points], [q.pl_cv for q in down.points], atol=0)
        self.assertEqual(select_tuning(up), select_tuning(down))
        self.assertEqual(select_tuning(up, "one_se"), select_tuning(down, "one_se"))

    def test_qgcv_column_matches_full_data_fit(self):
        d = make_dataset(n=6, T=3, seed=31)
        surface = loso_cv(d, GAUSSIAN, "lasso", TuningGrid((0.3, 0.05)), TIGHT, with_qgcv=True)
        for q in surface.points:
            fit = fit_pgee(d, GAUSSIAN, PenaltySpec("lasso", q.lambda_), TIGHT)
            self.assertAlmostEqual(q.qgcv, qgcv(fit, d), places=10)
        plain = loso_cv(d, GAUSSIAN, "lasso", TuningGrid((0.3, 0.05)), TIGHT)
        self.assertFalse(plain.has_qgcv)

    def test_unbalanced_anticorrelated_clusters(self):
        d = anticorrelated_dataset(n_pairs=12, seed=32)
        surface = loso_cv(d, ModelSpec.gaussian("exchangeable"), "lasso", TuningGrid((0.1,)), TIGHT)
        self.assertTrue(surface.points[0].valid, msg=surface.points[0].message)
        self.assertTrue(np.isfinite(surface.points[0].pl_cv))

    def test_needs_two_subjects(self):
        with self.assertRaises(SpecificationError):
            loso_cv(make_dataset(n=1, T=4), GAUSSIAN, "lasso", TuningGrid((0.1,)))

    def test_exchangeable_working_correlation(self):
        d = make_dataset(n=6, T=3, seed=8)
        surface = loso_cv(d, ModelSpec.gaussian("exchangeable"), "lasso", TuningGrid((0.2, 0.1)), TIGHT)
        self.assertTrue(all(np.isfinite(q.pl_cv) for q in surface.valid_points))

    def test_cv_then_fit(self):
        d, _ = standardize(make_dataset(n=8, T=3, seed=9))
        grid = TuningGrid.default(d, GAUSSIAN, "en", n_lambda=5, alphas=(0.5, 1.0))
        surface, spec, fit = cv_then_fit(d, GAUSSIAN, "en", grid)
        lam, alpha = select_tuning(surface)
        self.assertEqual(spec, PenaltySpec.from_tuning("en", lam, alpha))
        self.assertAllClose(fit.beta_naive, fit_pgee(d, GAUSSIAN, spec).beta_naive, atol=0)


class QgcvTest(TestCase):
    def test_unpenalized_closed_form(self):
        d = make_dataset(n=2, T=4, beta=(1.0, -1.0), seed=10)
        fit = fit_pgee(d, GAUSSIAN, PenaltySpec("none"), TIGHT)
        rss = float(np.sum((d.y - d.X @ fit.beta_nonnaive) ** 2))
        self.assertAlmostEqual(qgcv(fit, d), rss / (d.n * (1 - 2 / 8)), places=10)

    def test_too_complex(self):
        d = make_dataset(n=2, T=2, beta=(1.0, -1.0, 0.5, 2.0), seed=11)
        fit = fit_pgee(d, GAUSSIAN, PenaltySpec("none"), TIGHT)
        with self.assertRaisesRegex(NumericalError, "too complex"):
            qgcv(fit, d)

    def test_binomial_uses_deviance_residuals(self):
        rng = np.random.default_rng(12)
        d = make_dataset(n=30, T=3, beta=(0.5, -0.5), seed=12)
        d = d.with_arrays(y=(rng.random(d.N) < 0.5).astype(float))
        model = ModelSpec.binomial()
        fit = fit_pgee(d, model, PenaltySpec("lasso", 0.01), TIGHT)
        self.assertGreater(qgcv(fit, d), 0.0)


class EffectiveParametersTest(TestCase):
    def test_unpenalized(self):
        d = make_dataset(n=5, T=4, seed=13)
        fit = fit_pgee(d, GAUSSIAN, PenaltySpec("none"), TIGHT)
        self.assertAlmostEqual(effective_parameters(fit, d), 3.0, places=10)

    def test_ridge_on_orthonormal_design(self):
        X = orthonormal_design(40, 4, seed=14)
        d = make_dataset(n=10, T=4, beta=(1.0, -1.0, 2.0, 0.5), X=X, seed=14)
        lambda2 = 0.3
        fit = fit_pgee(d, GAUSSIAN, PenaltySpec("ridge", 0.0, lambda2), TIGHT)
        self.assertAlmostEqual(effective_parameters(fit, d), 4 / (1 + 2 * lambda2), places=8)

    def test_empty_fit(self):
        d = make_dataset(n=5, T=4, seed=15)
        fit = fit_pgee(d, GAUSSIAN, PenaltySpec("lasso", 1e6), TIGHT)
        self.assertEqual(effective_parameters(fit, d), 0.0)


class PathTest(TestCase):
    def test_largest_lambda_is_all_zero_and_smallest_is_gee(self):
        d, _ = standardize(make_dataset(n=12, T=3, seed=16))
        lam = lambda_max(d, GAUSSIAN)
        path = penalization_path(d, GAUSSIAN, "lasso", 1.0, [2.0 * lam, 0.5 * lam, 0.1, 1e-3, 1e-6])
        self.assertTrue(path.valid.all())
        self.assertArrayEqual(path.coefficients[:, 0], np.zeros(3))
        gee = fit_gee(d, GAUSSIAN)
        self.assertAllClose(path.coefficients[:, -1], gee.beta_naive, atol=1e-4)

    def test_default_sequence(self):
        d, _ = standardize(make_dataset(n=12, T=3, seed=17))
        path = penalization_path(d, GAUSSIAN, "scad_l2", 0.5, n_lambda=6)
        self.assertEqual(path.lambdas.shape, (6,))
        self.assertAlmostEqual(path.lambdas[0], GRID_TOP_MARGIN * lambda_max(d, GAUSSIAN, 0.5))
        self.assertEqual(path.coefficients.shape, (3, 6))
        self.assertEqual(len(path.to_rows()), 6)
        self.assertEqual(len(set(path.top_k(2))), 2)

    def test_family_fixes_alpha(self):
        d, _ = standardize(make_dataset(n=12, T=3, seed=18))
        self.assertEqual(penalization_path(d, GAUSSIAN, "lasso", 0.3, [0.5, 0.1]).alpha, 1.0)
        self.assertEqual(penalization_path(d, GAUSSIAN, "ridge", 0.3, [0.5, 0.1]).alpha, 0.0)

    def test_ascending_sequence_rejected(self):
        d = make_dataset()
        with self.assertRaises(SpecificationError):
            penalization_path(d, GAUSSIAN, "lasso", 1.0, [0.1, 0.2])

    def test_grouping_gap_shrinks_with_lambda(self):
        n, T = 50, 4
        N = n * T
        Q = orthonormal_design(N, 2, seed=19) / np.sqrt(N)
        L = np.linalg.cholesky(np.array([[1.0, 0.8], [0.8, 1.0]]))
        X = np.sqrt(N) * Q @ L.T
        d = make_dataset(n=n, T=T, beta=(1.0, 0.6), noise=0.0, X=X)
        control = SolverControl(check_scaling=False, convergence_c=1e-10, max_iterations=500)
        path = penalization_path(d, GAUSSIAN, "scad_l2", 0.1, [10.0, 8.0, 6.0, 4.0, 3.0], control)
        self.assertTrue(path.valid.all())
        gaps = np.abs(path.coefficients[0] - path.coefficients[1])
        self.assertTrue(np.all(np.diff(gaps) > 0), msg=str(gaps))


if __name__ == "__main__":
    unittest.main()
