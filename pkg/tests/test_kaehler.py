"""
Unit tests for the L2 metric, the 2-form omega, their compatibility and the
finite-difference closedness, integrability and potential checks.
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
from ambient import ExpressionForm, MetricSpace  # noqa: E402
from kaehler import (  # noqa: E402
    ROUNDOFF_FLOOR, Extension, KaehlerError, PotentialMismatchError, SweepSpec, SweepSpecError, bracket,
    check_potential, compatibility_residual, conformal_invariance_residual, d_lambda_residual,
    d_omega_residual, directional_derivative, fit_slope, form_omega, jacobi_random_field, judge,
    metric_h, nijenhuis_field, potential_lambda, run_sweep, smooth_random_field, sweep_d_lambda,
    sweep_d_omega, sweep_nijenhuis, symmetry_residuals,
)
from sheet import NormalField, ParamAxis, ParamDomain, build_sheet  # noqa: E402


def cylinder(metric=None, nt=17, ns=32):
    domain = ParamDomain((ParamAxis("t", 0.0, 1.0, nt), ParamAxis("s", 0.0, 2 * math.pi, ns, periodic=True)))
    return build_sheet(metric or MetricSpace.minkowski(4), domain, ["t", "cos(s)", "sin(s)", "0"])


def euclidean_graph():
    domain = ParamDomain((ParamAxis("a", -1.0, 1.0, 17), ParamAxis("b", -1.0, 1.0, 17)))
    return build_sheet(MetricSpace.euclidean(4), domain, ["a", "b", "0.2*a*b", "0.1*(a^2 - b^2)"])


def sin_t_field(sheet, direction):
    t = sheet.domain.mesh()[0]
    values = np.sin(math.pi * t)[..., None] * direction
    values[sheet.boundary_mask] = 0.0
    return NormalField(values)


class MetricAndFormTests(unittest.TestCase):
    def setUp(self):
        self.sheet = cylinder()
        self.jacobian = math.sin(2 * math.pi / 32) / (2 * math.pi / 32)

    def test_h_on_cylinder(self):
        v = sin_t_field(self.sheet, np.array([0.0, 0.0, 0.0, 1.0]))
        h = metric_h(self.sheet, v, v)
        self.assertAlmostEqual(h, math.pi * self.jacobian, places=10)
        self.assertAlmostEqual(h, math.pi, delta=0.01 * math.pi)

    def test_omega_on_cylinder(self):
        s = self.sheet.domain.mesh()[1]
        v = sin_t_field(self.sheet, np.array([0.0, 0.0, 0.0, 1.0]))
        radial = np.stack([np.zeros_like(s), np.cos(s), np.sin(s), np.zeros_like(s)], axis=-1)
        t = self.sheet.domain.mesh()[0]
        w_values = np.sin(math.pi * t)[..., None] * radial
        w_values[self.sheet.boundary_mask] = 0.0
        w = NormalField(w_values)
        self.assertAlmostEqual(form_omega(self.sheet, v, w), -math.pi * self.jacobian, places=10)
        self.assertAlmostEqual(form_omega(self.sheet, w, v), math.pi * self.jacobian, places=10)

    def test_mismatched_grid_rejected(self):
        other = cylinder(nt=9, ns=16)
        v = jacobi_random_field(other, np.random.default_rng(0))
        with self.assertRaises(KaehlerError):
            metric_h(self.sheet, v, v)

    def test_compatibility_across_metrics(self):
        conformal = MetricSpace.conformal("exp(2*(0.3*x1 - 0.2*x2))", MetricSpace.minkowski(4))
        for sheet in (self.sheet, cylinder(conformal), euclidean_graph()):
            with self.subTest(metric=sheet.metric.name):
                self.assertLess(compatibility_residual(sheet, trials=50, seed=42), 1e-10)

    def test_symmetry_battery(self):
        out = symmetry_residuals(self.sheet, trials=20, seed=7)
        self.assertLess(out["h_symmetry"], 1e-12)
        self.assertLess(out["omega_antisymmetry"], 1e-12)
        self.assertLess(out["omega_diagonal"], 1e-12)
        self.assertLess(out["omega_J_invariance"], 1e-10)
        self.assertGreater(out["h_min_diagonal"], 0.0)

    def test_conformal_invariance_of_J(self):
        residual = conformal_invariance_residual(self.sheet, "exp(0.4*x1 + 0.1*x0)", trials=5)
        self.assertLess(residual, 1e-10)


class DerivativeTests(unittest.TestCase):
    def setUp(self):
        self.sheet = cylinder()
        rng = np.random.default_rng([42, 0])
        self.v = smooth_random_field(self.sheet, rng)
        self.w = smooth_random_field(self.sheet, rng)

    def test_zero_field_gives_exact_zero(self):
        zero = NormalField(np.zeros_like(self.sheet.vertices))
        self.assertEqual(d_omega_residual(self.sheet, zero, self.v, self.w, 1e-3), 0.0)

    def test_nijenhuis_diagonal_is_exact_zero(self):
        tau = nijenhuis_field(self.sheet, self.v, self.v, 1e-3)
        self.assertEqual(float(np.max(np.abs(tau.values))), 0.0)

    def test_d_omega_small(self):
        self.assertLess(d_omega_residual(self.sheet, self.v, self.w,
                                         smooth_random_field(self.sheet, np.random.default_rng(5)), 1e-3), 1e-2)

    def test_potential_precheck(self):
        m = MetricSpace.minkowski(4)
        good = ExpressionForm.from_dict(4, 3, {"1,2,3": "x0"})
        self.assertLess(check_potential(m, good), 1e-6)
        bad = ExpressionForm.from_dict(4, 3, {"1,2,3": "2*x0"})
        with self.assertRaises(PotentialMismatchError):
            check_potential(m, bad)
        with self.assertRaises(PotentialMismatchError):
            potential_lambda(self.sheet, self.v, bad)

    def test_d_lambda_small(self):
        upsilon = ExpressionForm.from_dict(4, 3, {"1,2,3": "x0"})
        self.assertLess(d_lambda_residual(self.sheet, self.v, self.w, upsilon, 1e-3), 1e-2)

    def test_projection_extension_bracket_vanishes(self):
        V, W = Extension.of(self.v), Extension.of(self.w)
        raw = directional_derivative(self.sheet, self.v, lambda s: W.at(s).values, 1e-4)
        self.assertGreater(float(np.max(np.abs(raw))), 1e-4)
        self.assertLess(bracket(self.sheet, V, W, 1e-4).sup_norm(), 1e-7)


class SweepTests(unittest.TestCase):
    def test_spec_validation(self):
        with self.assertRaises(SweepSpecError):
            SweepSpec(epsilons=(1e-3, 1e-2, 5e-4))
        with self.assertRaises(SweepSpecError):
            SweepSpec(trials=2)
        with self.assertRaises(SweepSpecError):
            SweepSpec(epsilons=(1e-2, 1e-7))
        spec = SweepSpec.from_dict({"epsilons": [0.02, 0.01, 0.005], "seed": 3, "unknown": 1})
        self.assertEqual(spec.epsilons, (0.02, 0.01, 0.005))
        self.assertEqual(SweepSpec.from_dict(spec.to_dict()), spec)

    def test_fit_slope(self):
        eps = [1e-2, 5e-3, 2.5e-3]
        self.assertAlmostEqual(fit_slope(eps, [3 * e ** 2 for e in eps]), 2.0, places=10)
        self.assertIsNone(fit_slope(eps, [0.0, 0.0, 0.0]))
        self.assertIsNone(fit_slope(eps[:2], [1.0, 0.5]))

    def test_judge(self):
        spec = SweepSpec()
        self.assertTrue(judge(spec, [1e-4, 2.5e-5, 6.25e-6], 2.0))
        self.assertFalse(judge(spec, [1e-4, 5e-5, 2.5e-5], 1.0))
        self.assertTrue(judge(spec, [1e-13, 0.0, 3e-14], None))
        self.assertFalse(judge(spec, [1e-4, math.nan, 1e-6], None))
        self.assertFalse(judge(spec, [1.0, 0.25, 0.0625], 2.0))
        self.assertTrue(judge(SweepSpec(one_sided=True, expected_slope=1.0, slope_tolerance=0.0),
                              [1e-3, 1e-4, 1e-5], 3.3))

    def test_run_sweep_pairs_steps_with_grids(self):
        sheet = cylinder(nt=33, ns=32)
        seen = []

        def residual(s, eps, rng):
            seen.append((s.shape, eps))
            return 5.0 * eps ** 2
        result = run_sweep("synthetic", sheet, SweepSpec(), residual)
        self.assertEqual(result.grids, ["9x8", "17x16", "33x32"])
        self.assertEqual(seen[0], ((9, 8), 1e-2))
        self.assertEqual(len(seen), 9)
        self.assertAlmostEqual(result.slope, 2.0, places=8)
        self.assertTrue(result.passed)

    def test_offset_residual_fails_threshold(self):
        spec = SweepSpec(threshold=1e-2, refine_grid=False)
        scaled = run_sweep("synthetic", cylinder(), spec, lambda s, eps, rng: 5000.0 * eps ** 2)
        self.assertAlmostEqual(scaled.slope, 2.0, places=8)
        self.assertFalse(scaled.passed)
        offset = run_sweep("synthetic", cylinder(), spec, lambda s, eps, rng: 0.05 + eps ** 2)
        self.assertFalse(offset.passed)
        self.assertTrue(run_sweep("synthetic", cylinder(), spec, lambda s, eps, rng: 100.0 * eps ** 2).passed)

    def test_nan_residual_fails(self):
        result = run_sweep("synthetic", cylinder(), SweepSpec(refine_grid=False),
                           lambda s, eps, rng: math.nan if eps < 4e-3 else eps)
        self.assertFalse(result.passed)
        self.assertTrue(math.isnan(result.residuals[-1]))

    def test_d_omega_sweep_converges(self):
        result = sweep_d_omega(cylinder(nt=33, ns=32), SweepSpec(threshold=1e-3))
        self.assertTrue(result.passed, result.to_dict())

    def test_nijenhuis_sweep_converges(self):
        result = sweep_nijenhuis(cylinder(nt=33, ns=32), SweepSpec(threshold=1e-3, refine_grid=False))
        self.assertTrue(result.passed, result.to_dict())
        self.assertEqual(result.grids, ["33x32"] * 3)
        self.assertGreater(min(result.residuals), ROUNDOFF_FLOOR)
        self.assertTrue(1.7 <= result.slope <= 2.3, result.slope)

    def test_d_lambda_sweep(self):
        upsilon = ExpressionForm.from_dict(4, 3, {"1,2,3": "x0"})
        result = sweep_d_lambda(cylinder(nt=33, ns=32), SweepSpec(threshold=1e-2), upsilon)
        self.assertTrue(result.passed, result.to_dict())
        self.assertLess(result.details["potential_residual"], 1e-6)
        with self.assertRaises(PotentialMismatchError):
            sweep_d_lambda(cylinder(), SweepSpec(),
                           ExpressionForm.from_dict(4, 3, {"1,2,3": "x1"}))


if __name__ == "__main__":
    unittest.main(verbosity=2)
