"""
Unit tests for chart metrics, the volume form and expression-coefficient forms.
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
from ambient import (  # noqa: E402
    ExpressionForm, MetricError, MetricSpace, NondegeneracyError, SignatureError,
    build_metric, exterior_derivative_residual, inner, metric_at, volume_form,
)


class BuiltinMetricTests(unittest.TestCase):
    def test_minkowski_is_constant_eta(self):
        m = MetricSpace.minkowski(4)
        np.testing.assert_array_equal(metric_at(m, [0.3, -1.0, 2.0, 5.0]), np.diag([-1.0, 1, 1, 1]))
        self.assertEqual(m.signature, (1, 3))

    def test_euclidean_identity(self):
        np.testing.assert_array_equal(metric_at(MetricSpace.euclidean(3), [1, 2, 3]), np.eye(3))

    def test_conformal_at_origin(self):
        m = MetricSpace.conformal("exp(2*x1)", MetricSpace.minkowski(4))
        np.testing.assert_allclose(metric_at(m, [0, 0, 0, 0]), np.diag([-1.0, 1, 1, 1]))
        self.assertEqual(m.signature, (1, 3))

    def test_build_metric_blocks(self):
        m = build_metric({"builtin": "conformal", "factor": "exp(x1)",
                          "base": {"builtin": "minkowski", "dim": 4}})
        self.assertAlmostEqual(metric_at(m, [0, 1.0, 0, 0])[1, 1], math.e)
        custom = build_metric({"entries": [["1", "0", "0"], ["0", "1+x0^2", "0"], ["0", "0", "1"]],
                               "signature": [0, 3]})
        self.assertAlmostEqual(metric_at(custom, [2.0, 0, 0])[1, 1], 5.0)
        with self.assertRaises(MetricError):
            build_metric({"builtin": "hyperbolic", "dim": 3})

    def test_asymmetric_entries_rejected(self):
        with self.assertRaises(MetricError):
            MetricSpace([["1", "x0", "0"], ["0", "1", "0"], ["0", "0", "1"]])

    def test_unknown_coordinate_rejected(self):
        with self.assertRaises(MetricError):
            MetricSpace([["1", "0", "0"], ["0", "y", "0"], ["0", "0", "1"]])

    def test_degenerate_metric_detected(self):
        m = MetricSpace([["x0", "0", "0"], ["0", "1", "0"], ["0", "0", "1"]])
        with self.assertRaises(NondegeneracyError):
            metric_at(m, [0.0, 0.0, 0.0])

    def test_signature_mismatch_detected(self):
        m = MetricSpace([["x0", "0", "0"], ["0", "1", "0"], ["0", "0", "1"]], signature=(0, 3))
        metric_at(m, [1.0, 0.0, 0.0])
        with self.assertRaises(SignatureError):
            metric_at(m, [-1.0, 0.0, 0.0])


class InnerProductTests(unittest.TestCase):
    def test_examples(self):
        m = MetricSpace.minkowski(4)
        x = np.zeros(4)
        e = np.eye(4)
        self.assertEqual(inner(m, x, e[0], e[0]), -1.0)
        self.assertEqual(inner(m, x, e[0], e[1]), 0.0)
        self.assertEqual(inner(MetricSpace.euclidean(3), np.zeros(3), [1, 2, 2], [1, 2, 2]), 9.0)

    def test_matches_matrix_contraction_exactly(self):
        m = MetricSpace.conformal("exp(2*x1)", MetricSpace.minkowski(4))
        rng = np.random.default_rng(3)
        for _ in range(50):
            x, v, w = rng.normal(size=(3, 4))
            self.assertEqual(inner(m, x, v, w), float(v @ metric_at(m, x) @ w))


class VolumeFormTests(unittest.TestCase):
    def test_minkowski_standard_basis(self):
        m = MetricSpace.minkowski(4)
        self.assertEqual(volume_form(m, np.zeros(4), *np.eye(4)), 1.0)

    def test_repeated_argument_vanishes(self):
        m = MetricSpace.euclidean(3)
        v = np.array([0.3, -1.2, 2.0])
        self.assertAlmostEqual(volume_form(m, np.zeros(3), v, v, [1.0, 0, 0]), 0.0, delta=1e-15)

    def test_conformal_volume_density(self):
        # det(e^{2 x1} eta) = -e^{8 x1}, so sqrt|det| = e^{4 x1} = e^2 at x1 = 0.5
        m = MetricSpace.conformal("exp(2*x1)", MetricSpace.minkowski(4))
        value = volume_form(m, [0.0, 0.5, 0.0, 0.0], *np.eye(4))
        self.assertAlmostEqual(value, math.exp(2.0), places=12)

    def test_antisymmetric_under_transpositions(self):
        m = MetricSpace.conformal("exp(x0 - x2)", MetricSpace.minkowski(4))
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.normal(size=4) * 0.5
            vectors = list(rng.normal(size=(4, 4)))
            i, j = rng.choice(4, size=2, replace=False)
            swapped = list(vectors)
            swapped[i], swapped[j] = swapped[j], swapped[i]
            a = volume_form(m, x, *vectors)
            b = volume_form(m, x, *swapped)
            self.assertAlmostEqual(a, -b, delta=1e-12 * max(1.0, abs(a)))

    def test_conformal_scaling(self):
        base = MetricSpace.minkowski(4)
        rng = np.random.default_rng(9)
        for f_src, f in [("0.3*x0", lambda x: 0.3 * x[0]),
                         ("sin(x1) - x2/2", lambda x: math.sin(x[1]) - x[2] / 2)]:
            scaled = MetricSpace.conformal(f"exp(2*({f_src}))", base)
            for _ in range(10):
                x, v, w = rng.normal(size=(3, 4)) * 0.7
                vectors = list(rng.normal(size=(4, 4)))
                factor = math.exp(f(x))
                self.assertAlmostEqual(inner(scaled, x, v, w), factor ** 2 * inner(base, x, v, w),
                                       delta=1e-10 * max(1.0, factor ** 2))
                self.assertAlmostEqual(volume_form(scaled, x, *vectors),
                                       factor ** 4 * volume_form(base, x, *vectors),
                                       delta=1e-9 * max(1.0, factor ** 4))


class ExpressionFormTests(unittest.TestCase):
    def test_evaluates_by_minors(self):
        form = ExpressionForm.from_dict(3, 2, {"0,1": "2", "1,2": "x0"})
        e = np.eye(3)
        self.assertEqual(form.evaluate([5.0, 0, 0], e[0], e[1]), 2.0)
        self.assertEqual(form.evaluate([5.0, 0, 0], e[1], e[0]), -2.0)
        self.assertEqual(form.evaluate([5.0, 0, 0], e[1], e[2]), 5.0)
        self.assertEqual(form.evaluate([5.0, 0, 0], e[0], e[2]), 0.0)

    def test_bad_keys_rejected(self):
        with self.assertRaises(MetricError):
            ExpressionForm.from_dict(3, 2, {"1,0": "1"})
        with self.assertRaises(MetricError):
            ExpressionForm.from_dict(3, 2, {"0,3": "1"})

    def test_potential_of_minkowski_volume(self):
        m = MetricSpace.minkowski(4)
        upsilon = ExpressionForm.from_dict(4, 3, {"1,2,3": "x0"})
        points = m.random_points(100, np.random.default_rng(0))
        self.assertLess(exterior_derivative_residual(m, upsilon, points), 1e-6)

    def test_wrong_potential_detected(self):
        m = MetricSpace.minkowski(4)
        upsilon = ExpressionForm.from_dict(4, 3, {"1,2,3": "2*x0"})
        points = m.random_points(10, np.random.default_rng(0))
        self.assertGreater(exterior_derivative_residual(m, upsilon, points), 0.5)

    def test_conformal_potential(self):
        # Omega = e^{4 x1} dx0^dx1^dx2^dx3 = d(x0 e^{4 x1} dx1^dx2^dx3)
        m = MetricSpace.conformal("exp(2*x1)", MetricSpace.minkowski(4))
        upsilon = ExpressionForm.from_dict(4, 3, {"1,2,3": "x0*exp(4*x1)"})
        points = m.random_points(50, np.random.default_rng(1))
        self.assertLess(exterior_derivative_residual(m, upsilon, points), 1e-6)

    def test_exterior_derivative_of_closed_form(self):
        form = ExpressionForm.from_dict(3, 1, {"0": "1", "2": "3"})
        rng = np.random.default_rng(2)
        points = rng.normal(size=(20, 3))
        vectors = rng.normal(size=(20, 3, 2))
        np.testing.assert_allclose(form.exterior_derivative_field(points, vectors), 0.0, atol=1e-12)


if __name__ == "__main__":
    unittest.main(verbosity=2)
