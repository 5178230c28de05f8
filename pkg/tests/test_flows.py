"""
Unit tests for the area functional, its h-gradient and gradient descent.
"""

import json
import math
import sys
import unittest
from pathlib import Path
from unittest.mock import Mock, patch

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
from ambient import MetricSpace  # noqa: E402
from flows import (  # noqa: E402
    FlowConfig, FlowError, FlowState, GradientFlow, area, area_differential, colour_period,
    CONSISTENCY_LIMIT, directional_area_derivative, gradient_consistency, gradient_descent, h_gradient_area,
)
from kaehler import jacobi_random_field, metric_h  # noqa: E402
from sheet import NormalField, ParamAxis, ParamDomain, build_sheet, perturb  # noqa: E402


def curve(map_exprs, samples=33):
    domain = ParamDomain((ParamAxis("s", -1.0, 1.0, samples),))
    return build_sheet(MetricSpace.euclidean(3), domain, map_exprs)


def wavy_curve():
    return curve(["s", "0.1*sin(pi*(s+1))", "0.05*sin(2*pi*(s+1))"])


def r4_cylinder(nt=17, ns=32, radius="1"):
    domain = ParamDomain((ParamAxis("t", -0.4, 0.4, nt), ParamAxis("s", 0.0, 2 * math.pi, ns, periodic=True)))
    return build_sheet(MetricSpace.euclidean(4), domain,
                       [f"({radius})*cos(s)", f"({radius})*sin(s)", "t", "0"])


def perturbed_cylinder():
    radius = "1 - 0.05*cos(pi*t/0.8)"
    domain = ParamDomain((ParamAxis("t", -0.4, 0.4, 17), ParamAxis("s", 0.0, 2 * math.pi, 32, periodic=True)))
    return build_sheet(MetricSpace.euclidean(4), domain,
                       [f"({radius})*cos(s)", f"({radius})*sin(s)", "t", "0.02*sin(pi*(t+0.4)/0.8)*cos(s)"])


def catenoid_area():
    c = brentq(lambda c: c * math.cosh(0.4 / c) - 1.0, 0.7, 2.0)
    value, _ = quad(lambda t: 2 * math.pi * c * math.cosh(t / c) ** 2, -0.4, 0.4)
    return c, value


class AreaTests(unittest.TestCase):
    def test_minkowski_cylinder(self):
        domain = ParamDomain((ParamAxis("t", 0.0, 1.0, 17), ParamAxis("s", 0.0, 2 * math.pi, 32, periodic=True)))
        h = 2 * math.pi / 32
        for radius in ("1", "2"):
            sheet = build_sheet(MetricSpace.minkowski(4), domain, ["t", f"{radius}*cos(s)", f"{radius}*sin(s)", "0"])
            self.assertAlmostEqual(area(sheet), 2 * math.pi * float(radius) * math.sin(h / 2) / (h / 2),
                                   places=10)

    def test_circle(self):
        domain = ParamDomain((ParamAxis("s", 0.0, 2 * math.pi, 256, periodic=True),))
        sheet = build_sheet(MetricSpace.euclidean(3), domain, ["cos(s)", "sin(s)", "0"])
        self.assertAlmostEqual(area(sheet), 256 * 2 * math.sin(math.pi / 256), places=12)
        self.assertLess(area(sheet), 2 * math.pi)

    def test_zigzag_curve_is_longer_than_chord(self):
        sheet = curve(["s", "0", "0"])
        zigzag = np.zeros_like(sheet.vertices)
        zigzag[1:-1:2, 1] = 0.05
        zigzag[2:-1:2, 1] = -0.05
        bent = perturb(sheet, NormalField(zigzag, boundary_zero=True), 1.0)
        self.assertGreater(area(bent), area(sheet) + 0.1)
        self.assertAlmostEqual(area(sheet), 2.0, places=12)

    def test_checkerboard_cylinder_gains_area(self):
        sheet = r4_cylinder()
        _, s = sheet.domain.mesh()
        sign = np.where((np.arange(17)[:, None] + np.arange(32)[None, :]) % 2 == 0, 1.0, -1.0)
        radial = 0.02 * sign[..., None] * np.stack([np.cos(s), np.sin(s), np.zeros_like(s), np.zeros_like(s)],
                                                   axis=-1)
        radial[sheet.boundary_mask] = 0.0
        wrinkled = perturb(sheet, NormalField(radial, boundary_zero=True), 1.0)
        self.assertGreater(area(wrinkled), area(sheet))

    def test_catenoid_oracle(self):
        c, value = catenoid_area()
        self.assertAlmostEqual(c * math.cosh(0.4 / c), 1.0, places=12)
        self.assertAlmostEqual(value, math.pi * c * (0.8 + c * math.sinh(0.8 / c)), places=10)
        self.assertLess(value, 2 * math.pi * 0.8)


class GradientTests(unittest.TestCase):
    def test_colour_periods(self):
        self.assertEqual(colour_period(ParamAxis("t", 0, 1, 33)), 2)
        for samples, expected in ((16, 2), (32, 2), (8, 2), (9, 3), (11, 3), (13, 5)):
            self.assertEqual(colour_period(ParamAxis("s", 0, 1, samples, periodic=True)), expected)

    def test_coloured_assembly_matches_vertex_by_vertex(self):
        sheet = r4_cylinder(nt=9, ns=8, radius="1 + 0.1*t^2")
        fast = area_differential(sheet)
        for q in [(1, 0), (2, 3), (4, 7), (7, 5), (0, 2)]:
            for a, f in enumerate((sheet.frame.f1, sheet.frame.f2)):
                values = np.zeros_like(sheet.vertices)
                if not sheet.boundary_mask[q]:
                    values[q] = f[q]
                slow = directional_area_derivative(sheet, NormalField(values))
                self.assertAlmostEqual(fast[q + (a,)], slow, delta=1e-8)

    def test_straight_segment_is_critical(self):
        grad = h_gradient_area(curve(["s", "0", "0"]))
        self.assertLess(grad.sup_norm(), 1e-6)

    def test_gradient_is_boundary_zero(self):
        sheet = wavy_curve()
        grad = h_gradient_area(sheet)
        np.testing.assert_array_equal(grad.values[sheet.boundary_mask], 0.0)

    def test_gradient_consistency(self):
        for sheet in (wavy_curve(), perturbed_cylinder()):
            grad = h_gradient_area(sheet)
            for trial in range(20):
                v = jacobi_random_field(sheet, np.random.default_rng([7, trial]))
                self.assertLess(gradient_consistency(sheet, grad, v), 1e-6)

    def test_cylinder_gradient_is_outward(self):
        sheet = r4_cylinder()
        t, s = sheet.domain.mesh()
        bump = np.sin(math.pi * (t + 0.4) / 0.8)
        radial = np.stack([np.cos(s), np.sin(s), np.zeros_like(s), np.zeros_like(s)], axis=-1) * bump[..., None]
        radial[sheet.boundary_mask] = 0.0
        field = NormalField(radial)
        self.assertGreater(directional_area_derivative(sheet, field), 0.0)
        self.assertGreater(metric_h(sheet, h_gradient_area(sheet), field), 0.0)


class DescentTests(unittest.TestCase):
    def test_config_validation(self):
        self.assertTrue(FlowConfig(step=2.0).validate())
        self.assertTrue(FlowConfig(max_steps=200_000).validate())
        self.assertEqual(FlowConfig().validate(), [])
        with self.assertRaises(FlowError):
            GradientFlow(FlowConfig(step=0.0))
        config = FlowConfig.from_dict({"step": 0.01, "max_steps": 3, "other": True})
        self.assertEqual(FlowConfig.from_dict(config.to_dict()), config)

    def test_zero_steps_returns_input(self):
        sheet = wavy_curve()
        report = gradient_descent(sheet, FlowConfig(max_steps=0))
        self.assertIs(report.sheet, sheet)
        self.assertEqual(report.final_area, area(sheet))
        self.assertEqual(report.steps, [])

    def test_wavy_curve_straightens(self):
        sheet = wavy_curve()
        report = gradient_descent(sheet, FlowConfig(step=1.5e-3, max_steps=800, tolerance=5e-3))
        self.assertAlmostEqual(report.final_area, 2.0, delta=1e-3)
        self.assertGreaterEqual(report.final_area, 2.0 - 1e-12)
        self.assertTrue(report.converged)
        self.assertEqual(report.stop_reason, "tolerance")
        self.assertTrue(report.monotone())
        self.assertFalse(report.experimental)
        np.testing.assert_array_equal(report.sheet.vertices[sheet.boundary_mask],
                                      sheet.vertices[sheet.boundary_mask])
        self.assertIsNotNone(report.max_consistency())
        self.assertLess(report.max_consistency(), CONSISTENCY_LIMIT)

    def test_perturbed_cylinder_reaches_catenoid(self):
        sheet = perturbed_cylinder()
        _, target = catenoid_area()
        report = gradient_descent(sheet, FlowConfig(step=8e-4, max_steps=400, tolerance=1e-7))
        self.assertLess(report.final_area, report.initial_area)
        self.assertAlmostEqual(report.final_area, target, delta=0.01 * target)
        self.assertTrue(report.monotone())
        np.testing.assert_array_equal(report.sheet.vertices[sheet.boundary_mask],
                                      sheet.vertices[sheet.boundary_mask])

    def test_lorentzian_flow_is_experimental(self):
        domain = ParamDomain((ParamAxis("t", 0.0, 1.0, 9), ParamAxis("s", 0.0, 2 * math.pi, 16, periodic=True)))
        sheet = build_sheet(MetricSpace.minkowski(4), domain, ["t", "cos(s)", "sin(s)", "0.1*sin(pi*t)"])
        flow = GradientFlow(FlowConfig(step=1e-3, max_steps=2))
        flow.log_callback = Mock()
        report = flow.run(sheet)
        self.assertTrue(report.experimental)
        levels = [call.args[0] for call in flow.log_callback.call_args_list]
        self.assertIn("WARNING", levels)

    def test_callbacks(self):
        flow = GradientFlow(FlowConfig(max_steps=3, log_every=1))
        flow.log_callback = Mock()
        flow.status_callback = Mock()
        flow.run(wavy_curve())
        states = [call.args[0] for call in flow.status_callback.call_args_list]
        self.assertEqual(states[0], FlowState.RUNNING)
        self.assertIn(states[-1], (FlowState.STOPPED, FlowState.CONVERGED))
        self.assertEqual(flow.get_stats()["steps"], 3)
        self.assertGreaterEqual(flow.log_callback.call_count, 4)

    def test_inconsistent_gradient_is_reported(self):
        flow = GradientFlow(FlowConfig(step=1.5e-3, max_steps=3, log_every=1))
        flow.log_callback = Mock()
        with patch("flows.gradient_consistency", return_value=1e-3):
            report = flow.run(wavy_curve())
        self.assertEqual(report.max_consistency(), 1e-3)
        warnings = [call.args[1] for call in flow.log_callback.call_args_list if call.args[0] == "WARNING"]
        self.assertEqual(len(warnings), 3)
        self.assertIn("gradient consistency", warnings[0])

    def test_catenoid_scenario_target_matches_oracle(self):
        path = Path(__file__).parent.parent / "config" / "scenarios" / "euclidean_catenoid.json"
        checks = {c["name"]: c for c in json.loads(path.read_text())["checks"]}
        _, target = catenoid_area()
        options = checks["flow"]["options"]
        self.assertAlmostEqual(options["target_area"], target, delta=1e-4)
        self.assertLessEqual(options["area_tolerance"], 0.01)


if __name__ == "__main__":
    unittest.main(verbosity=2)
