"""
Unit tests for world-sheet construction, normal frames, J, quadrature and
perturbation charts.
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
from ambient import MetricSpace  # noqa: E402
from kaehler import smooth_random_field  # noqa: E402
from sheet import (  # noqa: E402
    DegenerateTangentError, DiscreteSheet, IndefiniteNormalError, NormalField, ParamAxis, ParamDomain,
    SheetMismatchError, WorldSheetError, build_sheet, integrate, map_tangents, normal_frame, perturb,
    project_normal, rotate_J, tangential_residual,
)


def minkowski_cylinder(nt=17, ns=32, radius="1"):
    domain = ParamDomain((ParamAxis("t", 0.0, 1.0, nt), ParamAxis("s", 0.0, 2 * math.pi, ns, periodic=True)))
    return build_sheet(MetricSpace.minkowski(4), domain, ["t", f"{radius}*cos(s)", f"{radius}*sin(s)", "0"])


def euclidean_circle(ns=64):
    domain = ParamDomain((ParamAxis("s", 0.0, 2 * math.pi, ns, periodic=True),))
    return build_sheet(MetricSpace.euclidean(3), domain, ["cos(s)", "sin(s)", "0"])


def random_normal_field(sheet, seed, boundary_zero=True):
    rng = np.random.default_rng(seed)
    ambient = rng.normal(size=sheet.vertices.shape)
    return project_normal(sheet, None, ambient, boundary_zero=boundary_zero)


class ParamDomainTests(unittest.TestCase):
    def test_grids_and_weights(self):
        periodic = ParamAxis("s", 0.0, 2 * math.pi, 16, periodic=True)
        closed = ParamAxis("t", 0.0, 1.0, 9)
        self.assertAlmostEqual(periodic.values()[-1], 2 * math.pi * 15 / 16)
        self.assertEqual(closed.values()[-1], 1.0)
        self.assertAlmostEqual(periodic.weights().sum(), 2 * math.pi)
        self.assertAlmostEqual(closed.weights().sum(), 1.0)
        domain = ParamDomain((closed, periodic))
        self.assertAlmostEqual(domain.weights().sum(), 2 * math.pi)

    def test_boundary_mask_on_non_periodic_ends_only(self):
        domain = ParamDomain((ParamAxis("t", 0.0, 1.0, 9), ParamAxis("s", 0.0, 1.0, 8, periodic=True)))
        mask = domain.boundary_mask()
        self.assertTrue(mask[0].all() and mask[-1].all())
        self.assertFalse(mask[1:-1].any())
        bump = domain.bump()
        self.assertTrue(np.all(bump[mask] == 0.0))
        self.assertTrue(np.all(bump[~mask] > 0.0))

    def test_coarsening(self):
        self.assertEqual(ParamAxis("t", 0, 1, 65).coarsened(2).samples, 17)
        self.assertEqual(ParamAxis("s", 0, 1, 64, periodic=True).coarsened(1).samples, 32)
        with self.assertRaises(WorldSheetError):
            ParamAxis("t", 0, 1, 12).coarsened(1)

    def test_too_few_samples(self):
        with self.assertRaises(WorldSheetError):
            ParamAxis("t", 0, 1, 5)


class BuildSheetTests(unittest.TestCase):
    def test_minkowski_cylinder_induced_metric(self):
        sheet = minkowski_cylinder(nt=9, ns=32)
        h = 2 * math.pi / 32
        np.testing.assert_allclose(sheet.induced[..., 0, 0], -1.0, atol=1e-12)
        np.testing.assert_allclose(sheet.induced[..., 0, 1], 0.0, atol=1e-12)
        np.testing.assert_allclose(sheet.induced[..., 1, 1], (math.sin(h) / h) ** 2, atol=1e-12)
        self.assertEqual(sheet.sign, 1)

    def test_circle_is_closed_world_sheet(self):
        sheet = euclidean_circle()
        self.assertFalse(sheet.boundary_mask.any())
        self.assertEqual(sheet.sign, 1)

    def test_lightlike_sheet_rejected(self):
        domain = ParamDomain((ParamAxis("t", 0.0, 1.0, 9), ParamAxis("s", 0.0, 2 * math.pi, 16, periodic=True)))
        with self.assertRaises(IndefiniteNormalError) as ctx:
            build_sheet(MetricSpace.minkowski(4), domain, ["t", "t", "cos(s)", "sin(s)"])
        self.assertIn(0, ctx.exception.signs)

    def test_rank_deficient_rejected(self):
        domain = ParamDomain((ParamAxis("t", 0.0, 1.0, 9), ParamAxis("s", 0.0, 1.0, 9)))
        with self.assertRaises(DegenerateTangentError):
            build_sheet(MetricSpace.minkowski(4), domain, ["t + s", "t + s", "0", "0"])

    def test_wrong_arity_and_names(self):
        domain = ParamDomain((ParamAxis("t", 0.0, 1.0, 9), ParamAxis("s", 0.0, 1.0, 9)))
        with self.assertRaises(SheetMismatchError):
            build_sheet(MetricSpace.minkowski(4), domain, ["t", "s", "0"])
        with self.assertRaises(SheetMismatchError):
            build_sheet(MetricSpace.minkowski(4), domain, ["t", "s", "u", "0"])

    def test_vertex_array_input(self):
        ref = minkowski_cylinder()
        again = build_sheet(ref.metric, ref.domain, ref.vertices.copy())
        np.testing.assert_array_equal(again.dvol, ref.dvol)
        with self.assertRaises(SheetMismatchError):
            again.refined_to(ref.domain.coarsened(1))


class NormalFrameTests(unittest.TestCase):
    def test_frame_invariants(self):
        for sheet in (minkowski_cylinder(), euclidean_circle()):
            frame = normal_frame(sheet)
            for fa in (frame.f1, frame.f2):
                pairing = np.einsum("...i,...ij,...ja->...a", fa, sheet.g, sheet.tangents)
                self.assertLess(np.max(np.abs(pairing)), 1e-9)
            np.testing.assert_allclose(frame.sigma * sheet.inner(frame.f1, frame.f1), 1.0, atol=1e-12)
            np.testing.assert_allclose(frame.sigma * sheet.inner(frame.f2, frame.f2), 1.0, atol=1e-12)
            np.testing.assert_allclose(sheet.inner(frame.f1, frame.f2), 0.0, atol=1e-12)
            full = np.concatenate([sheet.tangents, frame.f1[..., None], frame.f2[..., None]], axis=-1)
            self.assertTrue(np.all(np.linalg.det(full) > 0))

    def test_cylinder_normal_plane_at_s_zero(self):
        sheet = minkowski_cylinder()
        frame = normal_frame(sheet)
        for fa in (frame.f1[:, 0], frame.f2[:, 0]):
            self.assertLess(np.max(np.abs(fa[:, [0, 2]])), 1e-12)
        # C1-positive frame ((0,0,0,1), (0,cos s,sin s,0)) differs by an in-plane rotation
        e = np.array([0.0, 0.0, 0.0, 1.0])
        f = np.array([0.0, 1.0, 0.0, 0.0])
        full = np.column_stack([sheet.tangents[3, 0, :, 0], sheet.tangents[3, 0, :, 1], e, f])
        self.assertGreater(np.linalg.det(full), 0)

    def test_circle_normal_plane_at_s_zero(self):
        frame = normal_frame(euclidean_circle())
        for fa in (frame.f1[0], frame.f2[0]):
            self.assertLess(abs(fa[1]), 1e-12)

    def test_alignment_is_continuous(self):
        sheet = minkowski_cylinder(ns=64)
        frame = normal_frame(sheet, align=True)
        jumps = np.linalg.norm(np.diff(frame.f1, axis=1), axis=-1)
        self.assertLess(np.max(jumps), 0.2)
        jumps_t = np.linalg.norm(np.diff(frame.f1, axis=0), axis=-1)
        self.assertLess(np.max(jumps_t), 1e-10)


class ComplexStructureTests(unittest.TestCase):
    def test_J_squared_is_minus_identity(self):
        sheet = minkowski_cylinder()
        v = random_normal_field(sheet, 1)
        jjv = rotate_J(sheet, None, rotate_J(sheet, None, v))
        self.assertLess(np.max(np.abs(jjv.values + v.values)), 1e-12)

    def test_J_maps_f1_to_f2(self):
        sheet = minkowski_cylinder()
        frame = normal_frame(sheet)
        jv = rotate_J(sheet, frame, NormalField(frame.f1.copy(), boundary_zero=False))
        np.testing.assert_allclose(jv.values, frame.f2, atol=1e-12)

    def test_J_preserves_metric(self):
        sheet = minkowski_cylinder()
        for trial in range(100):
            v = random_normal_field(sheet, 2 * trial + 10)
            w = random_normal_field(sheet, 2 * trial + 11)
            jv, jw = rotate_J(sheet, None, v), rotate_J(sheet, None, w)
            self.assertLess(np.max(np.abs(sheet.inner(jv.values, jw.values) - sheet.inner(v.values, w.values))),
                            1e-12)

    def test_J_independent_of_frame_gauge(self):
        sheet = minkowski_cylinder()
        v = random_normal_field(sheet, 3)
        rotated = normal_frame(sheet).rotated(0.7)
        np.testing.assert_allclose(rotate_J(sheet, rotated, v).values, rotate_J(sheet, None, v).values, atol=1e-12)

    def test_boundary_zero_preserved(self):
        sheet = minkowski_cylinder()
        jv = rotate_J(sheet, None, random_normal_field(sheet, 4))
        self.assertTrue(jv.boundary_zero)
        self.assertEqual(np.max(np.abs(jv.values[sheet.boundary_mask])), 0.0)


class ProjectionTests(unittest.TestCase):
    def test_idempotent(self):
        sheet = minkowski_cylinder()
        v = random_normal_field(sheet, 5)
        again = project_normal(sheet, None, v.values)
        np.testing.assert_allclose(again.values, v.values, atol=1e-12)
        self.assertLess(tangential_residual(sheet, v), 1e-9)

    def test_tangent_projects_to_zero(self):
        sheet = minkowski_cylinder()
        v = project_normal(sheet, None, sheet.tangents[..., 0], boundary_zero=False)
        self.assertLess(np.max(np.abs(v.values)), 1e-12)

    def test_spatial_normal_is_kept(self):
        sheet = minkowski_cylinder()
        w = np.zeros(sheet.vertices.shape)
        w[..., 3] = 1.0
        v = project_normal(sheet, None, w, boundary_zero=False)
        np.testing.assert_allclose(v.values, w, atol=1e-12)
        np.testing.assert_allclose(sheet.inner(v.values, v.values), 1.0, atol=1e-12)

    def test_mismatched_field(self):
        sheet = minkowski_cylinder()
        with self.assertRaises(SheetMismatchError):
            project_normal(sheet, None, np.zeros((3, 3, 4)))


class QuadratureTests(unittest.TestCase):
    def test_cylinder_area(self):
        sheet = minkowski_cylinder(ns=128)
        h = 2 * math.pi / 128
        self.assertAlmostEqual(integrate(sheet, 1.0), 2 * math.pi * math.sin(h) / h, places=10)
        self.assertAlmostEqual(integrate(sheet, 1.0), 2 * math.pi, delta=3e-3)
        self.assertEqual(integrate(sheet, 0.0), 0.0)

    def test_circle_length(self):
        self.assertAlmostEqual(integrate(euclidean_circle(256), 1.0), 2 * math.pi, delta=1e-3)

    def test_second_order_convergence(self):
        exact = 2 * math.pi * (math.e - 1)
        hs, errors = [], []
        for n in (16, 32, 64):
            sheet = minkowski_cylinder(nt=n + 1, ns=n)
            t = sheet.domain.mesh()[0]
            errors.append(abs(integrate(sheet, np.exp(t) * (1 + np.cos(sheet.domain.mesh()[1]))) - exact))
            hs.append(1.0 / n)
        slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
        self.assertAlmostEqual(slope, 2.0, delta=0.2)


class PerturbTests(unittest.TestCase):
    def test_zero_step_is_bit_identical(self):
        sheet = minkowski_cylinder()
        moved = perturb(sheet, random_normal_field(sheet, 6), 0.0)
        np.testing.assert_array_equal(moved.vertices, sheet.vertices)
        self.assertIs(moved.domain, sheet.domain)

    def test_radial_push_scales_area(self):
        sheet = minkowski_cylinder(ns=128)
        radial = np.zeros(sheet.vertices.shape)
        radial[..., 1:3] = sheet.vertices[..., 1:3]
        moved = perturb(sheet, NormalField(radial, boundary_zero=False), 0.1)
        h = 2 * math.pi / 128
        self.assertAlmostEqual(integrate(moved, 1.0), 2 * math.pi * 1.1 * math.sin(h) / h, places=10)

    def test_collapse_is_rejected(self):
        sheet = minkowski_cylinder()
        radial = np.zeros(sheet.vertices.shape)
        radial[..., 1:3] = sheet.vertices[..., 1:3]
        with self.assertRaises(WorldSheetError):
            perturb(sheet, NormalField(radial, boundary_zero=False), -1.0)

    def test_boundary_vertices_unmoved(self):
        sheet = minkowski_cylinder()
        moved = perturb(sheet, smooth_random_field(sheet, np.random.default_rng([7, 0])), 0.05)
        mask = sheet.boundary_mask
        np.testing.assert_array_equal(moved.vertices[mask], sheet.vertices[mask])
        self.assertFalse(np.array_equal(moved.vertices[~mask], sheet.vertices[~mask]))


class MapTangentTests(unittest.TestCase):
    def test_circle_tangents_match_derivative(self):
        sheet = euclidean_circle()
        s = sheet.domain.mesh()[0]
        expected = np.stack([-np.sin(s), np.cos(s), np.zeros_like(s)], axis=-1)[..., None]
        np.testing.assert_allclose(map_tangents(sheet), expected, atol=1e-6)

    def test_independent_of_grid_spacing(self):
        coarse = map_tangents(minkowski_cylinder(nt=9, ns=8))
        fine = map_tangents(minkowski_cylinder(nt=17, ns=16))
        np.testing.assert_allclose(fine[::2, ::2], coarse, atol=1e-10)

    def test_vertex_array_sheet_rejected(self):
        sheet = euclidean_circle()
        with self.assertRaises(SheetMismatchError):
            map_tangents(DiscreteSheet(sheet.metric, sheet.domain, sheet.vertices))


if __name__ == "__main__":
    unittest.main(verbosity=2)
