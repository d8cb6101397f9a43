import numpy as np
import pytest

import rmaff_ps.classic as classic
from conftest import lambert_spec
from rmaff_ps.classic import L2Options, l2_solve, solve_pixels
from rmaff_ps.core import ImageStack, LightSet, angular_error_field
from rmaff_ps.errors import InputError
from rmaff_ps.metrics import mae
from rmaff_ps.render import render_scene, ring_lights


def single_pixel_stack(normal, lights, albedo=1.0):
    normal = np.asarray(normal, dtype=float)
    values = albedo * np.maximum(lights.directions @ normal, 0.0)
    return ImageStack(values.reshape(-1, 1, 1, 1), lights, np.ones((1, 1), bool))


class TestSolvePixels:
    def test_identity_light_matrix(self):
        g, ok = solve_pixels(np.eye(3), np.array([[0.6, 0.0, 0.8]]), np.ones((1, 3), bool))
        assert ok[0]
        np.testing.assert_allclose(g[0], [0.6, 0.0, 0.8], atol=1e-15)
        assert np.linalg.norm(g[0]) == pytest.approx(1.0)

    def test_too_few_valid_lights(self):
        valid = np.array([[True, True, False]])
        _, ok = solve_pixels(np.eye(3), np.array([[0.6, 0.0, 0.8]]), valid)
        assert not ok[0]

    def test_coplanar_lights_rejected(self):
        L = np.array([[0.6, 0.0, 0.8], [0.0, 0.0, 1.0], [-0.6, 0.0, 0.8]])
        _, ok = solve_pixels(L, np.ones((1, 3)), np.ones((1, 3), bool))
        assert not ok[0]


class TestL2Solve:
    def test_recovers_rendered_normals(self, lambert_scene):
        stack, gt = lambert_scene
        result = l2_solve(stack, L2Options(shadow_threshold=0.0))
        assert result.degenerate == 0
        err = np.radians(angular_error_field(result.normals.normals, gt.normals))
        assert err[gt.mask].max() < 1e-6
        np.testing.assert_allclose(result.albedo[gt.mask], np.broadcast_to([0.7, 0.5, 0.3], (int(gt.mask.sum()), 3)), atol=1e-9)
        assert result.residual.max() <= 1e-9

    def test_four_general_lights(self, four_lights):
        stack, gt = render_scene(lambert_spec(size=12, channels=1), four_lights)
        result = l2_solve(stack, L2Options(shadow_threshold=0.0))
        err = np.radians(angular_error_field(result.normals.normals, gt.normals))
        assert err[gt.mask].max() < 1e-6
        np.testing.assert_allclose(result.albedo[..., 0][gt.mask], 0.6, atol=1e-9)

    def test_shadowed_observation_dropped(self):
        dirs = np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8], [0.0, 0.6, 0.8], [-0.8, 0.0, 0.6]])
        lights = LightSet.uniform(dirs)
        normal = [0.8, 0.0, 0.6]
        stack = single_pixel_stack(normal, lights)
        assert stack.images[3, 0, 0, 0] == 0.0
        result = l2_solve(stack)
        np.testing.assert_allclose(result.normals.normals[0, 0], normal, atol=1e-12)
        assert result.albedo[0, 0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_attached_shadows_across_a_bump(self):
        stack, gt = render_scene(lambert_spec(size=32), ring_lights(16, 75.0))
        shadowed = (stack.images[..., 0] == 0.0) & gt.mask
        assert shadowed.any(axis=0).sum() > 20
        result = l2_solve(stack)
        assert result.degenerate == 0
        assert result.normals.mask[gt.mask].all()
        assert mae(result.normals, gt) < 0.5

    def test_homogeneous_in_scale(self, lambert_scene):
        stack, _ = lambert_scene
        base = l2_solve(stack)
        scaled = l2_solve(ImageStack(stack.images * 3.0, stack.lights, stack.mask))
        np.testing.assert_allclose(scaled.normals.normals, base.normals.normals, atol=1e-12)
        np.testing.assert_allclose(scaled.albedo, 3.0 * base.albedo, rtol=1e-12)

    def test_permutation_bitwise_invariant(self, lambert_scene):
        stack, _ = lambert_scene
        order = [5, 2, 7, 0, 1, 6, 3, 4]
        a = l2_solve(stack)
        b = l2_solve(stack.subset(order))
        assert a.normals.normals.tobytes() == b.normals.normals.tobytes()
        assert a.albedo.tobytes() == b.albedo.tobytes()

    def test_threads_do_not_change_output(self, lambert_scene, monkeypatch):
        stack, _ = lambert_scene
        monkeypatch.setattr(classic, "PIXEL_CHUNK", 37)
        serial = l2_solve(stack, threads=1)
        threaded = l2_solve(stack, threads=4)
        assert serial.normals.normals.tobytes() == threaded.normals.normals.tobytes()

    def test_needs_three_images(self):
        lights = ring_lights(2)
        stack = ImageStack(np.ones((2, 2, 2, 1)), lights, np.ones((2, 2), bool))
        with pytest.raises(InputError):
            l2_solve(stack)

    def test_degenerate_pixels_masked(self):
        lights = ring_lights(4, 40.0)
        images = np.zeros((4, 2, 2, 1))
        images[:, 0, 0, 0] = np.maximum(lights.directions @ np.array([0.0, 0.0, 1.0]), 0.0)
        result = l2_solve(ImageStack(images, lights, np.ones((2, 2), bool)))
        assert result.normals.mask[0, 0]
        assert result.degenerate == 3
        assert not result.normals.mask[1, 1]
