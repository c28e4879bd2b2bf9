import math

import numpy as np
import pytest
from oracles import quadrature_transmittance, quadrature_weights

from gaussvol.blender import blend, render, render_image, shade_lambert, transmittance_at
from gaussvol.grad import random_scene
from gaussvol.scene import Camera, GaussianScene, Image, generate_rays, view_transform
from gaussvol.tracer import SelectionConfig, TracedKernel, fine_select, trace_kernel


def tk(i, l, q, s):
    return TracedKernel(i, float(l), float(q), float(s))


def random_ray(rng, K):
    return [tk(i, rng.uniform(0, 10), np.log(rng.uniform(0.01, 1)), rng.uniform(0.1, 1)) for i in range(K)]


class TestTransmittance:
    def test_empty(self):
        for t in (-math.inf, -3.0, 0.0, 7.0, math.inf):
            assert transmittance_at([], 1.0, t) == 1.0

    @pytest.mark.parametrize("tau", [0.3, 1.0, 2.5])
    def test_full_cdf(self, tau):
        assert transmittance_at([tk(0, 2.0, 0.0, 0.5)], tau, math.inf) == pytest.approx(math.exp(-tau))

    def test_minus_infinity(self, rng):
        assert transmittance_at(random_ray(rng, 4), 1.0, -math.inf) == pytest.approx(1.0, abs=1e-12)

    def test_two_kernels_against_quadrature(self):
        l, q, s = np.array([2.0, 2.7]), np.log([0.8, 0.5]), np.array([0.4, 0.9])
        ts = np.linspace(0.0, 6.0, 13)
        grid = np.linspace(2.0 - 12, 2.7 + 12, 100_000)
        T_num = np.interp(ts, grid, quadrature_transmittance(grid, l, q, s, 0.7))
        T_cf = [transmittance_at([tk(i, l[i], q[i], s[i]) for i in range(2)], 0.7, t) for t in ts]
        np.testing.assert_allclose(T_cf, T_num, rtol=1e-6)

    def test_non_increasing(self, rng):
        for _ in range(20):
            ray, tau = random_ray(rng, 5), rng.uniform(0, 2)
            T = [transmittance_at(ray, tau, t) for t in np.linspace(-2, 12, 200)]
            assert np.all(np.diff(T) <= 1e-15)
            assert 0 < min(T) and max(T) <= 1


class TestBlend:
    def test_single_kernel_weight(self):
        rb = blend([tk(0, 4.0, 0.0, 0.3)], 1.0)
        assert rb.weights[0][1] == pytest.approx(math.exp(-0.5))
        assert rb.alpha == pytest.approx(1 - math.exp(-1))

    def test_vanishing_kernel(self):
        rb = blend([tk(0, 4.0, -math.inf, 0.3), tk(1, 5.0, 0.0, 0.3)], 1.0)
        assert dict(rb.weights)[0] == 0.0

    def test_order_of_output(self, rng):
        ray = random_ray(rng, 5)
        l = {t.kernel_index: t.l for t in ray}
        order = [k for k, _ in blend(ray, 1.0).weights]
        assert order == sorted(l, key=l.get)

    def test_permutation_invariance(self, rng):
        ray = random_ray(rng, 5)
        base = dict(blend(ray, 0.8).weights)
        for _ in range(10):
            perm = [ray[i] for i in rng.permutation(5)]
            assert dict(blend(perm, 0.8).weights) == base

    def test_occlusion_monotone(self, rng):
        for _ in range(50):
            ray = random_ray(rng, 3)
            target = ray[0]
            before = dict(blend(ray, 1.0).weights)[0]
            front = tk(9, target.l - rng.uniform(0.1, 3), np.log(rng.uniform(0.05, 1)), rng.uniform(0.1, 1))
            after = dict(blend(ray + [front], 1.0).weights)[0]
            assert after <= before

    def test_weights_and_alpha_in_unit_interval(self, rng):
        for _ in range(50):
            rb = blend(random_ray(rng, 5), rng.uniform(0, 3))
            assert all(0 <= w <= 1 for _, w in rb.weights)
            assert 0 <= rb.alpha <= 1


class TestClosedFormAccuracy:
    def test_single_kernel_constant(self):
        # exact weight 1 - e^-1 against closed form e^-1/2, for any sigma
        for s in (0.1, 1.0, 10.0):
            exact = quadrature_weights([0.0], [0.0], [s], 1.0)[0]
            assert exact == pytest.approx(1 - math.exp(-1), abs=1e-8)
            closed = blend([tk(0, 0.0, 0.0, s)], 1.0).weights[0][1]
            assert exact - closed == pytest.approx(1 - math.exp(-1) - math.exp(-0.5), abs=1e-8)

    def test_relative_bound_random_rays(self, rng):
        for _ in range(200):
            K = int(rng.integers(1, 6))
            ray = random_ray(rng, K)
            tau = rng.uniform(0, 1)
            l, q, s = (np.array([getattr(t, a) for t in ray]) for a in ("l", "q", "sigma"))
            exact = quadrature_weights(l, q, s, tau, n=20_000)
            closed = dict(blend(ray, tau).weights)
            for i in range(K):
                assert abs(closed[i] - exact[i]) <= 0.5 * math.exp(q[i])

    def test_broad_kernel_over_opaque_layer(self):
        # the freeze-at-peak approximation is weakest here: T drops inside the broad support
        ray = [tk(0, 0.0, 0.0, 2.0)] + [tk(i, 0.0, 0.0, 0.05) for i in range(1, 5)]
        l, q, s = (np.array([getattr(t, a) for t in ray]) for a in ("l", "q", "sigma"))
        exact = quadrature_weights(l, q, s, 1.0)[0]
        closed = dict(blend(ray, 1.0).weights)[0]
        assert 0.25 < exact - closed < 0.5


def isotropic(centers, s, attrs):
    centers = np.asarray(centers, float)
    return GaussianScene(centers, np.stack([np.eye(3) / s**2] * len(centers)), np.asarray(attrs, float))


class TestRender:
    def test_empty_scene(self):
        buf = render(GaussianScene.empty(), Camera.identity(10, 6, 7))
        assert buf.image.shape == (6, 7, 3)
        assert not buf.image.any() and not buf.alpha.any()

    def test_radial_blob(self):
        cam = Camera.identity(40.0, 33, 33)
        buf = render(isotropic([[0, 0, 5.0]], 0.4, [[1, 0, 0]]), cam)
        row = buf.image[16, 16:, 0]
        assert np.all(np.diff(row[row > 1e-12]) < 0)
        assert not buf.image[..., 1:].any()
        np.testing.assert_allclose(buf.image[..., 0], buf.image[..., 0].T, atol=1e-14)
        np.testing.assert_allclose(buf.image[..., 0], buf.image[::-1, ::-1, 0], atol=1e-14)

    def test_depth_ordering(self):
        cam = Camera.identity(30.0, 9, 9)
        for zr, zb, red_wins in ((4.0, 6.0, True), (6.0, 4.0, False)):
            buf = render(isotropic([[0, 0, zr], [0, 0, zb]], 0.5, [[1, 0, 0], [0, 0, 1]]), cam)
            w = dict(buf.pixel_weights(4, 4))
            assert (w[0] > w[1]) == red_wins

    def test_image_is_weighted_sum(self, rng):
        scene = random_scene(6, seed=4)
        buf = render(scene, Camera.identity(20.0, 16, 16))
        for i, j in [(3, 4), (8, 8), (12, 2)]:
            expect = sum(w * scene.attrs[k] for k, w in buf.pixel_weights(i, j))
            np.testing.assert_allclose(buf.image[i, j], expect, atol=1e-15)

    def test_matches_per_ray_reference(self):
        scene = random_scene(6, seed=2)
        cam = Camera.identity(20.0, 12, 12)
        cfg = SelectionConfig(k_prime=4)
        buf = render(scene, cam, cfg)
        sc = view_transform(scene, cam)
        for ray in generate_rays(cam)[::7]:
            traced = [trace_kernel(ray, k, i) for i, k in enumerate(sc)]
            rb = blend(fine_select(traced, cfg), scene.tau)
            got = buf.pixel_weights(*ray.pixel)
            assert [k for k, _ in got] == [k for k, _ in rb.weights]
            np.testing.assert_allclose([w for _, w in got], [w for _, w in rb.weights], rtol=1e-12, atol=1e-15)
            assert buf.alpha[ray.pixel] == pytest.approx(rb.alpha, rel=1e-12, abs=1e-15)

    def test_attribute_linearity(self, rng):
        scene = random_scene(5, seed=8)
        cam = Camera.identity(20.0, 16, 16)
        c1, c2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        a, b = 0.7, -1.3
        lhs = render(scene.with_attrs(a * c1 + b * c2), cam).image
        rhs = a * render(scene.with_attrs(c1), cam).image + b * render(scene.with_attrs(c2), cam).image
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_render_image_reuses_tape(self, rng):
        scene = random_scene(5, seed=1)
        buf = render(scene, Camera.identity(20.0, 10, 10))
        np.testing.assert_array_equal(render_image(buf.tape, scene.attrs), buf.image)

    def test_normalized_weights(self):
        scene = random_scene(5, seed=3)
        buf = render(scene, Camera.identity(20.0, 10, 10))
        nw = buf.normalized_weights()
        tot = buf.tape.W.sum(axis=1)
        s = nw.sum(axis=1)
        np.testing.assert_allclose(s[tot > 1e-8], 1.0)
        assert np.all(s[tot <= 1e-8] <= 1.0)

    def test_tau_zero_is_transparent_blend(self):
        scene = random_scene(3, seed=5).replace(tau=0.0)
        buf = render(scene, Camera.identity(20.0, 8, 8))
        assert not buf.alpha.any()
        np.testing.assert_allclose(buf.tape.T[buf.tape.idx >= 0], 1.0)


class TestLambert:
    def test_full_and_grazing(self):
        n = np.zeros((2, 1, 3))
        n[0, 0] = [0, 0, 1]
        n[1, 0] = [1, 0, 0]
        out = shade_lambert(Image(n, "normal"), [0, 0, 5], [1.0, 0.5, 0.25]).data
        np.testing.assert_allclose(out[0, 0], [1.0, 0.5, 0.25])
        np.testing.assert_allclose(out[1, 0], 0.0)

    def test_masked_by_alpha(self):
        n = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
        alpha = np.array([[1.0, 0.0], [0.5, 0.0]])
        out = shade_lambert(n, [0, 0, 1], [1, 1, 1], alpha=alpha).data
        assert not out[:, 1].any() and out[:, 0].all()

    def test_hemisphere_flip(self):
        # sphere of kernels with outward normals as attributes
        from gaussvol.convert import icosphere, mesh_to_gaussians

        mesh = icosphere(2, 1.0)
        scene = mesh_to_gaussians(mesh)
        scene = scene.with_attrs(mesh.vertex_normals()).replace(centers=scene.centers + [0, 0, 5])
        cam = Camera.identity(30.0, 32, 32)
        buf = render(scene, cam)
        pts = buf.points()
        centre = np.array([0, 0, 5.0])
        left = shade_lambert(buf.image, centre + [0, -10, 0], [1, 1, 1], buf.alpha, pts).data[..., 0]
        right = shade_lambert(buf.image, centre + [0, 10, 0], [1, 1, 1], buf.alpha, pts).data[..., 0]
        mask = buf.alpha > 0.5
        cols = np.nonzero(mask.any(axis=0))[0]
        mid = (cols.min() + cols.max()) / 2
        jj = np.broadcast_to(np.arange(32), (32, 32))
        assert left[mask & (jj < mid - 2)].mean() > 5 * left[mask & (jj > mid + 2)].mean()
        assert right[mask & (jj > mid + 2)].mean() > 5 * right[mask & (jj < mid - 2)].mean()
