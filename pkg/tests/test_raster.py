import numpy as np
import pytest

from oracles import brute_force_render, brute_force_weights, central_difference, random_scene, rel_error
from splatdistill.raster import (
    RasterConfig, backproject_feature_grad, composite, project, rasterize, render,
    render_features, write_ppm, read_ppm,
)
from splatdistill.scene import Camera, GaussianScene

IDENTITY_Q = [1.0, 0, 0, 0]


def single(center, scale=(0.1, 0.1, 0.1), opacity=1.0, color=(1.0, 0.5, 0.25)):
    return GaussianScene([center], [scale], [IDENTITY_Q], [opacity], [color])


def test_on_axis_projection():
    cam = Camera(128, 128, 100.0, 100.0, 64.0, 64.0)
    proj = project(single([0, 0, 2.0]), cam)
    assert len(proj) == 1
    np.testing.assert_allclose(proj[0].mean2d, [64, 64])


def test_isotropic_covariance_matches_numeric_linearization():
    cam = Camera(128, 128, 100.0, 100.0, 64.0, 64.0)
    sigma, z = 0.05, 2.0
    proj = project(single([0, 0, z], scale=(sigma,) * 3), cam)
    np.testing.assert_allclose(proj[0].cov2d, ((100 * sigma / z) ** 2 + 0.3) * np.eye(2), rtol=1e-12)

    # numerically linearize the pinhole map at the center and push the 3D covariance through
    def pi(p):
        return np.array([100 * p[0] / p[2] + 64, 100 * p[1] / p[2] + 64])

    c = np.array([0.0, 0.0, z])
    h = 1e-6
    jac = np.column_stack([(pi(c + h * e) - pi(c - h * e)) / (2 * h) for e in np.eye(3)])
    numeric = jac @ (sigma**2 * np.eye(3)) @ jac.T + 0.3 * np.eye(2)
    np.testing.assert_allclose(proj[0].cov2d, numeric, rtol=1e-6)


def test_behind_camera_is_culled():
    cam = Camera(64, 64, 60.0, 60.0, 32.0, 32.0)
    assert len(project(single([0, 0, -1.0]), cam)) == 0
    assert rasterize(single([0, 0, -1.0]), cam).weights.size == 0


def test_single_gaussian_center_pixel():
    cam = Camera(65, 65, 60.0, 60.0, 32.0, 32.0)
    out = render(single([0, 0, 2.0]), cam)
    assert out.weights.pixel(32, 32) == [(0, pytest.approx(0.99))]
    np.testing.assert_allclose(out.color_image[32, 32], 0.99 * np.array([1.0, 0.5, 0.25]))
    assert list(out.visible_set) == [0]


def test_two_gaussians_closed_form():
    # Tiny splats at the same pixel; opacities below the clamp give alphas exactly 0.6 and 0.8.
    cam = Camera(33, 33, 60.0, 60.0, 16.0, 16.0)
    scene = GaussianScene([[0, 0, 2.0], [0, 0, 3.0]], [[1e-4] * 3] * 2, [IDENTITY_Q] * 2,
                          [0.6, 0.8], [[1, 0, 0], [0, 1, 0]])
    w = rasterize(scene, cam)
    (i0, w0), (i1, w1) = w.pixel(16, 16)
    assert (i0, i1) == (0, 1)
    assert w0 == pytest.approx(0.6)
    assert w1 == pytest.approx(0.32)
    assert w.residual[16, 16] == pytest.approx(0.08)


@pytest.mark.parametrize("seed", range(5))
def test_tiled_matches_brute_force(seed, cam64):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 120)
    out = render(scene, cam64)
    ref_img, ref_w, ref_t = brute_force_render(scene, cam64)
    np.testing.assert_allclose(out.color_image, ref_img, atol=1e-6)
    np.testing.assert_allclose(out.weights.matrix().toarray(), ref_w, atol=1e-6)
    np.testing.assert_allclose(out.weights.residual, ref_t, atol=1e-6)


def test_early_termination_error_is_bounded_by_residual(cam64, rng):
    scene = random_scene(rng, 200, spread=0.4)
    img = render(scene, cam64).color_image
    full, _, trans = brute_force_render(scene, cam64, min_transmittance=1e-12)
    w = rasterize(scene, cam64)
    bound = np.where(w.residual < 1e-4, w.residual, 0.0)
    assert np.all(np.abs(img - full).max(axis=2) <= bound + 1e-12)


def test_conservation_and_weight_range(cam64, rng):
    w = rasterize(random_scene(rng, 200), cam64)
    np.testing.assert_allclose(w.total() + w.residual, 1.0, atol=1e-6)
    assert np.all((w.weights > 0) & (w.weights <= 1))


def test_permutation_invariance(cam64, rng):
    scene = random_scene(rng, 150)
    perm = rng.permutation(len(scene))
    img = render(scene, cam64).color_image
    img_p = render(scene.subset(perm), cam64).color_image
    np.testing.assert_allclose(img, img_p, atol=1e-12)


def test_thread_count_does_not_change_result(cam64, rng):
    scene = random_scene(rng, 150)
    a = rasterize(scene, cam64)
    b = rasterize(scene, cam64, RasterConfig(threads=4))
    assert np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.weights, b.weights)


def test_render_features_linearity_and_consistency(cam64, rng):
    scene = random_scene(rng, 80)
    f = rng.normal(size=(80, 4))
    g = rng.normal(size=(80, 4))
    img_f, w = render_features(scene, cam64, f)
    img_g, _ = render_features(scene, cam64, g)
    img_c, _ = render_features(scene, cam64, 2.0 * f - 3.0 * g)
    np.testing.assert_allclose(img_c, 2.0 * img_f - 3.0 * img_g, atol=1e-6)

    colors, _ = render_features(scene, cam64, scene.colors)
    np.testing.assert_allclose(colors, render(scene, cam64).color_image, atol=1e-6)

    v = np.array([1.0, -2.0, 0.5])
    const, w = render_features(scene, cam64, np.tile(v, (80, 1)))
    np.testing.assert_allclose(const, w.total()[..., None] * v, atol=1e-12)


def test_render_features_matches_explicit_weight_product(cam64, rng):
    scene = random_scene(rng, 5, spread=0.3)
    feats = rng.normal(size=(5, 4))
    img, w = render_features(scene, cam64, feats)
    dense = np.zeros((64 * 64, 5))
    for p in range(64 * 64):
        for i, wi in w.pixel(p % 64, p // 64):
            dense[p, i] += wi
    np.testing.assert_allclose(img.reshape(-1, 4), dense @ feats, atol=1e-12)


def test_render_features_shape_error(cam64, rng):
    from splatdistill.errors import ShapeError

    with pytest.raises(ShapeError):
        render_features(random_scene(rng, 5), cam64, np.zeros((4, 2)))


def test_backproject_simple_cases(cam64, rng):
    w = rasterize(random_scene(rng, 30), cam64)
    assert not backproject_feature_grad(w, np.zeros((64, 64, 3))).any()

    cam = Camera(33, 33, 60.0, 60.0, 16.0, 16.0)
    w = rasterize(single([0, 0, 2.0], scale=(1e-4,) * 3, opacity=0.5), cam)
    assert w.pixel(16, 16) == [(0, 0.5)]
    grad = np.zeros((33, 33, 2))
    grad[16, 16] = [2.0, -4.0]
    np.testing.assert_allclose(backproject_feature_grad(w, grad), [[1.0, -2.0]])


def test_adjoint_identity(cam64, rng):
    scene = random_scene(rng, 100)
    f = rng.normal(size=(100, 6))
    y = rng.normal(size=(64, 64, 6))
    img, w = render_features(scene, cam64, f)
    lhs = np.sum(img * y)
    rhs = np.sum(f * backproject_feature_grad(w, y))
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_backproject_matches_finite_differences(rng):
    cam = Camera(24, 24, 30.0, 30.0, 12.0, 12.0)
    scene = random_scene(rng, 8, spread=0.5)
    feats = rng.normal(size=(8, 3))
    target = rng.normal(size=(24, 24, 3))
    w = rasterize(scene, cam)

    def functional(f):
        img = composite(w, f)
        return 0.5 * np.sum((img - target) ** 2) + np.sum(np.sin(img))

    img = composite(w, feats)
    analytic = backproject_feature_grad(w, (img - target) + np.cos(img))
    numeric = central_difference(functional, feats)
    assert rel_error(analytic, numeric) < 1e-5


def test_ppm_roundtrip(tmp_path, cam64, rng):
    img = render(random_scene(rng, 40), cam64).color_image
    write_ppm(img, tmp_path / "x.ppm")
    back = read_ppm(tmp_path / "x.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_dense_oracle_agrees_on_near_plane_rule(cam64):
    scene = GaussianScene([[0, 0, 0.005], [0, 0, 2.0]], [[0.1] * 3] * 2, [IDENTITY_Q] * 2,
                          [0.9, 0.9], [[1, 0, 0]] * 2)
    w = rasterize(scene, cam64)
    ref, _ = brute_force_weights(scene, cam64)
    np.testing.assert_allclose(w.matrix().toarray(), ref, atol=1e-12)
    assert set(w.visible()) == {1}


def test_guard_band_culls_centers_far_outside_the_frustum(cam64):
    # half-width of the image plane at depth 1 is 32.5 / 60; the guard band widens it by 1.3
    edge = 32.5 / 60.0
    inside = single([1.25 * edge, 0, 1.0])
    outside = single([1.35 * edge, 0, 1.0])
    assert len(project(inside, cam64)) == 1
    assert len(project(outside, cam64)) == 0
    # a splat hugging the camera from the side no longer smears over the whole image
    w = rasterize(single([0, 1.0, 0.05], scale=(0.3, 0.3, 0.3)), cam64)
    assert w.weights.size == 0
