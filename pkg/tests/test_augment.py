import numpy as np
import pytest

from oracles import random_scene
from splatdistill.augment import (
    immature_manifold, laplacian_energy, point_jitter, psnr, rendering_equivalent, rigid_transform,
    transform_camera,
)
from splatdistill.errors import ConfigError
from splatdistill.raster import render
from splatdistill.scene import Camera, GaussianScene, quat_to_rotmat
from splatdistill.synth import orbit_cameras, synth_scene, tabletop_layout

FIELDS = ("centers", "scales", "rotations", "opacities", "colors")


@pytest.fixture(scope="module")
def tabletop():
    scene = synth_scene(tabletop_layout(0, count_scale=0.6), 0)
    cams = orbit_cameras(scene, 4, 80, 60, phase=0.3)
    return scene, cams, [render(scene, c).color_image for c in cams]


def same_bytes(a, b):
    return all(getattr(a, f).tobytes() == getattr(b, f).tobytes() for f in FIELDS)


def test_zero_epsilon_is_identity(rng):
    s = random_scene(rng, 20)
    assert same_bytes(rendering_equivalent(s, 0.0, 3), s)


def test_opaque_splats_never_move(rng):
    s = random_scene(rng, 30).with_(opacities=np.ones(30))
    assert np.array_equal(rendering_equivalent(s, 0.5, 1).centers, s.centers)


def test_noise_lives_in_principal_frame(rng):
    s = random_scene(rng, 2000)
    s = s.with_(opacities=np.zeros(2000), scales=np.tile([0.5, 0.1, 0.02], (2000, 1)))
    out = rendering_equivalent(s, 0.2, 4)
    local = np.einsum("nji,nj->ni", quat_to_rotmat(s.rotations), out.centers - s.centers)
    np.testing.assert_allclose(local.std(axis=0), 0.2 * np.array([0.5, 0.1, 0.02]), rtol=0.06)
    for f in ("scales", "rotations", "opacities", "colors"):
        assert np.array_equal(getattr(out, f), getattr(s, f))


def test_rendering_equivalent_is_seeded_and_validated(rng):
    s = random_scene(rng, 20)
    assert same_bytes(rendering_equivalent(s, 0.1, 9), rendering_equivalent(s, 0.1, 9))
    assert not same_bytes(rendering_equivalent(s, 0.1, 9), rendering_equivalent(s, 0.1, 10))
    for bad in (-0.1, 0.6):
        with pytest.raises(ConfigError):
            rendering_equivalent(s, bad)


def test_rendering_equivalent_keeps_psnr(tabletop):
    scene, cams, ref = tabletop
    aug = rendering_equivalent(scene, 0.1, 1)
    assert min(psnr(a, render(aug, c).color_image) for a, c in zip(ref, cams)) >= 30.0


def test_rendering_equivalent_error_grows_with_epsilon(tabletop):
    scene, cams, ref = tabletop
    errs = []
    for eps in (0.0, 0.05, 0.1, 0.2):
        aug = rendering_equivalent(scene, eps, 2)
        errs.append(np.mean([np.abs(a - render(aug, c).color_image).mean() for a, c in zip(ref, cams)]))
    assert errs[-1] <= 0.05
    assert all(b >= a for a, b in zip(errs, errs[1:]))


def test_immature_small_gamma_limit(rng):
    s = random_scene(rng, 40)
    out = immature_manifold(s, 1e-12, 1.0, 0)
    for f in FIELDS:
        np.testing.assert_allclose(getattr(out, f), getattr(s, f), atol=1e-9)


def test_immature_full_inflation(rng):
    s = random_scene(rng, 40)
    out = immature_manifold(s, 1.0, 1.0, 5)
    assert np.all(out.scales > s.scales)
    assert np.all(out.opacities < s.opacities)
    assert np.all((out.opacities >= 0) & (out.opacities <= 1))


def test_immature_subset_size_and_tempering(rng):
    s = random_scene(rng, 100)
    out = immature_manifold(s, 0.5, 0.3, 6)
    changed = np.any(out.scales != s.scales, axis=1)
    assert changed.sum() == 30
    ratio = out.scales[changed] / s.scales[changed]
    assert np.all((ratio > 1) & (ratio <= 1.5))
    np.testing.assert_allclose(out.opacities[changed], s.opacities[changed] / ratio.mean(axis=1))
    assert np.array_equal(out.opacities[~changed], s.opacities[~changed])
    raw = immature_manifold(s, 0.5, 0.3, 6, temper_opacity=False)
    assert np.array_equal(raw.opacities, s.opacities)


def test_immature_parameter_checks(rng):
    s = random_scene(rng, 5)
    for gamma, rho in ((0.0, 0.5), (-1.0, 0.5), (0.5, 0.0), (0.5, 1.5)):
        with pytest.raises(ConfigError):
            immature_manifold(s, gamma, rho)


def test_immature_blurs_renders(tabletop):
    scene, cams, ref = tabletop
    aug = immature_manifold(scene, 0.5, 0.5, 1)
    for a, c in zip(ref, cams):
        assert laplacian_energy(render(aug, c).color_image) < laplacian_energy(a)


def test_augmentations_preserve_count_and_labels(rng):
    s = random_scene(rng, 25)
    for out in (rendering_equivalent(s, 0.3, 0), immature_manifold(s, 0.4, 0.5, 0),
                rigid_transform(s, 0.7, (1, 2, 3)), point_jitter(s, 0.01, 0)):
        assert len(out) == 25
        assert np.array_equal(out.semantic_labels, s.semantic_labels)
        assert np.array_equal(out.instance_labels, s.instance_labels)


def test_rigid_identity_and_translation(rng):
    s = random_scene(rng, 20)
    same = rigid_transform(s)
    for f in FIELDS:
        np.testing.assert_allclose(getattr(same, f), getattr(s, f), atol=1e-15)
    moved = rigid_transform(s, 0.0, (1, 0, 0))
    np.testing.assert_allclose(moved.centers - s.centers, np.tile([1.0, 0, 0], (20, 1)), atol=1e-15)


@pytest.mark.parametrize("yaw", [np.pi / 2, 0.83])
def test_rigid_render_equivalence(yaw, rng):
    s = random_scene(rng, 120, spread=0.7)
    cam = Camera(64, 64, 60.0, 60.0, 32.0, 32.0)
    moved = rigid_transform(s, yaw, (0.3, -1.0, 0.5))
    cam2 = transform_camera(cam, yaw, (0.3, -1.0, 0.5))
    np.testing.assert_allclose(render(moved, cam2).color_image, render(s, cam).color_image, atol=1e-6)


def test_rigid_rotates_normals():
    s = GaussianScene([[1.0, 0, 0]], [[0.1] * 3], [[1.0, 0, 0, 0]], [0.5], [[1, 1, 1]], normals=[[1.0, 0, 0]])
    out = rigid_transform(s, np.pi / 2)
    np.testing.assert_allclose(out.centers[0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(out.normals[0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(quat_to_rotmat(out.rotations[0]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_metric_helpers():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert laplacian_energy(np.full((5, 5), 0.3)) == 0.0
    spike = np.zeros((5, 5))
    spike[2, 2] = 1.0
    assert laplacian_energy(spike) == pytest.approx(16 + 4)
