import numpy as np
import pytest

from oracles import brute_force_uplift, random_scene
from splatdistill import phis, raster
from splatdistill.errors import ConfigError
from splatdistill.scene import Camera, GaussianScene, TeacherFeatureMap
from splatdistill.synth import (
    isolated_layout, object_rig, orbit_cameras, prototypes, synth_scene, synth_teacher, tabletop_layout,
)
from splatdistill.uplift import (
    UpliftSums, accumulate, finalize, load_targets, resize_bilinear, save_targets, uplift_all,
)

Q = [1.0, 0, 0, 0]


def point_scene(opacity):
    return GaussianScene([[0, 0, 2.0]], [[1e-4] * 3], [Q], [opacity], [[1, 1, 1]])


def one_pixel_view(value):
    cam = Camera(1, 1, 30.0, 30.0, 0.0, 0.0)
    return cam, TeacherFeatureMap("lang", np.reshape(value, (1, 1, -1)))


def test_single_pixel_accumulation():
    v = np.array([1.0, -2.0, 3.0])
    sums = accumulate(point_scene(0.7), [one_pixel_view(v)])
    np.testing.assert_allclose(sums.numerator[0], 0.7 * v)
    assert sums.denominator[0] == pytest.approx(0.7)


def test_two_views_are_additive():
    v1, v2 = np.array([1.0, 0.0]), np.array([0.0, 4.0])
    sums = accumulate(point_scene(0.5), [one_pixel_view(v1), one_pixel_view(v2)])
    np.testing.assert_allclose(sums.numerator[0], 0.5 * (v1 + v2))
    assert sums.denominator[0] == pytest.approx(1.0)


def test_finalize_weighted_average_and_masking():
    f1, f2 = np.array([1.0, 2.0]), np.array([-3.0, 5.0])
    sums = UpliftSums("dino", np.array([0.6 * f1 + 0.2 * f2, [0, 0]]), np.array([0.8, 0.0]))
    t = finalize(sums, tau_w=0.05)
    np.testing.assert_allclose(t.features[0], 0.75 * f1 + 0.25 * f2, atol=1e-12)
    assert list(t.mask) == [True, False]
    assert not t.features[1].any()


@pytest.mark.parametrize("seed", range(10))
def test_matches_triple_loop_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    scene = random_scene(rng, 10, spread=0.4)
    views = []
    for k in range(3):
        cam = Camera(16, 16, 20.0, 20.0, 8.0 + k, 7.5)
        views.append((cam, TeacherFeatureMap("pe", rng.normal(size=(16, 16, 3)))))
    sums = accumulate(scene, views)
    num, den = brute_force_uplift(scene, views)
    np.testing.assert_allclose(sums.numerator, num, atol=1e-6)
    np.testing.assert_allclose(sums.denominator, den, atol=1e-6)


def test_convex_hull_and_view_order_invariance(rng):
    scene = random_scene(rng, 60, spread=0.6)
    views = [(Camera(24, 24, 30.0, 30.0, 12.0 + k, 12.0), TeacherFeatureMap("lang", rng.normal(size=(24, 24, 4))))
             for k in range(4)]
    t = finalize(accumulate(scene, views), 1e-3)
    lo = np.min([v[1].data.min(axis=(0, 1)) for v in views], axis=0)
    hi = np.max([v[1].data.max(axis=(0, 1)) for v in views], axis=0)
    rows = t.features[t.mask]
    assert np.all(rows >= lo - 1e-12) and np.all(rows <= hi + 1e-12)

    t_rev = finalize(accumulate(scene, views[::-1]), 1e-3)
    assert np.abs(t.features - t_rev.features).max() < 1e-9


def test_convexity_per_gaussian_contributors(rng):
    scene = random_scene(rng, 30, spread=0.5)
    cam = Camera(20, 20, 25.0, 25.0, 10.0, 10.0)
    fmap = TeacherFeatureMap("dino", rng.normal(size=(20, 20, 2)))
    w = raster.rasterize(scene, cam)
    t = finalize(accumulate(scene, [(cam, fmap)], weights=[w]), 1e-6)
    mat = w.matrix().tocsc()
    feats = fmap.data.reshape(-1, 2)
    for i in np.flatnonzero(t.mask):
        pix = mat[:, i].nonzero()[0]
        assert np.all(t.features[i] >= feats[pix].min(0) - 1e-12)
        assert np.all(t.features[i] <= feats[pix].max(0) + 1e-12)


def test_prototype_recovery_isolated_objects():
    layout = isolated_layout()
    scene = synth_scene(layout, 5)
    cams = [c for p in layout["primitives"] for c in object_rig(p["center"], 10, 48, 48)]
    maps = [synth_teacher(scene, c, "lang", 16, 0.0, 11) for c in cams]
    t = finalize(accumulate(scene, zip(cams, maps)))
    assert t.mask.all()
    proto = prototypes("lang", 5, 16, 11)[scene.semantic_labels]
    cos = np.sum(t.features * proto, 1) / np.linalg.norm(t.features, axis=1)
    assert cos.min() >= 0.999


def test_prototype_recovery_with_occlusion_boundaries():
    # Silhouette Gaussians mix neighbouring classes; the bulk still recovers its prototype.
    scene = synth_scene(tabletop_layout(0, count_scale=0.5), 3)
    cams = orbit_cameras(scene, 8, 64, 48) + orbit_cameras(scene, 4, 64, 48, height_above=3.5, phase=0.4)
    maps = [synth_teacher(scene, c, "lang", 16, 0.0, 11) for c in cams]
    t = finalize(accumulate(scene, zip(cams, maps)))
    proto = prototypes("lang", 6, 16, 11)[scene.semantic_labels]
    f = t.features[t.mask]
    cos = np.sum(f * proto[t.mask], 1) / np.linalg.norm(f, axis=1)
    assert t.mask.mean() > 0.9
    assert np.median(cos) > 0.9
    assert np.mean(cos >= 0.7) > 0.85
    table = prototypes("lang", 6, 16, 11)
    nearest = np.argmax(f @ table.T, axis=1)
    assert np.mean(nearest == scene.semantic_labels[t.mask]) > 0.85


def test_bilinear_resize():
    data = np.arange(12.0).reshape(2, 3, 2)
    np.testing.assert_array_equal(resize_bilinear(data, 2, 3), data)
    up = resize_bilinear(np.ones((3, 4, 1)) * 2.5, 12, 16)
    np.testing.assert_allclose(up, 2.5)
    ramp = np.arange(4.0).reshape(1, 4, 1)
    up = resize_bilinear(ramp, 1, 8)[0, :, 0]
    np.testing.assert_allclose(up, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])


def test_uplift_all_reuses_one_pass_per_view(rng):
    scene = random_scene(rng, 40)
    cams = [Camera(20, 20, 25.0, 25.0, 10.0, 10.0), Camera(20, 20, 25.0, 25.0, 9.0, 11.0)]
    teachers = {tid: [TeacherFeatureMap(tid, rng.normal(size=(20, 20, d))) for _ in cams]
                for tid, d in (("lang", 16), ("dino", 32), ("pe", 8))}
    before = raster.RENDER_STATS["passes"]
    out = uplift_all(scene, cams, teachers, 0.01)
    assert raster.RENDER_STATS["passes"] - before == len(cams)
    assert {k: v.dim for k, v in out.items()} == {"lang": 16, "dino": 32, "pe": 8}


def test_uplift_all_zero_views(rng):
    scene = random_scene(rng, 10)
    out = uplift_all(scene, [], {"lang": []})
    assert not out["lang"].mask.any()


def test_teacher_mismatch_rejected(rng):
    cam = Camera(8, 8, 10.0, 10.0, 4.0, 4.0)
    views = [(cam, TeacherFeatureMap("lang", np.zeros((8, 8, 2)))),
             (cam, TeacherFeatureMap("dino", np.zeros((8, 8, 2))))]
    with pytest.raises(ConfigError):
        accumulate(random_scene(rng, 5), views)


def test_standardization_order_commutes_on_retained_rows(rng):
    scene = random_scene(rng, 50, spread=0.5)
    cams = [Camera(24, 24, 30.0, 30.0, 12.0, 12.0), Camera(24, 24, 30.0, 30.0, 11.0, 13.0)]
    maps = [TeacherFeatureMap("lang", rng.normal(size=(24, 24, 3)) + 2) for _ in cams]
    t = phis.fit(np.concatenate([m.data.reshape(-1, 3) for m in maps]))
    a = uplift_all(scene, cams, {"lang": maps}, 0.01, transforms={"lang": t})["lang"]
    b = uplift_all(scene, cams, {"lang": maps}, 0.01, transforms={"lang": t},
                   standardize_first=False)["lang"]
    assert np.array_equal(a.mask, b.mask)
    np.testing.assert_allclose(a.features, b.features, atol=1e-9)


def test_chuf_roundtrip(tmp_path, rng):
    scene = random_scene(rng, 30)
    cam = Camera(20, 20, 25.0, 25.0, 10.0, 10.0)
    t = uplift_all(scene, [cam], {"pe": [TeacherFeatureMap("pe", rng.normal(size=(20, 20, 5)))]})["pe"]
    n = save_targets(t, tmp_path / "t.chuf")
    assert n == 17 + 30 * 5 * 4 + 30 * 4 + 30
    back = load_targets(tmp_path / "t.chuf")
    assert back.teacher_id == "pe"
    np.testing.assert_allclose(back.features, t.features, rtol=1e-6, atol=1e-6)
    assert np.array_equal(back.mask, t.mask)
