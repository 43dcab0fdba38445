"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints (see conftest.py).
The heavier criteria drive the real CLI on configs/acceptance.yaml in a temporary workdir.
"""

import contextlib
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_render, brute_force_uplift, random_scene
from splatdistill import phis
from splatdistill.augment import immature_manifold, laplacian_energy, psnr, rendering_equivalent
from splatdistill.cli import main
from splatdistill.config import load_config
from splatdistill.distill import DistillModel, EncoderConfig, TeacherSchedule, TeacherSpec
from splatdistill.distill.train import OptimConfig, pretrain
from splatdistill.eval import zero_shot_segment
from splatdistill.gradcheck import run_all
from splatdistill.pipeline import DEFAULT_TEACHERS, build_dataset
from splatdistill.raster import render
from splatdistill.scene import Camera, TeacherFeatureMap
from splatdistill.synth import (isolated_layout, object_rig, orbit_cameras, prototypes, synth_scene,
                                synth_teacher, tabletop_layout, two_room_layout)
from splatdistill.uplift import accumulate, finalize
from splatdistill.viewplan import PlanConfig, coverage, plan_views, save_plan

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "acceptance.yaml"


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def cli(workdir, *argv):
    buf = io.StringIO()
    start = time.perf_counter()
    with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(io.StringIO()):
        code = main([argv[0], "--config", str(CONFIG), "--workdir", str(workdir), "--threads", "1",
                     *map(str, argv[1:])])
    out = json.loads(buf.getvalue().strip().splitlines()[-1])
    assert code == 0, out
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Full acceptance pipeline; returns (workdir, summaries, wall seconds)."""
    wd = tmp_path_factory.mktemp("acceptance")
    steps = [("synth",), ("fit-phis",), ("uplift",), ("plan-views",), ("pretrain",), ("eval-zeroshot",),
             ("adapt",), ("report",),
             ("pretrain", "--set", "encoder.input_mode=pc_variant", "--output", wd / "pc.chmd"),
             ("retrieval", "--model", wd / "pc.chmd")]
    summaries, seconds = {}, {}
    for argv in steps:
        key = argv[0] if "--output" not in argv else "pretrain_pc"
        summaries[key], seconds[key] = cli(wd, *argv)
    return wd, summaries, seconds


def test_criterion_01_rasterizer_matches_brute_force():
    cam = Camera(64, 64, 60.0, 60.0, 32.0, 32.0)
    worst_img = worst_w = worst_sum = 0.0
    tiled_seconds = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, int(rng.integers(1, 257)))
        start = time.perf_counter()
        out = render(scene, cam)
        tiled_seconds += time.perf_counter() - start
        ref_img, ref_w, _ = brute_force_render(scene, cam)
        worst_img = max(worst_img, np.abs(out.color_image - ref_img).max())
        worst_w = max(worst_w, np.abs(out.weights.matrix().toarray() - ref_w).max())
        worst_sum = max(worst_sum, np.abs(out.weights.total() + out.weights.residual - 1.0).max())
    ok = max(worst_img, worst_w, worst_sum) <= 1e-6 and tiled_seconds < 30
    verdict(1, ok, f"max|img|={worst_img:.1e} max|w|={worst_w:.1e} max|sum-1|={worst_sum:.1e} "
                   f"tiled {tiled_seconds:.1f}s")


def test_criterion_02_gradient_suite():
    results, seconds = run_all(0)
    worst = max(results, key=lambda r: r.error / r.tolerance)
    ok = all(r.passed for r in results) and seconds < 60
    verdict(2, ok, f"{len(results)} checks, worst {worst.name} {worst.error:.1e} (tol {worst.tolerance:.0e}), "
                   f"{seconds:.1f}s")


def test_criterion_03_uplift():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        scene = random_scene(rng, 10, spread=0.4)
        views = [(Camera(16, 16, 20.0, 20.0, 8.0 + k, 7.5), TeacherFeatureMap("pe", rng.normal(size=(16, 16, 3))))
                 for k in range(3)]
        sums = accumulate(scene, views)
        num, den = brute_force_uplift(scene, views)
        worst = max(worst, np.abs(sums.numerator - num).max(), np.abs(sums.denominator - den).max())
    layout = isolated_layout()
    scene = synth_scene(layout, 5)
    cams = [c for p in layout["primitives"] for c in object_rig(p["center"], 10, 48, 48)]
    t = finalize(accumulate(scene, zip(cams, (synth_teacher(scene, c, "lang", 16, 0.0, 11) for c in cams))))
    proto = prototypes("lang", 5, 16, 11)[scene.semantic_labels]
    cos = np.sum(t.features * proto, 1) / np.linalg.norm(t.features, axis=1)
    ok = worst <= 1e-6 and t.mask.all() and cos.min() >= 0.999
    verdict(3, ok, f"oracle max err {worst:.1e}; {t.mask.sum()} Gaussians retained, min cosine {cos.min():.6f}")


def test_criterion_04_phis():
    worst_spread = worst_mean = worst_orth = worst_trip = 0.0
    for k in range(20):
        d = (2, 3, 8, 16, 33)[k % 5]
        rng = np.random.default_rng(k)
        x = rng.normal(size=(4 * d + 60, d)) @ rng.normal(size=(d, d)) * rng.uniform(0.1, 10) + rng.normal(size=d)
        t = phis.fit(x)
        v = t.apply(x).var(axis=0, ddof=1)  # same estimator the fit uses
        worst_spread = max(worst_spread, np.ptp(v))
        worst_mean = max(worst_mean, abs(v.mean() - 1.0))
        worst_orth = max(worst_orth, np.abs(t.rotation.T @ t.rotation - np.eye(t.output_dim)).max())
        worst_trip = max(worst_trip, np.abs(t.invert(t.apply(x)) - x).max())
    ok = worst_spread <= 1e-4 and worst_mean <= 1e-4 and worst_orth <= 1e-6 and worst_trip <= 1e-6
    verdict(4, ok, f"variance spread {worst_spread:.1e}, |mean-1| {worst_mean:.1e}, "
                   f"orthogonality {worst_orth:.1e}, round trip {worst_trip:.1e}")


def test_criterion_05_pretraining(run):
    _, s, sec = run
    p, z = s["pretrain"], s["eval-zeroshot"]
    train = {n: z["scenes"][n]["mIoU"] for n in ("train0", "train1")}
    ok = p["steps"] == 200 and p["ratio"] <= 0.1 and min(train.values()) >= 0.95 and sec["pretrain"] < 300
    verdict(5, ok, f"{p['steps']} steps, loss {p['initial_loss']:.3f} -> {p['final_loss']:.3f} "
                   f"(ratio {p['ratio']:.4f}), zero-shot mIoU {train}, pretrain {sec['pretrain']:.0f}s")


def test_criterion_06_staged_teacher():
    scenes = [synth_scene(tabletop_layout(v), v) for v in (0, 1)]
    held = synth_scene(tabletop_layout(2), 2)
    samples, tf = build_dataset(scenes)
    dims = {t.teacher_id: tf[t.teacher_id].output_dim for t in DEFAULT_TEACHERS}
    protos = prototypes("lang", 6, 16, 0)
    epochs = 100
    deltas = []
    for seed in range(5):
        miou = []
        for start in (epochs // 2, 0):
            model = DistillModel(EncoderConfig(), dims, seed=seed)
            model.fit_input_stats(scenes)
            sched = TeacherSchedule({"lang": TeacherSpec(), "dino": TeacherSpec(), "pe": TeacherSpec(start_epoch=start)})
            model, _ = pretrain(model, samples, sched, epochs, OptimConfig(lr=3e-3), seed=seed)
            miou.append(np.mean([zero_shot_segment(model, sc, protos, tf["lang"]).metrics["mIoU"]
                                 for sc in scenes + [held]]))
        deltas.append(miou[0] - miou[1])
    wins = sum(d >= 0 for d in deltas)
    verdict(6, wins >= 3, f"staged minus from-start mIoU per seed: {', '.join(f'{d:+.4f}' for d in deltas)} "
                          f"({wins}/5 seeds staged >=)")


def test_criterion_07_adaptation(run):
    _, s, sec = run
    a = s["adapt"]
    ok = (a["steps"] == 300 and a["ratio"] <= 0.2 and a["lang_cosine_after"] >= 0.9 and sec["adapt"] < 300)
    verdict(7, ok, f"{a['steps']} steps, smoothed loss ratio {a['ratio']:.3f}, lang cosine "
                   f"{a['lang_cosine_before']:.3f} -> {a['lang_cosine_after']:.3f}, {sec['adapt']:.0f}s")


def test_criterion_08_augmentation():
    cfg = load_config(CONFIG)
    v = cfg["views"]
    scene = synth_scene(tabletop_layout(0), 0)
    cams = orbit_cameras(scene, 4, v["width"], v["height"], fov_x_deg=v["fov_x_deg"], phase=0.3)
    ref = [render(scene, c).color_image for c in cams]
    eq = rendering_equivalent(scene, 0.1, 1)
    im = immature_manifold(scene, 0.5, seed=1)
    worst_psnr = min(psnr(r, render(eq, c).color_image) for r, c in zip(ref, cams))
    ratios = [laplacian_energy(render(im, c).color_image) / laplacian_energy(r) for r, c in zip(ref, cams)]
    ok = worst_psnr >= 30 and max(ratios) < 1
    verdict(8, ok, f"min PSNR {worst_psnr:.1f} dB; Laplacian energy ratios {', '.join(f'{r:.3f}' for r in ratios)}")


def test_criterion_09_view_planner(tmp_path):
    scene = synth_scene(two_room_layout(), 0)
    cfg = PlanConfig()
    plan = plan_views(scene, cfg)
    save_plan(plan, tmp_path / "a.plan")
    save_plan(plan_views(scene, cfg), tmp_path / "b.plan")
    same = (tmp_path / "a.plan").read_bytes() == (tmp_path / "b.plan").read_bytes()
    low = min(p.overlap for p in plan.pairs)
    cov = coverage(plan, len(scene))
    ok = cov == 1.0 and low >= cfg.min_overlap and same and plan.pairs
    verdict(9, ok, f"coverage {cov:.3f} of {len(scene)} Gaussians, {len(plan.candidates)} views, "
                   f"{len(plan.pairs)} pairs, min overlap {low:.3f}, bitwise deterministic {same}")


def test_criterion_10_resource_accounting(run):
    wd, s, _ = run
    cfg = load_config(CONFIG)
    v = cfg["views"]
    n_scenes = len(cfg["scenes"]["train"]) + len(cfg["scenes"]["heldout"])
    expected = n_scenes * v["n_views"] * v["height"] * v["width"] * sum(t["dim"] for t in cfg["teachers"]) * 4
    adapt_log = json.loads((wd / "resources" / "adapt.json").read_text())
    rows = (wd / "resources" / "report.csv").read_text().splitlines()
    ok = (s["uplift"]["precomputed_feature_bytes"] == expected and adapt_log["precomputed_feature_bytes"] == 0
          and adapt_log["raster_seconds_per_view"] > 0 and [r.split(",")[0] for r in rows[1:]] == ["uplift", "adapt"])
    verdict(10, ok, f"uplift {s['uplift']['precomputed_feature_bytes']} bytes (expected {expected}), adapt 0 bytes, "
                    f"{adapt_log['raster_seconds_per_view'] * 1000:.1f} ms/view raster")


def test_criterion_11_retrieval(run):
    _, s, _ = run
    r = s["retrieval"]
    clean = min(v["clean"] for v in r["R@1"].values())
    noisy = min(v["perturbed"] for v in r["R@1"].values())
    ok = r["input_mode"] == "pc_variant" and clean == 1.0 and noisy >= 0.8
    verdict(11, ok, f"pc_variant R@1 min over scenes: clean {clean:.3f}, sigma=0.02*extent {noisy:.3f}")
