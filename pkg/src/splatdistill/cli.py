"""Command-line front end. Every subcommand prints exactly one JSON summary line on stdout.

Artifacts live under the configured ``workdir``::

    scenes/<name>.ply                 synthesized scenes (with labels)
    teachers/<name>/cameras.json      teacher views
    teachers/<name>/<tid>_<k>.chfm    teacher feature maps
    teachers/meta.json                label-space sizes shared by all scenes
    phis/<tid>.chps                   standardization per teacher
    targets/<name>/<tid>.chuf         uplifted per-Gaussian targets
    plans/<name>.plan                 view plans
    model.chmd, loss_history.csv      pretraining output
    adapted.chmd, adapt_losses.csv    adaptation output
    resources/<command>.json          resource logs (timings live only here)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import augment, phis
from .config import load_config
from .distill.losses import LossWeights, TeacherSchedule, TeacherSpec
from .distill.model import DistillModel, EncoderConfig, load_checkpoint, save_checkpoint
from .distill.train import AdaptConfig, AugmentConfig, OptimConfig, Sample, adapt, pretrain
from .errors import AcceptanceFailure, ConfigError, FormatError, SplatDistillError, UsageError
from .eval import (instance_retrieval, linear_probe, metrics_csv, metrics_table, pca_visualize,
                   zero_shot_segment)
from .pipeline import TeacherDef, teacher_maps
from .raster import RasterConfig, rasterize, render, write_ppm
from .scene import Camera, GaussianScene, load_chfm, load_ply, save_chfm, save_ply
from .synth import isolated_layout, orbit_cameras, prototypes, synth_scene, tabletop_layout, two_room_layout
from .uplift import UpliftReport, load_targets, save_targets, uplift_all
from .viewplan import PlanConfig, coverage, load_plan, plan_views, save_plan

log = logging.getLogger("splatdistill")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# workspace helpers


class Workspace:
    def __init__(self, cfg: dict, threads: int = 1):
        self.cfg = cfg
        self.root = Path(cfg["workdir"])
        r = cfg["raster"]
        self.raster = RasterConfig(near=r["near"], guard_band=r["guard_band"], tile_size=r["tile_size"],
                                   threads=threads)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise ConfigError(f"missing input {p}; run the earlier pipeline step first")
        return p

    # scenes -------------------------------------------------------------
    def scene_specs(self, which: str = "all") -> list[dict]:
        sc = self.cfg["scenes"]
        if which == "train":
            return list(sc["train"])
        if which == "heldout":
            return list(sc["heldout"])
        return list(sc["train"]) + list(sc["heldout"])

    def spec(self, name: str) -> dict:
        for s in self.scene_specs():
            if s["name"] == name:
                return s
        raise ConfigError(f"no scene named {name!r} in the config")

    def layout(self, spec: dict) -> dict:
        scale = spec.get("count_scale", self.cfg["scenes"]["count_scale"])
        kind = spec["layout"]
        if kind == "tabletop":
            return tabletop_layout(spec.get("variant", 0), scale, spec.get("palette_shift", 0.0))
        if kind == "two_room":
            return two_room_layout(scale)
        return isolated_layout(max(8, int(round(200 * scale))))

    def scene(self, name: str) -> GaussianScene:
        return load_ply(self.need("scenes", f"{name}.ply"))

    # teachers -----------------------------------------------------------
    def teacher_defs(self) -> list[TeacherDef]:
        return [TeacherDef(t["id"], t["dim"], t.get("labels", "semantic"), t.get("noise", 0.0), t.get("seed", 0))
                for t in self.cfg["teachers"]]

    def schedule(self) -> TeacherSchedule:
        return TeacherSchedule({t["id"]: TeacherSpec(t.get("weight", 1.0), t.get("contrastive_weight", 0.02),
                                                     t.get("start_epoch", 0)) for t in self.cfg["teachers"]})

    def n_labels(self) -> dict:
        meta = json.loads(self.need("teachers", "meta.json").read_text())
        return {t.teacher_id: meta["n_labels"][t.label_source] for t in self.teacher_defs()}

    def cameras(self, name: str) -> list[Camera]:
        raw = json.loads(self.need("teachers", name, "cameras.json").read_text())
        return [Camera(c["width"], c["height"], c["fx"], c["fy"], c["cx"], c["cy"],
                       np.array(c["rotation"]).reshape(3, 3), np.array(c["translation"])) for c in raw]

    def maps(self, name: str, tid: str, n: int):
        return [load_chfm(self.need("teachers", name, f"{tid}_{k:03d}.chfm"), tid) for k in range(n)]

    def transforms(self) -> dict:
        return {t.teacher_id: phis.load(self.need("phis", f"{t.teacher_id}.chps")) for t in self.teacher_defs()}

    def targets(self, name: str) -> dict:
        return {t.teacher_id: load_targets(self.need("targets", name, f"{t.teacher_id}.chuf"))
                for t in self.teacher_defs()}

    # model --------------------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        e = self.cfg["encoder"]
        return EncoderConfig(e["input_mode"], tuple(e["hidden_widths"]), e["out_dim"], e["neighborhood_k"],
                             e["estimate_normals"])

    def model(self, path=None) -> DistillModel:
        return load_checkpoint(Path(path) if path else self.need("model.chmd"))

    def loss_weights(self) -> LossWeights:
        lw = self.cfg["loss"]
        return LossWeights(lw["cosine"], lw["smooth_l1"], lw["smooth_l1_beta"], lw["temperature"])

    def resources(self, command: str, record: dict) -> Path:
        p = self.path("resources", f"{command}.json")
        p.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        return p


def _camera_json(c: Camera) -> dict:
    return {"width": c.width, "height": c.height, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "rotation": [float(v) for v in c.rotation.ravel()], "translation": [float(v) for v in c.translation]}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ws: Workspace, args) -> dict:
    v = ws.cfg["views"]
    scenes = {}
    for spec in ws.scene_specs():
        s = synth_scene(ws.layout(spec), spec.get("seed", spec.get("variant", 0)))
        save_ply(s, ws.path("scenes", f"{spec['name']}.ply"))
        scenes[spec["name"]] = s
    n_labels = {"semantic": max(int(s.semantic_labels.max()) for s in scenes.values()) + 1,
                "instance": max(int(s.instance_labels.max()) for s in scenes.values()) + 1}
    ws.path("teachers", "meta.json").write_text(json.dumps({"n_labels": n_labels}, sort_keys=True) + "\n")
    counts = {t.teacher_id: n_labels[t.label_source] for t in ws.teacher_defs()}
    written = 0
    for name, s in scenes.items():
        cams = orbit_cameras(s, v["n_views"], v["width"], v["height"], fov_x_deg=v["fov_x_deg"])
        ws.path("teachers", name, "cameras.json").write_text(json.dumps([_camera_json(c) for c in cams]) + "\n")
        for tid, maps in teacher_maps(s, cams, ws.teacher_defs(), counts, ws.raster).items():
            for k, m in enumerate(maps):
                written += save_chfm(m, ws.path("teachers", name, f"{tid}_{k:03d}.chfm"))
    return {"scenes": {n: len(s) for n, s in scenes.items()}, "views_per_scene": v["n_views"],
            "teacher_bytes": written, "n_labels": n_labels}


def cmd_fit_phis(ws: Workspace, args) -> dict:
    from .pipeline import fit_transforms

    pooled = {}
    for spec in ws.scene_specs("train"):
        n = len(ws.cameras(spec["name"]))
        for t in ws.teacher_defs():
            pooled.setdefault(t.teacher_id, []).extend(ws.maps(spec["name"], t.teacher_id, n))
    out = {}
    for tid, tf in fit_transforms(pooled, seed=ws.cfg["seed"]).items():
        phis.save(tf, ws.path("phis", f"{tid}.chps"))
        out[tid] = {"dim": tf.input_dim, "padded_dim": tf.output_dim, "scale": tf.scale}
    return {"transforms": out}


def cmd_uplift(ws: Workspace, args) -> dict:
    tfs = ws.transforms()
    u = ws.cfg["uplift"]
    report = UpliftReport()
    written, out = 0, {}
    start = time.perf_counter()
    for spec in ws.scene_specs():
        name = spec["name"]
        scene, cams = ws.scene(name), ws.cameras(name)
        maps = {t.teacher_id: ws.maps(name, t.teacher_id, len(cams)) for t in ws.teacher_defs()}
        targets = uplift_all(scene, cams, maps, u["tau_w"], ws.raster, tfs, u["standardize_first"], report)
        for tid, tg in targets.items():
            written += save_targets(tg, ws.path("targets", name, f"{tid}.chuf"))
        out[name] = {tid: float(tg.mask.mean()) for tid, tg in targets.items()}
    consumed = int(sum(report.feature_bytes.values()))
    ws.resources("uplift", {"command": "uplift", "precomputed_feature_bytes": consumed,
                            "target_bytes_written": written, "render_passes": report.render_passes,
                            "seconds": time.perf_counter() - start})
    return {"coverage": out, "precomputed_feature_bytes": consumed, "target_bytes_written": written}


def _plan_config(ws: Workspace) -> PlanConfig:
    p = ws.cfg["plan"]
    return PlanConfig(n_positions=p["n_positions"], eye_height=p["eye_height"], voxel=p["voxel"],
                      clearance=p["clearance"], d_min=p["d_min"], pitch_deg=p["pitch_deg"], width=p["width"],
                      height=p["height"], fov_x_deg=p["fov_x_deg"], min_overlap=p["min_overlap"],
                      max_pairs_per_view=p["max_pairs_per_view"], group_size=ws.cfg["adapt"]["group_size"],
                      seed=ws.cfg["seed"])


def cmd_plan_views(ws: Workspace, args) -> dict:
    names = [args.scene] if args.scene else [s["name"] for s in ws.scene_specs("heldout")]
    out = {}
    for name in names:
        scene = ws.scene(name)
        plan = plan_views(scene, _plan_config(ws), ws.raster)
        save_plan(plan, ws.path("plans", f"{name}.plan"))
        out[name] = {"views": len(plan.candidates), "pairs": len(plan.pairs),
                     "groups": len(plan.groups(ws.cfg["adapt"]["group_size"])),
                     "coverage": coverage(plan, len(scene))}
    return {"plans": out}


def cmd_augment_preview(ws: Workspace, args) -> dict:
    name = args.scene or ws.scene_specs("train")[0]["name"]
    scene = ws.scene(name)
    cams = ws.cameras(name)[: args.views]
    eq = augment.rendering_equivalent(scene, args.epsilon, ws.cfg["seed"])
    imm = augment.immature_manifold(scene, args.gamma, ws.cfg["augment"]["rho"], ws.cfg["seed"])
    rows = []
    for k, cam in enumerate(cams):
        base = render(scene, cam, ws.raster).color_image
        a = render(eq, cam, ws.raster).color_image
        b = render(imm, cam, ws.raster).color_image
        for tag, img in (("original", base), ("equivalent", a), ("immature", b)):
            write_ppm(img, ws.path("augment", name, f"{tag}_{k:03d}.ppm"))
        rows.append({"view": k, "psnr_equivalent": augment.psnr(base, a),
                     "laplacian_original": augment.laplacian_energy(base),
                     "laplacian_immature": augment.laplacian_energy(b)})
    return {"scene": name, "epsilon": args.epsilon, "gamma": args.gamma, "views": rows,
            "min_psnr": min(r["psnr_equivalent"] for r in rows),
            "immature_smoother_everywhere": all(r["laplacian_immature"] < r["laplacian_original"] for r in rows)}


def cmd_pretrain(ws: Workspace, args) -> dict:
    names = [s["name"] for s in ws.scene_specs("train")]
    data = [Sample(ws.scene(n), ws.targets(n), n) for n in names]
    tfs = ws.transforms()
    dims = {t.teacher_id: tfs[t.teacher_id].output_dim for t in ws.teacher_defs()}
    model = DistillModel(ws.encoder_config(), dims, ws.cfg["encoder"]["head_hidden"], ws.cfg["seed"])
    model.fit_input_stats([d.scene for d in data])
    o, a = ws.cfg["optim"], ws.cfg["augment"]
    optim = OptimConfig(o["lr"], o["beta1"], o["beta2"], o["eps"], o["min_lr_fraction"])
    start = time.perf_counter()
    model, hist = pretrain(model, data, ws.schedule(), o["epochs"], optim, ws.loss_weights(),
                           AugmentConfig(a["epsilon"], a["gamma"], a["rho"], a["rigid"]), ws.cfg["seed"])
    out = Path(args.output) if args.output else ws.path("model.chmd")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    hist.to_csv(ws.path("loss_history.csv") if not args.output else out.with_name(out.stem + "_loss_history.csv"))
    ws.resources("pretrain", {"command": "pretrain", "seconds": time.perf_counter() - start})
    tot = hist.totals()
    return {"model": str(out), "epochs": o["epochs"], "steps": o["epochs"] * len(data),
            "parameters": model.n_parameters(), "initial_loss": float(tot[0]), "final_loss": float(tot[-1]),
            "ratio": float(tot[-1] / tot[0])}


def _teacher_for_adapt(ws: Workspace, scene: GaussianScene, maps_dir, n_views: int):
    if maps_dir:
        d = Path(maps_dir)
        return {t: [load_chfm(d / f"{t}_{k:03d}.chfm", t) for k in range(n_views)]
                for t in ws.cfg["adapt"]["teachers"]}
    counts = ws.n_labels()
    defs = [t for t in ws.teacher_defs() if t.teacher_id in ws.cfg["adapt"]["teachers"]]

    def oracle(view, camera):
        return {k: v[0] for k, v in teacher_maps(scene, [camera], defs, counts, ws.raster).items()}

    return oracle


def _mean_cosine(model: DistillModel, scene, targets, teacher="lang") -> float:
    tg = targets[teacher]
    p, f = model.predict(scene, teacher)[tg.mask], tg.features[tg.mask]
    return float(np.mean(np.sum(p * f, 1) / np.maximum(np.linalg.norm(p, axis=1) * np.linalg.norm(f, axis=1),
                                                       1e-12)))


def cmd_adapt(ws: Workspace, args) -> dict:
    name = args.scene or ws.scene_specs("heldout")[0]["name"]
    scene = ws.scene(name)
    plan = load_plan(ws.need("plans", f"{name}.plan"), scene, raster=ws.raster)
    model = ws.model(args.model)
    a = ws.cfg["adapt"]
    cfg = AdaptConfig(a["steps"], a["epochs"], a["lr"], a["omega_threshold"], a["feature_scale"], a["group_size"],
                      a["train_heads"])
    targets = None
    if (ws.root / "targets" / name / "lang.chuf").exists():
        targets = ws.targets(name)
    before = _mean_cosine(model, scene, targets) if targets else None
    teacher = _teacher_for_adapt(ws, scene, args.teacher_maps, len(plan.candidates))
    model, rep = adapt(model, scene, plan, teacher, ws.transforms(), cfg, a["teachers"], ws.loss_weights(),
                       raster=ws.raster)
    save_checkpoint(model, ws.path("adapted.chmd"))
    losses = np.array(rep.losses)
    ws.path("adapt_losses.csv").write_text("step,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(rep.losses)))
    ws.resources("adapt", {"command": "adapt", "precomputed_feature_bytes": rep.precomputed_feature_bytes,
                           "raster_seconds_per_view": rep.raster_seconds_per_view,
                           "views_rasterized": rep.views_rasterized})
    win = min(20, len(losses))
    out = {"scene": name, "steps": len(losses), "groups": len(rep.groups),
           "initial_loss": float(losses[:win].mean()), "final_loss": float(losses[-win:].mean()),
           "ratio": float(losses[-win:].mean() / losses[:win].mean()),
           "precomputed_feature_bytes": rep.precomputed_feature_bytes}
    if targets:
        out["lang_cosine_before"] = before
        out["lang_cosine_after"] = _mean_cosine(model, scene, targets)
    return out


def _zero_shot(ws: Workspace, model: DistillModel) -> dict:
    lang = next(t for t in ws.teacher_defs() if t.teacher_id == "lang")
    protos = prototypes("lang", ws.n_labels()["lang"], lang.dim, lang.seed)
    tf = ws.transforms()["lang"]
    bg = tuple(ws.cfg["eval"]["background_classes"])
    return {s["name"]: zero_shot_segment(model, ws.scene(s["name"]), protos, tf, background=bg).metrics
            for s in ws.scene_specs()}


def cmd_eval_zeroshot(ws: Workspace, args) -> dict:
    model = ws.model(args.model)
    rows = _zero_shot(ws, model)
    metrics_csv(rows, ws.path("metrics", "zeroshot.csv"))
    print(metrics_table(rows), file=sys.stderr)
    out = {n: {k: m[k] for k in ("mIoU", "mAcc", "f-mIoU", "f-mAcc")} for n, m in rows.items()}
    train = [s["name"] for s in ws.scene_specs("train")]
    summary = {"scenes": out, "train_mIoU": float(np.mean([rows[n]["mIoU"] for n in train]))}
    threshold = args.min_miou if args.min_miou is not None else ws.cfg["eval"]["min_miou"]
    if threshold is not None and summary["train_mIoU"] < threshold:
        raise AcceptanceFailure(f"train mIoU {summary['train_mIoU']:.4f} below {threshold}", summary)
    return summary


def cmd_probe_linear(ws: Workspace, args) -> dict:
    model = ws.model(args.model)
    train = [ws.scene(s["name"]) for s in ws.scene_specs("train")]
    held = [ws.scene(s["name"]) for s in ws.scene_specs("heldout")] or train
    n_classes = ws.n_labels()["lang"]
    bg = tuple(ws.cfg["eval"]["background_classes"])
    fresh = DistillModel(model.encoder, model.teacher_dims, model.head_hidden, model.seed + 1000)
    fresh.input_mean, fresh.input_std = model.input_mean, model.input_std
    rows = {"trained": linear_probe(model, train, n_classes, held, bg)[1],
            "random_init": linear_probe(fresh, train, n_classes, held, bg)[1]}
    metrics_csv(rows, ws.path("metrics", "probe.csv"))
    print(metrics_table(rows), file=sys.stderr)
    return {"trained_mIoU": rows["trained"]["mIoU"], "random_init_mIoU": rows["random_init"]["mIoU"],
            "gain": rows["trained"]["mIoU"] - rows["random_init"]["mIoU"]}


def cmd_pca(ws: Workspace, args) -> dict:
    model = ws.model(args.model)
    e = ws.cfg["eval"]
    out = {}
    for spec in ws.scene_specs():
        scene = ws.scene(spec["name"])
        cam = orbit_cameras(scene, 1, e["pca_width"], e["pca_height"], phase=0.6)[0]
        path = ws.path("pca", f"{spec['name']}.ppm")
        _, degenerate = pca_visualize(model.encode(scene), scene, cam, path, ws.raster)
        out[spec["name"]] = {"image": str(path), "rank_deficient": degenerate}
    return {"images": out}


def cmd_retrieval(ws: Workspace, args) -> dict:
    model = ws.model(args.model)
    frac = ws.cfg["eval"]["retrieval_sigma_fraction"]
    out = {}
    for spec in ws.scene_specs():
        scene = ws.scene(spec["name"])
        out[spec["name"]] = {"clean": instance_retrieval(model, scene, 0.0, ws.cfg["seed"]),
                             "perturbed": instance_retrieval(model, scene, frac * scene.extent, ws.cfg["seed"])}
    (ws.path("metrics", "retrieval.json")).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return {"input_mode": model.encoder.input_mode,
            "R@1": {n: {"clean": r["clean"]["R@1"], "perturbed": r["perturbed"]["R@1"]} for n, r in out.items()}}


def cmd_gradcheck(ws: Workspace, args) -> dict:
    from .gradcheck import run_all

    results, seconds = run_all(ws.cfg["seed"])
    log.info("gradient suite took %.2f s", seconds)
    summary = {"checks": {r.name: {"error": r.error, "tolerance": r.tolerance, "passed": r.passed} for r in results},
               "passed": all(r.passed for r in results)}
    if not summary["passed"]:
        raise AcceptanceFailure("gradient check failed", summary)
    return summary


def cmd_render(ws: Workspace, args) -> dict:
    names = [args.scene] if args.scene else [s["name"] for s in ws.scene_specs()]
    out, timing = {}, {}
    for name in names:
        scene = ws.scene(name)
        stats = []
        start = time.perf_counter()
        for k, cam in enumerate(ws.cameras(name)):
            r = render(scene, cam, ws.raster)
            write_ppm(r.color_image, ws.path("render", name, f"view_{k:03d}.ppm"))
            alpha = r.weights.total()
            stats.append({"view": k, "records": int(r.weights.weights.size), "visible": int(r.visible_set.size),
                          "mean_alpha": float(alpha.mean()), "covered_fraction": float((alpha >= 0.5).mean())})
        timing[name] = (time.perf_counter() - start) / max(1, len(stats))
        out[name] = stats
    ws.path("render", "stats.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    ws.resources("render", {"command": "render", "seconds_per_view": timing})
    return {"views": {n: len(v) for n, v in out.items()},
            "mean_alpha": {n: float(np.mean([s["mean_alpha"] for s in v])) for n, v in out.items()}}


def resource_rows(ws: Workspace) -> list[dict]:
    """One row per workflow: precomputed features (uplift) against render-and-distill (adapt)."""
    rows = []
    for cmd in ("uplift", "adapt"):
        p = ws.root / "resources" / f"{cmd}.json"
        if p.exists():
            r = json.loads(p.read_text())
            rows.append({"workflow": cmd, "precomputed_feature_bytes": r.get("precomputed_feature_bytes", 0),
                         "raster_seconds_per_view": r.get("raster_seconds_per_view")})
    return rows


def cmd_report(ws: Workspace, args) -> dict:
    rows = resource_rows(ws)
    if not rows:
        raise ConfigError("no resource logs found; run uplift and/or adapt first")
    lines = ["workflow,precomputed_feature_bytes,raster_seconds_per_view"]
    for r in rows:
        t = r["raster_seconds_per_view"]
        lines.append(f"{r['workflow']},{r['precomputed_feature_bytes']},{'' if t is None else repr(t)}")
    ws.path("resources", "report.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines), file=sys.stderr)
    return {"rows": [r["workflow"] for r in rows],
            "precomputed_feature_bytes": {r["workflow"]: r["precomputed_feature_bytes"] for r in rows}}


COMMANDS = {
    "synth": (cmd_synth, "synthesize scenes and teacher feature maps"),
    "fit-phis": (cmd_fit_phis, "fit per-teacher standardization on training views"),
    "uplift": (cmd_uplift, "lift teacher maps onto Gaussians"),
    "plan-views": (cmd_plan_views, "plan adaptation views"),
    "augment-preview": (cmd_augment_preview, "render augmented scenes and report PSNR / smoothness"),
    "pretrain": (cmd_pretrain, "train the encoder on uplifted targets"),
    "adapt": (cmd_adapt, "render-and-distill adaptation on a held-out scene"),
    "eval-zeroshot": (cmd_eval_zeroshot, "zero-shot segmentation metrics"),
    "probe-linear": (cmd_probe_linear, "linear probe on encoder latents"),
    "pca": (cmd_pca, "PCA colour renders of encoder features"),
    "retrieval": (cmd_retrieval, "instance retrieval under center noise"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
    "render": (cmd_render, "render colour images and weight statistics"),
    "report": (cmd_report, "resource comparison of uplift and adapt"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults are built in)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. optim.lr=1e-3 or teachers.2.start_epoch=50")
    common.add_argument("--workdir", help="override the workdir from the config")
    common.add_argument("--threads", type=int, default=1, help="rasterizer worker threads (1 = bitwise deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="splatdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common])
        if name in ("plan-views", "augment-preview", "adapt", "render"):
            p.add_argument("--scene", help="scene name from the config")
        if name in ("adapt", "eval-zeroshot", "probe-linear", "pca", "retrieval"):
            p.add_argument("--model", help="checkpoint path (default: <workdir>/model.chmd)")
        if name == "adapt":
            p.add_argument("--teacher-maps", help="directory of <teacher>_<view>.chfm maps aligned with the plan")
        if name == "augment-preview":
            p.add_argument("--epsilon", type=float, default=0.1)
            p.add_argument("--gamma", type=float, default=0.5)
            p.add_argument("--views", type=int, default=4)
        if name == "eval-zeroshot":
            p.add_argument("--min-miou", type=float, help="exit 5 if the training-scene mIoU is lower")
        if name == "pretrain":
            p.add_argument("--output", help="checkpoint path (default: <workdir>/model.chmd)")
    return parser


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True, default=lambda v: v.item() if hasattr(v, "item") else str(v)))


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        overrides = list(args.set) + ([f"workdir={args.workdir}"] if args.workdir else [])
        ws = Workspace(load_config(args.config, overrides), args.threads)
        summary = COMMANDS[command][0](ws, args)
        _emit({"command": command, "ok": True, **summary})
        return 0
    except SplatDistillError as exc:
        out = {"command": command, "ok": False, "error": type(exc).__name__, "message": str(exc.args[0])}
        if len(exc.args) > 1 and isinstance(exc.args[1], dict):
            out.update(exc.args[1])
        _emit(out)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        # unreadable or malformed inputs that slipped past the format checks
        _emit({"command": command, "ok": False, "error": "FormatError", "message": str(exc)})
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
