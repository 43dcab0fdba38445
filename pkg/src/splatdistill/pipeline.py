"""Glue for the synthetic workflow, from teacher maps to training samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import phis
from .distill.train import Sample
from .errors import ConfigError
from .raster import DEFAULT_RASTER, RasterConfig, rasterize
from .scene import Camera, GaussianScene, TeacherFeatureMap
from .synth import orbit_cameras, synth_teacher
from .uplift import DEFAULT_TAU_W, UpliftReport, uplift_all


@dataclass(frozen=True)
class TeacherDef:
    teacher_id: str
    dim: int
    label_source: str = "semantic"
    noise: float = 0.0
    seed: int = 0


# stand-ins: two semantic teachers of different width, one instance-level
DEFAULT_TEACHERS = (
    TeacherDef("lang", 16, "semantic", 0.0, 0),
    TeacherDef("dino", 32, "semantic", 0.0, 1),
    TeacherDef("pe", 8, "instance", 0.0, 2),
)


def teacher_maps(scene: GaussianScene, cameras: list[Camera], teachers=DEFAULT_TEACHERS,
                 n_labels: dict | None = None, raster: RasterConfig = DEFAULT_RASTER, weights=None) -> dict:
    """``{teacher_id: [TeacherFeatureMap per camera]}`` from the synthetic oracle."""
    n_labels = n_labels or {}
    if weights is None:
        weights = [rasterize(scene, cam, raster) for cam in cameras]
    return {t.teacher_id: [synth_teacher(scene, cam, t.teacher_id, t.dim, t.noise, t.seed,
                                         label_source=t.label_source,
                                         n_labels=n_labels.get(t.teacher_id), weights=w)
                           for cam, w in zip(cameras, weights)]
            for t in teachers}


def fit_transforms(maps: dict, max_samples: int = 20000, seed: int = 0) -> dict:
    """PHI-S per teacher, fit on covered pixels (non-zero features) of all views."""
    rng = np.random.default_rng(seed)
    out = {}
    for tid, views in maps.items():
        px = np.concatenate([m.data.reshape(-1, m.dim) for m in views])
        px = px[np.any(px != 0, axis=1)]
        if len(px) > max_samples:
            px = px[np.sort(rng.choice(len(px), max_samples, replace=False))]
        out[tid] = phis.fit(px)
    return out


def label_counts(scenes) -> dict:
    """Label-space sizes shared across scenes so prototypes agree between them."""
    sem = max(int(s.semantic_labels.max()) for s in scenes) + 1
    ins = max(int(s.instance_labels.max()) for s in scenes) + 1
    return {"semantic": sem, "instance": ins}


def n_labels_for(teachers, counts: dict) -> dict:
    return {t.teacher_id: counts[t.label_source] for t in teachers}


def build_dataset(scenes: list[GaussianScene], teachers=DEFAULT_TEACHERS, n_views: int = 12,
                  width: int = 96, height: int = 72, tau_w: float = DEFAULT_TAU_W,
                  transforms: dict | None = None, raster: RasterConfig = DEFAULT_RASTER,
                  report: UpliftReport | None = None, fov_x_deg: float = 70.0):
    """Render teachers around each scene, fit PHI-S (unless given) and uplift.

    Returns ``(samples, transforms)``.
    """
    if not scenes:
        raise ConfigError("no scenes given")
    counts = n_labels_for(teachers, label_counts(scenes))
    rendered = []
    for s in scenes:
        cams = orbit_cameras(s, n_views, width, height, fov_x_deg=fov_x_deg)
        weights = [rasterize(s, c, raster) for c in cams]
        rendered.append((cams, weights, teacher_maps(s, cams, teachers, counts, raster, weights)))
    if transforms is None:
        pooled = {t.teacher_id: [m for _, _, maps in rendered for m in maps[t.teacher_id]] for t in teachers}
        transforms = fit_transforms(pooled)
    samples = []
    for k, (s, (cams, _, maps)) in enumerate(zip(scenes, rendered)):
        targets = uplift_all(s, cams, maps, tau_w, raster, transforms, report=report)
        samples.append(Sample(s, targets, f"scene{k}"))
    return samples, transforms


def feature_teacher(scene: GaussianScene, teachers=DEFAULT_TEACHERS, counts: dict | None = None,
                    raster: RasterConfig = DEFAULT_RASTER):
    """Callable teacher oracle for adaptation: renders maps on demand at any camera."""
    counts = counts or n_labels_for(teachers, label_counts([scene]))

    def oracle(view: int, camera: Camera) -> dict[str, TeacherFeatureMap]:
        return {k: v[0] for k, v in teacher_maps(scene, [camera], teachers, counts, raster).items()}

    return oracle
