"""Training loops: supervised pretraining on uplifted targets and
render-and-distill adaptation against 2D teacher maps."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import augment as aug
from ..errors import ConfigError, NumericalError, PreconditionError
from ..phis import PhisTransform
from ..raster import DEFAULT_RASTER, CompositeWeights, RasterConfig, backproject_feature_grad, composite, rasterize
from ..scene import GaussianScene
from ..uplift import UpliftedTargets, resize_bilinear
from ..viewplan import ViewPlan
from .losses import CONTRASTIVE_KIND, LossWeights, TeacherSchedule, loss_contrastive, loss_match
from .model import DistillModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_lr_fraction: float = 0.0  # cosine decay floor as a fraction of ``lr``

    def __post_init__(self):
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid optimizer settings")


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 1:
        return base
    frac = min(step, total - 1) / (total - 1)
    return base * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac)))


class Adam:
    def __init__(self, params: dict, config: OptimConfig = OptimConfig()):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.config
        self.t += 1
        b1c, b2c = 1 - c.beta1 ** self.t, 1 - c.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.eps)


@dataclass(frozen=True)
class AugmentConfig:
    epsilon: float = 0.0  # rendering-equivalent noise; 0 disables
    gamma: float = 0.0  # immature-manifold inflation; 0 disables
    rho: float = aug.DEFAULT_RHO
    rigid: bool = False  # random yaw about the vertical axis


@dataclass
class Sample:
    scene: GaussianScene
    targets: dict  # teacher id -> UpliftedTargets (standardized)
    name: str = ""


@dataclass
class LossHistory:
    rows: list = field(default_factory=list)  # (epoch, teacher, match, contrastive, total)

    def add(self, epoch, teacher, match, con, total):
        self.rows.append((int(epoch), str(teacher), float(match), float(con), float(total)))

    def totals(self) -> np.ndarray:
        """Per-epoch total loss (sum over active teachers)."""
        epochs = sorted({r[0] for r in self.rows})
        return np.array([sum(r[4] for r in self.rows if r[0] == e) for e in epochs])

    def teachers_at(self, epoch: int) -> list[str]:
        return [r[1] for r in self.rows if r[0] == epoch]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "teacher", "match", "contrastive", "total"])
            for e, t, m, c, tot in self.rows:
                w.writerow([e, t, repr(m), repr(c), repr(tot)])


def _augmented(scene: GaussianScene, cfg: AugmentConfig, seed: int) -> tuple[GaussianScene, bool]:
    out, changed = scene, False
    if cfg.epsilon > 0:
        out, changed = aug.rendering_equivalent(out, cfg.epsilon, seed), True
    if cfg.gamma > 0:
        out, changed = aug.immature_manifold(out, cfg.gamma, cfg.rho, seed + 1), True
    if cfg.rigid:
        yaw = np.random.default_rng(seed + 2).uniform(0, 2 * np.pi)
        out, changed = aug.rigid_transform(out, yaw), True
    return out, changed


def scene_loss(model: DistillModel, scene: GaussianScene, targets: dict, teachers, schedule: TeacherSchedule,
               weights: LossWeights = LossWeights(), seed: int = 0, graph=None, need_grad: bool = True):
    """Weighted loss of one scene, per-teacher ``(match, contrastive)`` and parameter gradients."""
    _, preds, cache = model.forward(scene, teachers, graph)
    parts, dpred, total = {}, {}, 0.0
    for t in teachers:
        tgt: UpliftedTargets = targets[t]
        spec = schedule[t]
        m = loss_match(preds[t], tgt.features, tgt.mask, weights)
        grad = spec.weight * m.grad
        con_value = 0.0
        kind = CONTRASTIVE_KIND.get(t)
        if kind is not None and spec.contrastive_weight > 0:
            labels = scene.semantic_labels if kind == "semantic" else scene.instance_labels
            if labels is None:
                raise PreconditionError(f"contrastive loss for {t!r} needs {kind} labels")
            c = loss_contrastive(preds[t], labels, tgt.mask, weights.temperature, seed)
            con_value = c.value
            grad = grad + spec.weight * spec.contrastive_weight * c.grad
        parts[t] = (m.value, con_value)
        total += spec.weight * (m.value + spec.contrastive_weight * con_value)
        dpred[t] = grad
    grads = model.backward(cache, dpred) if need_grad else None
    return total, parts, grads


def pretrain(model: DistillModel, dataset: list[Sample], schedule: TeacherSchedule, epochs: int,
             optim: OptimConfig = OptimConfig(), weights: LossWeights = LossWeights(),
             augment: AugmentConfig = AugmentConfig(), seed: int = 0) -> tuple[DistillModel, LossHistory]:
    """One optimizer step per scene, ``epochs`` passes over ``dataset``.

    Augmentations are drawn per scene per epoch; contrastive half-splits are
    reseeded every epoch. Returns the trained model (updated in place) and the
    per-epoch history averaged over scenes.
    """
    if not dataset:
        raise PreconditionError("pretraining needs at least one scene")
    for s in dataset:
        for t in schedule.teachers:
            if t not in s.targets:
                raise PreconditionError(f"scene {s.name!r} has no targets for teacher {t!r}")
            if s.targets[t].dim != model.teacher_dims[t]:
                raise ConfigError(f"teacher {t!r}: target dim {s.targets[t].dim} != head dim")
    opt = Adam(model.params, optim)
    total_steps = epochs * len(dataset)
    graphs = [model.graph(s.scene) for s in dataset]
    history = LossHistory()
    step = 0
    for epoch in range(epochs):
        active = schedule.active(epoch)
        acc = {t: np.zeros(3) for t in active}
        for k, sample in enumerate(dataset):
            scene, changed = _augmented(sample.scene, augment, seed * 1_000_003 + epoch * 1009 + k)
            graph = model.graph(scene) if changed else graphs[k]
            total, parts, grads = scene_loss(model, scene, sample.targets, active, schedule, weights,
                                             seed ^ epoch, graph)
            for t, (m, c) in parts.items():
                if not (np.isfinite(m) and np.isfinite(c)):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, scene {sample.name or k!r}, "
                                         f"teacher {t!r}")
                acc[t] += [m, c, schedule[t].weight * (m + schedule[t].contrastive_weight * c)]
            if active:
                opt.step(model.params, grads, cosine_lr(optim.lr, step, total_steps, optim.min_lr_fraction))
            step += 1
        for t in active:
            history.add(epoch, t, *(acc[t] / len(dataset)))
    return model, history


# ---------------------------------------------------------------------------
# render-and-distill adaptation


@dataclass(frozen=True)
class AdaptConfig:
    steps: int | None = None  # default: epochs x number of view groups
    epochs: int = 100
    lr: float = 2e-4
    omega_threshold: float = 0.5
    feature_scale: float = 0.25
    group_size: int = 4
    train_heads: bool = True


@dataclass
class AdaptReport:
    losses: list = field(default_factory=list)  # image-space loss per step
    raster_seconds_per_view: float = 0.0
    views_rasterized: int = 0
    precomputed_feature_bytes: int = 0  # nothing is uplifted or stored ahead of time
    groups: list = field(default_factory=list)


def standardize_pixels(transform: PhisTransform | None, fmap: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Standardize a rendered teacher map so it matches rendered standardized features.

    Rendering is linear but the standardization is affine, so the mean is
    removed in proportion to each pixel's accumulated alpha.
    """
    if transform is None:
        return np.asarray(fmap, dtype=np.float64)
    centered = fmap - alpha[..., None] * transform.mean
    dp = transform.output_dim
    pad = np.zeros(centered.shape[:-1] + (dp,))
    pad[..., : centered.shape[-1]] = centered
    return transform.scale * pad @ transform.rotation.T


def image_loss(weights: CompositeWeights, features: np.ndarray, target: np.ndarray, omega: np.ndarray,
               loss_weights: LossWeights = LossWeights()):
    """Matching loss between rendered ``features`` and ``target`` over pixels ``omega``.

    Returns the loss and its gradient with respect to the per-Gaussian features.
    """
    img = composite(weights, features)
    h, w, d = img.shape
    res = loss_match(img.reshape(-1, d), target.reshape(-1, d), omega.ravel(), loss_weights)
    return res.value, backproject_feature_grad(weights, res.grad.reshape(h, w, d)), res.empty


def _teacher_maps(teacher, view: int, camera):
    if callable(teacher):
        return teacher(view, camera)
    return {t: maps[view] for t, maps in teacher.items()}


def adapt(model: DistillModel, scene: GaussianScene, plan: ViewPlan, teacher, transforms: dict,
          config: AdaptConfig = AdaptConfig(), teachers=None, loss_weights: LossWeights = LossWeights(),
          optim: OptimConfig | None = None, raster: RasterConfig = DEFAULT_RASTER
          ) -> tuple[DistillModel, AdaptReport]:
    """Finetune on rendered predictions against teacher maps of the planned views.

    ``teacher`` is either ``{teacher_id: [map per plan view]}`` or a callable
    ``(view_index, feature_camera) -> {teacher_id: TeacherFeatureMap}``.
    Each step takes one view group, crops the scene to the Gaussians those
    views see, renders every active head and matches the teacher over pixels
    whose accumulated alpha reaches ``omega_threshold``.
    """
    teachers = list(model.teacher_dims if teachers is None else teachers)
    groups = plan.groups(config.group_size)
    if not groups:
        if not plan.candidates:
            raise PreconditionError("view plan is empty")
        groups = [[k] for k in range(len(plan.candidates))]
    report = AdaptReport(groups=groups)

    views = {}  # view -> (weights, alpha, omega, standardized targets)
    t0 = time.perf_counter()
    for k in sorted({v for g in groups for v in g}):
        cam = plan.candidates[k].camera
        fcam = cam.resized(max(1, round(cam.width * config.feature_scale)),
                           max(1, round(cam.height * config.feature_scale)))
        w = rasterize(scene, fcam, raster)
        alpha = w.total()
        omega = alpha >= config.omega_threshold
        maps = _teacher_maps(teacher, k, fcam)
        tg = {}
        for t in teachers:
            data = resize_bilinear(maps[t].data, fcam.height, fcam.width)
            tg[t] = standardize_pixels(transforms.get(t), data, alpha)
        views[k] = (w, omega, tg)
    report.views_rasterized = len(views)
    report.raster_seconds_per_view = (time.perf_counter() - t0) / max(1, len(views))
    if not any(v[1].any() for v in views.values()):
        raise PreconditionError(f"no pixel reaches accumulated alpha {config.omega_threshold} in any view")

    crops = []
    for g in groups:
        keep = np.unique(np.concatenate([views[k][0].visible() for k in g]))
        sub = scene.subset(keep)
        crops.append((g, sub, model.graph(sub), [views[k][0].restrict(keep) for k in g]))

    optim = optim or OptimConfig(lr=config.lr)
    opt = Adam(model.params, optim)
    steps = config.steps if config.steps is not None else config.epochs * len(groups)
    for step in range(steps):
        g, sub, graph, ws = crops[step % len(crops)]
        _, preds, cache = model.forward(sub, teachers, graph)
        dpred = {t: np.zeros_like(preds[t]) for t in teachers}
        total, used = 0.0, 0
        for k, w in zip(g, ws):
            _, omega, tg = views[k]
            if not omega.any():
                continue
            used += 1
            for t in teachers:
                value, grad, _ = image_loss(w, preds[t], tg[t], omega, loss_weights)
                total += value
                dpred[t] += grad
        if used:
            total /= used
            for t in teachers:
                dpred[t] /= used
        if not np.isfinite(total):
            raise NumericalError(f"non-finite adaptation loss at step {step}")
        report.losses.append(total)
        if used:
            grads = model.backward(cache, dpred, train_heads=config.train_heads)
            opt.step(model.params, grads, cosine_lr(optim.lr, step, steps, optim.min_lr_fraction))
    return model, report


def save_history(history: LossHistory, path) -> None:
    history.to_csv(Path(path))
