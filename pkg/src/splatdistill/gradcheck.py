"""Central finite-difference checks for every hand-written backward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .distill.losses import LossWeights, loss_contrastive, loss_match
from .distill.model import DistillModel, EncoderConfig
from .distill.train import image_loss
from .raster import backproject_feature_grad, composite, rasterize
from .scene import Camera, GaussianScene

REL_TOL = 1e-5
ADJOINT_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def small_scene(rng, n: int = 24, labels: int = 3) -> GaussianScene:
    q = rng.normal(size=(n, 4))
    return GaussianScene(
        rng.uniform([-0.6, -0.6, 2.0], [0.6, 0.6, 3.0], (n, 3)), rng.uniform(0.08, 0.25, (n, 3)),
        q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(0.3, 0.95, n), rng.uniform(0, 1, (n, 3)),
        semantic_labels=rng.integers(0, labels, n), instance_labels=rng.integers(0, labels + 2, n))


def small_model(seed: int, dims=None, mode: str = "gs_full") -> DistillModel:
    dims = dims or {"lang": 6, "pe": 4}
    return DistillModel(EncoderConfig(mode, (8, 8, 8), 8, 4), dims, head_hidden=6, seed=seed)


def check_adjoint(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    scene = small_scene(rng, 32)
    w = rasterize(scene, Camera(20, 20, 22.0, 22.0, 9.5, 9.5))
    feats = rng.normal(size=(32, 5))
    g = rng.normal(size=(20, 20, 5))
    lhs = float(np.sum(composite(w, feats) * g))
    rhs = float(np.sum(feats * backproject_feature_grad(w, g)))
    return CheckResult("render adjoint", abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12), ADJOINT_TOL)


def check_loss_match(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=(16, 12)), rng.normal(size=(16, 12))
    mask = rng.uniform(size=16) < 0.7
    lw = LossWeights(0.7, 1.3, 0.8)
    res = loss_match(pred, target, mask, lw)
    return CheckResult("matching loss", rel_error(res.grad, numeric_grad(
        lambda: loss_match(pred, target, mask, lw).value, pred)), REL_TOL)


def check_contrastive(seed: int = 0, kind: str = "semantic") -> CheckResult:
    rng = np.random.default_rng(seed)
    scene = small_scene(rng, 32)
    labels = scene.semantic_labels if kind == "semantic" else scene.instance_labels
    pred = rng.normal(size=(32, 8))
    res = loss_contrastive(pred, labels, None, 0.1, seed)
    return CheckResult(f"{kind} InfoNCE", rel_error(res.grad, numeric_grad(
        lambda: loss_contrastive(pred, labels, None, 0.1, seed).value, pred)), REL_TOL)


def _model_check(name, model, loss_fn):
    """``loss_fn(model) -> (value, analytic grads)``; compares against FD on every parameter."""
    _, grads = loss_fn(model)
    analytic = np.concatenate([grads[k].ravel() for k in sorted(model.params)])
    numeric = np.concatenate([numeric_grad(lambda: loss_fn(model)[0], model.params[k]).ravel()
                              for k in sorted(model.params)])
    return CheckResult(name, rel_error(analytic, numeric), REL_TOL)


def check_encoder(seed: int = 0, mode: str = "gs_full") -> CheckResult:
    rng = np.random.default_rng(seed)
    scene = small_scene(rng, 20)
    if mode == "pc_variant":
        scene = scene.with_(normals=rng.normal(size=(20, 3)))
    model = small_model(seed, mode=mode)
    model.fit_input_stats([scene])
    probes = {t: rng.normal(size=(20, d)) for t, d in model.teacher_dims.items()}
    graph = model.graph(scene)

    def fn(m):
        _, preds, cache = m.forward(scene, graph=graph)
        # quadratic readout so second-order terms are exercised
        value = sum(np.sum(probes[t] * preds[t]) + 0.5 * np.sum(preds[t] ** 2) for t in preds)
        return value, m.backward(cache, {t: probes[t] + preds[t] for t in preds})

    return _model_check(f"encoder + heads ({mode})", model, fn)


def check_adapt_path(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    scene = small_scene(rng, 24)
    model = small_model(seed, {"lang": 6})
    model.fit_input_stats([scene])
    w = rasterize(scene, Camera(12, 12, 14.0, 14.0, 5.5, 5.5))
    target = rng.normal(size=(12, 12, 6))
    omega = w.total() >= 0.3
    graph = model.graph(scene)

    def fn(m):
        _, preds, cache = m.forward(scene, graph=graph)
        value, dfeat, _ = image_loss(w, preds["lang"], target, omega)
        return value, m.backward(cache, {"lang": dfeat})

    return _model_check("render-and-distill path", model, fn)


def run_all(seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = [check_adjoint(seed), check_loss_match(seed), check_contrastive(seed, "semantic"),
               check_contrastive(seed, "instance"), check_encoder(seed), check_encoder(seed, "pc_variant"),
               check_adapt_path(seed)]
    return results, time.perf_counter() - start
