"""Evaluation of distilled features: segmentation and probing, PCA views, retrieval."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from .augment import point_jitter
from .errors import ConfigError, PreconditionError
from .phis import PhisTransform
from .raster import DEFAULT_RASTER, RasterConfig, composite, rasterize, write_ppm
from .scene import Camera, GaussianScene
from .synth import BACKGROUND_CLASSES


def confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """``C[g, p]`` counts of ground truth ``g`` predicted as ``p``."""
    return np.bincount(np.asarray(gt) * n_classes + np.asarray(pred),
                       minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def segmentation_metrics(pred, gt, n_classes: int, background=BACKGROUND_CLASSES) -> dict:
    """mIoU / mAcc over classes that occur, and the same over foreground classes only.

    IoU averages over classes with ``TP + FP + FN > 0``; accuracy over classes
    present in the ground truth.
    """
    cm = confusion(pred, gt, n_classes).astype(np.float64)
    tp = np.diag(cm)
    gt_count, pred_count = cm.sum(axis=1), cm.sum(axis=0)
    union = gt_count + pred_count - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(gt_count > 0, tp / gt_count, np.nan)
    fg = np.ones(n_classes, bool)
    fg[[c for c in background if c < n_classes]] = False

    def mean(v, sel=slice(None)):
        v = v[sel]
        v = v[~np.isnan(v)]
        return float(v.mean()) if v.size else float("nan")

    return {"mIoU": mean(iou), "mAcc": mean(acc), "f-mIoU": mean(iou, fg), "f-mAcc": mean(acc, fg),
            "overall_acc": float(tp.sum() / max(cm.sum(), 1)), "per_class_iou": iou.tolist()}


@dataclass
class Segmentation:
    labels: np.ndarray
    metrics: dict


def cosine_argmax(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    f = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    p = prototypes / np.maximum(np.linalg.norm(prototypes, axis=1, keepdims=True), 1e-12)
    return np.argmax(f @ p.T, axis=1)


def zero_shot_segment(model, scene: GaussianScene, prototypes: np.ndarray, transform: PhisTransform | None = None,
                      mask: np.ndarray | None = None, teacher: str = "lang",
                      background=BACKGROUND_CLASSES) -> Segmentation:
    """Label each Gaussian by the prototype closest in cosine to its language feature.

    Predictions live in standardized space; ``transform`` maps them back to
    the prototypes' raw teacher space. ``mask`` restricts the metric.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or len(prototypes) == 0:
        raise ConfigError("need at least one prototype")
    feats = model.predict(scene, teacher)
    if transform is not None:
        feats = transform.invert(feats)
    labels = cosine_argmax(feats, prototypes)
    metrics = {}
    if scene.semantic_labels is not None:
        sel = np.ones(len(scene), bool) if mask is None else np.asarray(mask, bool)
        metrics = segmentation_metrics(labels[sel], scene.semantic_labels[sel], len(prototypes), background)
    return Segmentation(labels, metrics)


@dataclass
class LinearProbe:
    weight: np.ndarray  # (d, C)
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    converged: bool

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = (features - self.mean) / self.std
        return np.argmax(x @ self.weight + self.bias, axis=1)


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, n_classes: int, l2: float = 1e-4,
                     tol: float = 1e-9, max_iter: int = 2000) -> LinearProbe:
    """Multinomial logistic regression by full-batch L-BFGS."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise PreconditionError("linear probing needs at least two classes in the data")
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), 1e-8)
    x = (features - mean) / std
    n, d = x.shape
    onehot = np.eye(n_classes)[labels]

    def objective(theta):
        w, b = theta[: d * n_classes].reshape(d, n_classes), theta[d * n_classes:]
        logits = x @ w + b
        loss = -np.sum(onehot * log_softmax(logits, axis=1)) / n + 0.5 * l2 * np.sum(w * w)
        g = (softmax(logits, axis=1) - onehot) / n
        return loss, np.concatenate([(x.T @ g + l2 * w).ravel(), g.sum(axis=0)])

    res = minimize(objective, np.zeros(d * n_classes + n_classes), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": tol})
    theta = res.x
    return LinearProbe(theta[: d * n_classes].reshape(d, n_classes), theta[d * n_classes:], mean, std,
                       bool(res.success))


def linear_probe(model, scenes, n_classes: int, eval_scenes=None, background=BACKGROUND_CLASSES, l2: float = 1e-4):
    """Probe frozen encoder latents; metrics on ``eval_scenes`` (default: the training scenes)."""
    if n_classes < 2:
        raise PreconditionError("linear probing needs at least two classes")
    z = np.concatenate([model.encode(s) for s in scenes])
    y = np.concatenate([s.semantic_labels for s in scenes])
    probe = fit_linear_probe(z, y, n_classes, l2)
    targets = scenes if eval_scenes is None else eval_scenes
    pred = np.concatenate([probe.predict(model.encode(s)) for s in targets])
    gt = np.concatenate([s.semantic_labels for s in targets])
    return probe, segmentation_metrics(pred, gt, n_classes, background)


def pca_colors(features: np.ndarray) -> tuple[np.ndarray, bool]:
    """Top-3 principal components min-max scaled to ``[0, 1]``.

    Constant components map to 0.5. The flag is True when fewer than three
    non-degenerate components exist (missing ones are zero-padded).
    """
    x = np.asarray(features, dtype=np.float64)
    if len(x) < 3:
        raise PreconditionError("PCA colouring needs at least three rows")
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = max(x.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    comps = x @ vt[: min(3, rank)].T if rank else np.zeros((len(x), 0))
    comps = np.hstack([comps, np.zeros((len(x), 3 - comps.shape[1]))])
    lo, hi = comps.min(axis=0), comps.max(axis=0)
    span = hi - lo
    out = np.where(span > 1e-12, (comps - lo) / np.where(span > 1e-12, span, 1.0), 0.5)
    return out, rank < 3


def pca_visualize(features: np.ndarray, scene: GaussianScene, camera: Camera, path=None,
                  config: RasterConfig = DEFAULT_RASTER) -> tuple[np.ndarray, bool]:
    """Render PCA colours of per-Gaussian ``features``; writes a PPM when ``path`` is given."""
    colors, degenerate = pca_colors(features)
    img = composite(rasterize(scene, camera, config), colors)
    if path is not None:
        write_ppm(img, path)
    return img, degenerate


def instance_means(features: np.ndarray, instances: np.ndarray):
    ids = np.unique(instances)
    means = np.stack([features[instances == i].mean(axis=0) for i in ids])
    return ids, means


def retrieval_metrics(clean: np.ndarray, noisy: np.ndarray, instances: np.ndarray, semantics: np.ndarray) -> dict:
    """Top-1 cosine retrieval of each noisy instance mean among the clean ones."""
    ids, a = instance_means(noisy, instances)
    _, b = instance_means(clean, instances)
    if len(ids) < 2:
        raise PreconditionError("retrieval needs at least two instances")
    hit = cosine_argmax(a, b)
    correct = hit == np.arange(len(ids))
    cls = np.array([np.bincount(semantics[instances == i]).argmax() for i in ids])
    misses = ~correct
    same = float(np.mean(cls[hit[misses]] == cls[misses])) if misses.any() else float("nan")
    return {"R@1": float(correct.mean()), "same_class_at_incorrect": same, "instances": int(len(ids))}


def instance_retrieval(model, scene: GaussianScene, noise_sigma: float, seed: int = 0) -> dict:
    """Encoder-feature retrieval from center-perturbed instances back to clean ones."""
    if scene.instance_labels is None or scene.semantic_labels is None:
        raise PreconditionError("retrieval needs instance and semantic labels")
    clean = model.encode(scene)
    noisy = model.encode(point_jitter(scene, noise_sigma, seed))
    out = retrieval_metrics(clean, noisy, scene.instance_labels, scene.semantic_labels)
    out["sigma"] = float(noise_sigma)
    return out


METRIC_COLUMNS = ("mIoU", "mAcc", "f-mIoU", "f-mAcc")


def metrics_csv(rows: dict, path=None, columns=METRIC_COLUMNS) -> str:
    """``rows`` maps a run name to its metric dict."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", *columns])
    for name, m in rows.items():
        w.writerow([name, *(repr(float(m[c])) for c in columns)])
    if path is not None:
        with open(path, "w") as fh:
            fh.write(buf.getvalue())
    return buf.getvalue()


def metrics_table(rows: dict, columns=METRIC_COLUMNS) -> str:
    width = max([len("run")] + [len(k) for k in rows])
    lines = ["  ".join([f"{'run':<{width}}", *(f"{c:>8}" for c in columns)])]
    for name, m in rows.items():
        lines.append("  ".join([f"{name:<{width}}", *(f"{100 * m[c]:8.2f}" for c in columns)]))
    return "\n".join(lines)
