"""Tile-based Gaussian splat rasterizer that records compositing weights.

Every pixel's compositing weights ``w_i = T_i * alpha_i`` are kept as a sparse
pixel-by-Gaussian matrix (:class:`CompositeWeights`). Rendering colors,
rendering arbitrary per-Gaussian features and the adjoint that scatters
image-space gradients back onto Gaussians all go through that one record.

Pixel centers sit at integer coordinates.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError
from .scene import Camera, GaussianScene, quat_to_rotmat


@dataclass(frozen=True)
class RasterConfig:
    near: float = 0.01
    guard_band: float = 1.3  # frustum expansion factor for center culling
    dilation: float = 0.3
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    min_transmittance: float = 1e-4
    tile_size: int = 16
    threads: int = 1


DEFAULT_RASTER = RasterConfig()

# Instrumentation: counts rasterization passes (used to check weight reuse).
RENDER_STATS = {"passes": 0, "seconds": 0.0}


class SplatProjection(NamedTuple):
    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass(frozen=True, eq=False)
class Projections:
    """Screen-space splats, sorted by ascending depth (ties by index)."""

    index: np.ndarray  # (K,) Gaussian indices
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 3) entries a, b, c of the inverse covariance
    depth: np.ndarray  # (K,)
    opacity: np.ndarray  # (K,)
    bbox: np.ndarray  # (K, 4) xmin, ymin, xmax, ymax in pixels

    def __len__(self):
        return len(self.index)

    def __getitem__(self, k) -> SplatProjection:
        return SplatProjection(int(self.index[k]), self.mean2d[k], self.cov2d[k], float(self.depth[k]))

    def __iter__(self):
        return (self[k] for k in range(len(self)))


def covariance3d(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """``R diag(s)^2 R^T`` per Gaussian."""
    r = quat_to_rotmat(rotations)
    m = r * scales[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


def project(scene: GaussianScene, camera: Camera, config: RasterConfig = DEFAULT_RASTER) -> Projections:
    """EWA projection; splats behind the near plane or outside the guard band are culled.

    Centers must lie inside the view frustum widened by ``guard_band`` about
    the principal point; this also keeps the perspective Jacobian bounded.
    """
    pc = camera.world_to_camera(scene.centers)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    keep = (z > config.near) & (255.0 * scene.opacities >= 1.0)
    g = config.guard_band
    with np.errstate(divide="ignore", invalid="ignore"):
        u, v = x / z, y / z
    keep &= ((u >= -g * (camera.cx + 0.5) / camera.fx) & (u <= g * (camera.width - 0.5 - camera.cx) / camera.fx)
             & (v >= -g * (camera.cy + 0.5) / camera.fy) & (v <= g * (camera.height - 0.5 - camera.cy) / camera.fy))
    idx = np.flatnonzero(keep)
    x, y, z = x[idx], y[idx], z[idx]

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = camera.fx / z
    jac[:, 0, 2] = -camera.fx * x / z**2
    jac[:, 1, 1] = camera.fy / z
    jac[:, 1, 2] = -camera.fy * y / z**2
    t = jac @ camera.rotation
    cov = t @ covariance3d(scene.scales[idx], scene.rotations[idx]) @ np.swapaxes(t, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    cov[:, 0, 0] += config.dilation
    cov[:, 1, 1] += config.dilation

    mean = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=1)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)

    # Beyond this Mahalanobis radius the splat's alpha is below alpha_min.
    opac = scene.opacities[idx]
    r = np.sqrt(2.0 * np.log(np.maximum(opac / config.alpha_min, 1.0)))
    hx = r * np.sqrt(cov[:, 0, 0]) + 1.0
    hy = r * np.sqrt(cov[:, 1, 1]) + 1.0
    bbox = np.stack([mean[:, 0] - hx, mean[:, 1] - hy, mean[:, 0] + hx, mean[:, 1] + hy], axis=1)
    on_screen = ((bbox[:, 2] >= 0) & (bbox[:, 0] <= camera.width - 1)
                 & (bbox[:, 3] >= 0) & (bbox[:, 1] <= camera.height - 1))

    sel = np.flatnonzero(on_screen)
    order = sel[np.lexsort((idx[sel], z[sel]))]
    return Projections(idx[order], mean[order], cov[order], conic[order], z[order], opac[order], bbox[order])


@dataclass(frozen=True, eq=False)
class CompositeWeights:
    """Per-pixel depth-ordered ``(gaussian, weight)`` records in CSR layout.

    Row ``p = y * width + x`` holds the splats that contributed to pixel
    ``(x, y)`` in compositing order.
    """

    height: int
    width: int
    n_gaussians: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    residual: np.ndarray  # (height, width) final transmittance

    def pixel(self, x: int, y: int) -> list[tuple[int, float]]:
        p = y * self.width + x
        lo, hi = self.indptr[p], self.indptr[p + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.weights[lo:hi].tolist()))

    def matrix(self) -> sp.csr_matrix:
        """Sparse ``(height*width, n_gaussians)`` weight matrix."""
        return sp.csr_matrix((self.weights, self.indices, self.indptr),
                             shape=(self.height * self.width, self.n_gaussians))

    def total(self) -> np.ndarray:
        """Accumulated alpha per pixel, ``sum_i w_i``."""
        rows = np.repeat(np.arange(self.height * self.width), np.diff(self.indptr))
        out = np.bincount(rows, weights=self.weights, minlength=self.height * self.width)
        return out.reshape(self.height, self.width)

    def visible(self, threshold: float = 0.0) -> np.ndarray:
        """Sorted Gaussian indices with at least one weight above ``threshold``."""
        return np.unique(self.indices[self.weights >= threshold]) if threshold > 0 else np.unique(self.indices)

    def restrict(self, keep: np.ndarray) -> CompositeWeights:
        """Records of the Gaussians in ``keep``, re-indexed to ``0..len(keep)-1``."""
        keep = np.asarray(keep)
        remap = np.full(self.n_gaussians, -1)
        remap[keep] = np.arange(len(keep))
        new = remap[self.indices]
        m = new >= 0
        rows = np.repeat(np.arange(self.height * self.width), np.diff(self.indptr))[m]
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=self.height * self.width))])
        return CompositeWeights(self.height, self.width, len(keep), indptr, new[m],
                                self.weights[m], self.residual)


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color_image: np.ndarray
    weights: CompositeWeights
    visible_set: np.ndarray


def _composite_tile(proj: Projections, splats: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                    config: RasterConfig):
    """Front-to-back compositing of ``splats`` (depth-sorted) over tile pixels."""
    dx = xs[:, None] - proj.mean2d[splats, 0][None, :]
    dy = ys[:, None] - proj.mean2d[splats, 1][None, :]
    a, b, c = proj.conic[splats].T
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    alpha = np.minimum(config.alpha_max, proj.opacity[splats] * np.exp(power))
    alpha[(power > 0) | (alpha < config.alpha_min)] = 0.0

    t_incl = np.cumprod(1.0 - alpha, axis=1)
    t_excl = np.empty_like(t_incl)
    t_excl[:, 0] = 1.0
    t_excl[:, 1:] = t_incl[:, :-1]
    # Traversal stops right after the contribution that drops T below the threshold.
    below = t_incl < config.min_transmittance
    stopped_before = np.zeros_like(below)
    stopped_before[:, 1:] = np.logical_or.accumulate(below, axis=1)[:, :-1]
    weight = np.where(stopped_before, 0.0, alpha * t_excl)
    last = np.where(below.any(axis=1), below.argmax(axis=1), len(splats) - 1)
    residual = t_incl[np.arange(len(xs)), last]
    return weight, residual


def _tile_job(args):
    proj, splats, x0, y0, x1, y1, width, config = args
    yy, xx = np.mgrid[y0:y1, x0:x1]
    xs, ys = xx.ravel().astype(np.float64), yy.ravel().astype(np.float64)
    pix = (yy * width + xx).ravel()
    if len(splats) == 0:
        return pix, np.ones(len(pix)), np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
    weight, residual = _composite_tile(proj, splats, xs, ys, config)
    prow, pcol = np.nonzero(weight)  # row-major: pixel then depth order
    return pix, residual, pix[prow], proj.index[splats[pcol]], weight[prow, pcol]


def rasterize(scene: GaussianScene, camera: Camera, config: RasterConfig = DEFAULT_RASTER,
              projections: Projections | None = None) -> CompositeWeights:
    """Compute compositing weights for every pixel of ``camera``."""
    start = time.perf_counter()
    proj = project(scene, camera, config) if projections is None else projections
    h, w, ts = camera.height, camera.width, config.tile_size
    jobs = []
    for ty in range(math.ceil(h / ts)):
        for tx in range(math.ceil(w / ts)):
            x0, y0 = tx * ts, ty * ts
            x1, y1 = min(x0 + ts, w), min(y0 + ts, h)
            hit = ((proj.bbox[:, 2] >= x0) & (proj.bbox[:, 0] <= x1 - 1)
                   & (proj.bbox[:, 3] >= y0) & (proj.bbox[:, 1] <= y1 - 1))
            jobs.append((proj, np.flatnonzero(hit), x0, y0, x1, y1, w, config))
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(_tile_job, jobs))
    else:
        results = [_tile_job(j) for j in jobs]

    residual = np.ones(h * w)
    rec_pix, rec_idx, rec_w = [], [], []
    for pix, res, rp, ri, rw in results:
        residual[pix] = res
        rec_pix.append(rp)
        rec_idx.append(ri)
        rec_w.append(rw)
    rec_pix = np.concatenate(rec_pix)
    order = np.argsort(rec_pix, kind="stable")
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rec_pix, minlength=h * w))])
    RENDER_STATS["passes"] += 1
    RENDER_STATS["seconds"] += time.perf_counter() - start
    return CompositeWeights(h, w, len(scene), indptr, np.concatenate(rec_idx)[order].astype(np.int64),
                            np.concatenate(rec_w)[order], residual.reshape(h, w))


def composite(weights: CompositeWeights, features: np.ndarray) -> np.ndarray:
    """``F_pixel = sum_i w_i F_i`` for per-Gaussian rows ``features``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != weights.n_gaussians:
        raise ShapeError(f"expected ({weights.n_gaussians}, D) features, got {features.shape}")
    out = weights.matrix() @ features
    return out.reshape(weights.height, weights.width, features.shape[1])


def render(scene: GaussianScene, camera: Camera, config: RasterConfig = DEFAULT_RASTER) -> RenderOutput:
    weights = rasterize(scene, camera, config)
    return RenderOutput(composite(weights, scene.colors), weights, weights.visible())


def render_features(scene: GaussianScene, camera: Camera, per_gaussian_features: np.ndarray,
                    config: RasterConfig = DEFAULT_RASTER):
    """Render ``(N, D)`` features; returns the ``(H, W, D)`` image and the weights."""
    per_gaussian_features = np.asarray(per_gaussian_features)
    if per_gaussian_features.ndim != 2 or per_gaussian_features.shape[0] != len(scene):
        raise ShapeError(f"expected ({len(scene)}, D) features, got {per_gaussian_features.shape}")
    weights = rasterize(scene, camera, config)
    return composite(weights, per_gaussian_features), weights


def backproject_feature_grad(weights: CompositeWeights, image_grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`composite`: ``W^T g`` accumulated in pixel-major order."""
    image_grad = np.asarray(image_grad, dtype=np.float64)
    if image_grad.shape[:2] != (weights.height, weights.width):
        raise ShapeError("image gradient does not match the weight record resolution")
    g = image_grad.reshape(weights.height * weights.width, -1)
    return np.asarray(weights.matrix().T @ g)


def write_ppm(image: np.ndarray, path) -> None:
    """Binary P6 export of an ``(H, W, 3)`` image in ``[0, 1]``."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8)[: h * w * 3].reshape(h, w, 3) / 255.0
