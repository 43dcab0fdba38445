"""Lift 2D teacher feature maps onto Gaussians.

Each Gaussian's target is the compositing-weight average of every pixel
feature it contributed to, over all views. Gaussians whose accumulated
weight stays below ``tau_w`` are masked out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .phis import PhisTransform
from .raster import DEFAULT_RASTER, CompositeWeights, RasterConfig, rasterize
from .scene import TEACHER_IDS, Camera, GaussianScene, TeacherFeatureMap

DEFAULT_TAU_W = 0.05


def resize_bilinear(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of an ``(h, w, d)`` array."""
    h, w = data.shape[:2]
    if (h, w) == (height, width):
        return np.asarray(data, dtype=np.float64)

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = data[y0][:, x0] * (1 - fx)[None, :, None] + data[y0][:, x1] * fx[None, :, None]
    bot = data[y1][:, x0] * (1 - fx)[None, :, None] + data[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


class _Kahan:
    def __init__(self, shape):
        self.total = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, value):
        y = value - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t


@dataclass
class UpliftSums:
    teacher_id: str
    numerator: np.ndarray
    denominator: np.ndarray
    views: int = 0
    feature_bytes: int = 0  # precomputed teacher features consumed (f32)


@dataclass(frozen=True, eq=False)
class UpliftedTargets:
    teacher_id: str
    features: np.ndarray  # (N, d)
    total_weight: np.ndarray  # (N,)
    mask: np.ndarray  # (N,) bool

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> UpliftedTargets:
        return UpliftedTargets(self.teacher_id, self.features[index], self.total_weight[index],
                               self.mask[index])


@dataclass
class UpliftReport:
    render_passes: int = 0
    feature_bytes: dict = field(default_factory=dict)


def _view_sums(weights: CompositeWeights, fmap: np.ndarray):
    feats = resize_bilinear(fmap, weights.height, weights.width).reshape(-1, fmap.shape[2])
    wt = weights.matrix().T
    return np.asarray(wt @ feats), np.asarray(wt @ np.ones(feats.shape[0]))


def accumulate(scene: GaussianScene, views, config: RasterConfig = DEFAULT_RASTER,
               weights: list[CompositeWeights] | None = None,
               transform: PhisTransform | None = None) -> UpliftSums:
    """Weighted feature and weight sums over ``views`` = [(Camera, TeacherFeatureMap)].

    ``transform`` standardizes every pixel feature before accumulation.
    """
    views = list(views)
    if not views:
        raise ConfigError("accumulate needs at least one view")
    tid, dim = views[0][1].teacher_id, views[0][1].dim
    for _, fmap in views:
        if fmap.teacher_id != tid or fmap.dim != dim:
            raise ConfigError("all feature maps must share teacher and dimension")
    out_dim = dim if transform is None else transform.output_dim
    num, den = _Kahan((len(scene), out_dim)), _Kahan(len(scene))
    nbytes = 0
    for k, (camera, fmap) in enumerate(views):
        w = weights[k] if weights is not None else rasterize(scene, camera, config)
        data = fmap.data
        if transform is not None:
            data = transform.apply(data)
        n_v, d_v = _view_sums(w, data)
        num.add(n_v)
        den.add(d_v)
        nbytes += fmap.nbytes_f32
    return UpliftSums(tid, num.total, den.total, len(views), nbytes)


def finalize(sums: UpliftSums, tau_w: float = DEFAULT_TAU_W) -> UpliftedTargets:
    mask = sums.denominator >= tau_w
    feats = np.zeros_like(sums.numerator)
    feats[mask] = sums.numerator[mask] / sums.denominator[mask, None]
    bad = ~np.all(np.isfinite(feats), axis=1)
    mask &= ~bad
    feats[~mask] = 0.0
    return UpliftedTargets(sums.teacher_id, feats, sums.denominator.copy(), mask)


def uplift_all(scene: GaussianScene, cameras: list[Camera], teachers: dict,
               tau_w: float = DEFAULT_TAU_W, config: RasterConfig = DEFAULT_RASTER,
               transforms: dict | None = None, standardize_first: bool = True,
               report: UpliftReport | None = None) -> dict:
    """Uplift every teacher over the same views, rasterizing each view once.

    ``teachers`` maps teacher id to a list of feature maps aligned with
    ``cameras``. With ``transforms`` given, features are standardized before
    averaging (``standardize_first``) or the finished targets are.
    """
    transforms = transforms or {}
    weights = [rasterize(scene, cam, config) for cam in cameras]
    if report is not None:
        report.render_passes += len(weights)
    out = {}
    for tid, maps in teachers.items():
        t = transforms.get(tid)
        if not cameras:
            dim = t.output_dim if t is not None else 0
            out[tid] = UpliftedTargets(tid, np.zeros((len(scene), dim)), np.zeros(len(scene)),
                                       np.zeros(len(scene), bool))
            continue
        if len(maps) != len(cameras):
            raise ConfigError(f"teacher {tid!r} has {len(maps)} maps for {len(cameras)} views")
        sums = accumulate(scene, zip(cameras, maps), config, weights,
                          t if standardize_first else None)
        targets = finalize(sums, tau_w)
        if t is not None and not standardize_first:
            feats = np.zeros((len(scene), t.output_dim))
            feats[targets.mask] = t.apply(targets.features[targets.mask])
            targets = UpliftedTargets(tid, feats, targets.total_weight, targets.mask)
        if report is not None:
            report.feature_bytes[tid] = report.feature_bytes.get(tid, 0) + sums.feature_bytes
        out[tid] = targets
    return out


def save_targets(targets: UpliftedTargets, path) -> int:
    n, d = targets.features.shape
    payload = struct.pack("<4sIIIB", b"CHUF", 1, n, d, TEACHER_IDS.index(targets.teacher_id))
    payload += np.asarray(targets.features, "<f4").tobytes()
    payload += np.asarray(targets.total_weight, "<f4").tobytes()
    payload += np.asarray(targets.mask, np.uint8).tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def load_targets(path) -> UpliftedTargets:
    raw = Path(path).read_bytes()
    if raw[:4] != b"CHUF":
        raise FormatError(f"{path}: bad CHUF magic")
    version, n, d, tid = struct.unpack_from("<IIIB", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported CHUF version {version}")
    off = 17
    if len(raw) != off + 4 * n * d + 4 * n + n:
        raise FormatError(f"{path}: CHUF payload size mismatch")
    feats = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    tw = np.frombuffer(raw, "<f4", n, off + 4 * n * d).astype(np.float64)
    mask = np.frombuffer(raw, np.uint8, n, off + 4 * n * d + 4 * n).astype(bool)
    return UpliftedTargets(TEACHER_IDS[tid], feats, tw, mask)
