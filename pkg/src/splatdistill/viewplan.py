"""Camera placement and view pairing for render-and-distill adaptation.

Positions are spread over the walkable part of the scene with farthest point
sampling, each position proposes eight horizontal viewing directions, views
that face a nearby surface are dropped, and the survivors are paired by the
Jaccard overlap of their visible Gaussian sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import FormatError, PlanningError, PreconditionError
from .raster import DEFAULT_RASTER, RasterConfig, project, rasterize
from .scene import Camera, GaussianScene


@dataclass(frozen=True)
class PlanConfig:
    n_positions: int = 12
    eye_height: float = 1.5
    voxel: float = 0.25
    clearance: float = 0.3
    d_min: float = 0.5
    cone_deg: float = 10.0
    n_directions: int = 8
    pitch_deg: float = 0.0
    pitch_jitter_deg: float = 0.0  # optional +/- jitter, seeded
    width: int = 96
    height: int = 72
    fov_x_deg: float = 90.0
    visibility_threshold: float = 1e-6
    min_overlap: float = 0.1
    max_pairs_per_view: int = 3
    group_size: int = 4
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ViewCandidate:
    camera: Camera
    visible: np.ndarray  # sorted Gaussian indices
    bbox2d: tuple | None  # (xmin, ymin, xmax, ymax) of visible projected means
    yaw: float = 0.0
    pitch: float = 0.0
    position: tuple | None = None  # sampled position, kept exactly for plan files


@dataclass(frozen=True)
class ViewPair:
    a: int
    b: int
    overlap: float


@dataclass(eq=False)
class ViewPlan:
    candidates: list
    pairs: list
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def groups(self, size: int = 4) -> list[list[int]]:
        return view_groups(self.pairs, len(self.candidates), size)


# ---------------------------------------------------------------------------
# positions


def navigable_voxels(scene: GaussianScene, eye_height: float = 1.5, voxel: float = 0.25,
                     clearance: float = 0.3) -> np.ndarray:
    """Eye-height points above occupied ground columns, inside the scene box, with free space around them."""
    if len(scene) == 0:
        raise PreconditionError("scene is empty")
    lo = scene.centers.min(axis=0)
    cols = np.floor((scene.centers[:, :2] - lo[:2]) / voxel).astype(np.int64)
    keys, inverse = np.unique(cols, axis=0, return_inverse=True)
    floor = np.full(len(keys), np.inf)
    np.minimum.at(floor, inverse.ravel(), scene.centers[:, 2])
    # snap the floor height to its voxel layer
    floor = lo[2] + np.floor((floor - lo[2]) / voxel) * voxel
    xy = lo[:2] + (keys + 0.5) * voxel
    pts = np.column_stack([xy, floor + eye_height])
    hi = scene.centers.max(axis=0)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    dist, _ = cKDTree(scene.centers).query(pts, k=1)
    return pts[inside & (dist > clearance)]


def farthest_point_sampling(points: np.ndarray, k: int, start: int) -> np.ndarray:
    """Indices of ``min(k, len(points))`` points chosen greedily by max-min distance."""
    k = min(int(k), len(points))
    chosen = [int(start)]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))  # first index wins ties
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen)


def sample_positions(scene: GaussianScene, k: int, eye_height: float = 1.5, voxel: float = 0.25,
                     clearance: float = 0.3) -> np.ndarray:
    """FPS over navigable voxels, starting from the one nearest the scene centroid."""
    if k < 1:
        raise PreconditionError("k must be at least 1")
    nav = navigable_voxels(scene, eye_height, voxel, clearance)
    if len(nav) == 0:
        raise PlanningError("no navigable voxels; check eye_height, voxel and clearance")
    centroid = scene.centers.mean(axis=0)
    start = int(np.argmin(np.linalg.norm(nav - centroid, axis=1)))
    return nav[farthest_point_sampling(nav, k, start)]


# ---------------------------------------------------------------------------
# candidate directions


def blocked_directions(position, scene: GaussianScene, directions: np.ndarray, d_min: float,
                       cone_deg: float = 10.0) -> np.ndarray:
    """True where the nearest center inside the cone around a direction is closer than ``d_min``."""
    v = scene.centers - np.asarray(position, float)
    dist = np.linalg.norm(v, axis=1)
    near = dist < d_min
    if not near.any():
        return np.zeros(len(directions), bool)
    v, dist = v[near], dist[near]
    cos = (v @ directions.T) / np.maximum(dist, 1e-300)[:, None]
    inside = (cos >= np.cos(np.radians(cone_deg))) | (dist[:, None] == 0)
    return inside.any(axis=0)


def candidate_views(position, scene: GaussianScene, d_min: float = 0.5,
                    config: PlanConfig = PlanConfig(), rng=None) -> list[tuple[float, float, Camera]]:
    """``(yaw, pitch, camera)`` for each unobstructed horizontal direction."""
    yaws = 2 * np.pi * np.arange(config.n_directions) / config.n_directions
    pitches = np.full(len(yaws), np.radians(config.pitch_deg))
    if config.pitch_jitter_deg and rng is not None:
        pitches = pitches + np.radians(rng.uniform(-1, 1, len(yaws)) * config.pitch_jitter_deg)
    dirs = np.column_stack([np.cos(yaws) * np.cos(pitches), np.sin(yaws) * np.cos(pitches), np.sin(pitches)])
    blocked = blocked_directions(position, scene, dirs, d_min, config.cone_deg)
    return [(float(y), float(p), Camera.from_yaw(position, y, config.width, config.height,
                                                 config.fov_x_deg, p))
            for y, p, b in zip(yaws, pitches, blocked) if not b]


# ---------------------------------------------------------------------------
# visibility


def cull_and_crop(camera: Camera, scene: GaussianScene, threshold: float = 1e-6,
                  raster: RasterConfig = DEFAULT_RASTER, yaw: float = 0.0, pitch: float = 0.0,
                  position=None) -> ViewCandidate:
    """Render once; keep Gaussians with any weight ``>= threshold`` and box their projected means."""
    proj = project(scene, camera, raster)
    weights = rasterize(scene, camera, raster, projections=proj)
    visible = weights.visible(threshold)
    bbox = None
    if visible.size:
        pos = np.full(len(scene), -1)
        pos[proj.index] = np.arange(len(proj))
        means = proj.mean2d[pos[visible]]
        lo, hi = means.min(axis=0), means.max(axis=0)
        bbox = (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
    if position is not None:
        position = tuple(float(v) for v in position)
    return ViewCandidate(camera, visible, bbox, yaw, pitch, position)


def _incidence(candidates, n_gaussians: int):
    rows = np.concatenate([np.full(len(c.visible), k) for k, c in enumerate(candidates)] or [[]])
    cols = np.concatenate([c.visible for c in candidates] or [[]])
    return sparse.csr_matrix((np.ones(len(rows)), (rows.astype(int), cols.astype(int))),
                             shape=(len(candidates), n_gaussians))


def overlap_matrix(candidates, n_gaussians: int | None = None) -> np.ndarray:
    """Pairwise Jaccard index of visible sets (0 where both sets are empty)."""
    if n_gaussians is None:
        n_gaussians = 1 + max((int(c.visible.max()) for c in candidates if c.visible.size), default=0)
    inc = _incidence(candidates, n_gaussians)
    inter = (inc @ inc.T).toarray()
    size = np.diag(inter)
    union = size[:, None] + size[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def pair_views(candidates, min_overlap: float = 0.1, max_pairs_per_view: int = 3) -> list[ViewPair]:
    """Top-overlap partners per view, deduplicated as ``a < b`` and sorted by ``(a, b)``."""
    if len(candidates) < 2:
        raise PreconditionError("pairing needs at least two candidates")
    ov = overlap_matrix(candidates)
    keep = {}
    for a in range(len(candidates)):
        others = [b for b in range(len(candidates)) if b != a]
        others.sort(key=lambda b: (-ov[a, b], b))
        picked = [b for b in others if ov[a, b] >= min_overlap and ov[a, b] > 0][:max_pairs_per_view]
        for b in picked:
            keep[(min(a, b), max(a, b))] = float(ov[a, b])
    return [ViewPair(a, b, keep[(a, b)]) for a, b in sorted(keep)]


def view_groups(pairs: list[ViewPair], n_candidates: int, size: int = 4) -> list[list[int]]:
    """One group per paired view: the view plus its ``size - 1`` best partners."""
    partners = {k: [] for k in range(n_candidates)}
    for p in pairs:
        partners[p.a].append((p.overlap, p.b))
        partners[p.b].append((p.overlap, p.a))
    groups, seen = [], set()
    for a in range(n_candidates):
        if not partners[a]:
            continue
        best = sorted(partners[a], key=lambda t: (-t[0], t[1]))[: size - 1]
        group = [a] + [b for _, b in best]
        key = tuple(sorted(group))
        if key not in seen:
            seen.add(key)
            groups.append(group)
    return groups


# ---------------------------------------------------------------------------
# whole plan


def plan_views(scene: GaussianScene, config: PlanConfig = PlanConfig(),
               raster: RasterConfig = DEFAULT_RASTER) -> ViewPlan:
    positions = sample_positions(scene, config.n_positions, config.eye_height, config.voxel,
                                 config.clearance)
    rng = np.random.default_rng(config.seed) if config.pitch_jitter_deg else None
    candidates = []
    for pos in positions:
        for yaw, pitch, cam in candidate_views(pos, scene, config.d_min, config, rng):
            candidates.append(cull_and_crop(cam, scene, config.visibility_threshold, raster, yaw, pitch, pos))
    pairs = pair_views(candidates, config.min_overlap, config.max_pairs_per_view) if len(candidates) > 1 else []
    return ViewPlan(candidates, pairs, positions)


def coverage(plan: ViewPlan, n_gaussians: int) -> float:
    seen = np.zeros(n_gaussians, bool)
    for c in plan.candidates:
        seen[c.visible] = True
    return float(seen.mean()) if n_gaussians else 1.0


def save_plan(plan: ViewPlan, path) -> None:
    """Line-oriented plan file; floats use ``repr`` so reloading is exact."""
    intrinsics, lines = {}, ["# splatdistill view plan v1"]
    cam_lines = []
    for k, c in enumerate(plan.candidates):
        cam = c.camera
        key = (int(cam.width), int(cam.height), *(float(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy)))
        iid = intrinsics.setdefault(key, len(intrinsics))
        x, y, z = c.position if c.position is not None else (float(v) for v in cam.position)
        cam_lines.append(f"camera {k} {x!r} {y!r} {z!r} {float(c.yaw)!r} {float(c.pitch)!r} {iid}")
    for key, iid in intrinsics.items():
        w, h, fx, fy, cx, cy = key
        lines.append(f"intrinsics {iid} {w} {h} {fx!r} {fy!r} {cx!r} {cy!r}")
    lines += cam_lines
    lines.append("pairs")
    lines += [f"pair {p.a} {p.b} {float(p.overlap)!r}" for p in plan.pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_plan(path, scene: GaussianScene | None = None, threshold: float = 1e-6,
              raster: RasterConfig = DEFAULT_RASTER) -> ViewPlan:
    """Read a plan file. With ``scene`` given, visible sets are recomputed."""
    intr, cams, pairs = {}, [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#") or tok[0] == "pairs":
            continue
        try:
            if tok[0] == "intrinsics":
                w, h = int(tok[2]), int(tok[3])
                intr[int(tok[1])] = (w, h, *map(float, tok[4:8]))
            elif tok[0] == "camera":
                pos = np.array([float(t) for t in tok[2:5]])
                cams.append((pos, float(tok[5]), float(tok[6]), int(tok[7])))
            elif tok[0] == "pair":
                pairs.append(ViewPair(int(tok[1]), int(tok[2]), float(tok[3])))
            else:
                raise ValueError(tok[0])
        except (ValueError, IndexError, KeyError) as exc:
            raise FormatError(f"{path}:{n}: malformed plan line ({exc})") from None
    candidates = []
    for pos, yaw, pitch, iid in cams:
        if iid not in intr:
            raise FormatError(f"{path}: camera references unknown intrinsics {iid}")
        w, h, fx, fy, cx, cy = intr[iid]
        base = Camera.from_yaw(pos, yaw, w, h, 90.0, pitch)
        cam = Camera(w, h, fx, fy, cx, cy, base.rotation, base.translation)
        if scene is not None:
            candidates.append(cull_and_crop(cam, scene, threshold, raster, yaw, pitch, pos))
        else:
            candidates.append(ViewCandidate(cam, np.zeros(0, np.int64), None, yaw, pitch, tuple(pos)))
    return ViewPlan(candidates, pairs, np.array([c[0] for c in cams]).reshape(-1, 3))
