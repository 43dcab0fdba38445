"""Synthetic labeled scenes and prototype teachers.

Layouts are plain dicts so they round-trip through YAML/JSON configs::

    {"primitives": [{"kind": "box", "center": [0, 0, 0.5], "size": [1, 1, 1],
                     "count": 300, "class_id": 2, "instance_id": 0,
                     "color": [0.8, 0.2, 0.2]}],
     "color_jitter": 0.04, "opacity_range": [0.6, 1.0]}

``kind`` is one of ``box`` (surface samples, ``open_bottom`` optional),
``sphere`` (``radius``) or ``plane`` (``size`` = two extents, ``axis`` =
normal axis ``"x"|"y"|"z"``, optional ``holes`` = rectangles
``[u0, v0, u1, v1]`` in world coordinates left unsampled).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import PreconditionError, SpecError
from .raster import DEFAULT_RASTER, RasterConfig, composite, rasterize
from .scene import TEACHER_IDS, Camera, GaussianScene, TeacherFeatureMap, rotmat_to_quat

_AXES = {"x": 0, "y": 1, "z": 2}


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _frame_from_normal(n: np.ndarray, rng) -> np.ndarray:
    """Rotation matrices whose third column is ``n``, random spin about it."""
    helper = np.where(np.abs(n[:, [2]]) < 0.9, [[0, 0, 1.0]], [[1.0, 0, 0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    phi = rng.uniform(0, 2 * np.pi, len(n))[:, None]
    a = np.cos(phi) * t1 + np.sin(phi) * t2
    b = np.cross(n, a)
    return np.stack([a, b, n], axis=2)


def _sample_box(prim, count, rng):
    c = np.asarray(prim["center"], float)
    half = 0.5 * np.asarray(prim["size"], float)
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            if prim.get("open_bottom") and axis == 2 and sign < 0:
                continue
            u, v = [k for k in range(3) if k != axis]
            faces.append((axis, sign, u, v, 4 * half[u] * half[v]))
    areas = np.array([f[4] for f in faces])
    pick = rng.choice(len(faces), size=count, p=areas / areas.sum())
    pts = np.empty((count, 3))
    nrm = np.zeros((count, 3))
    uv = rng.uniform(-1, 1, (count, 2))
    for k, (axis, sign, u, v, _) in enumerate(faces):
        m = pick == k
        pts[m, axis] = sign * half[axis]
        pts[m, u] = uv[m, 0] * half[u]
        pts[m, v] = uv[m, 1] * half[v]
        nrm[m, axis] = sign
    return c + pts, nrm, areas.sum()


def _sample_sphere(prim, count, rng):
    c = np.asarray(prim["center"], float)
    r = float(prim["radius"])
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return c + r * d, d, 4 * np.pi * r * r


def _sample_plane(prim, count, rng):
    c = np.asarray(prim["center"], float)
    axis = _AXES[prim.get("axis", "z")]
    u, v = [k for k in range(3) if k != axis]
    su, sv = (float(s) for s in prim["size"])
    holes = np.asarray(prim.get("holes", []), float).reshape(-1, 4)
    area = su * sv - np.sum((holes[:, 2] - holes[:, 0]) * (holes[:, 3] - holes[:, 1]))
    pts = np.tile(c, (count, 1))
    todo = np.arange(count)
    while todo.size:
        pts[todo, u] = c[u] + rng.uniform(-0.5, 0.5, todo.size) * su
        pts[todo, v] = c[v] + rng.uniform(-0.5, 0.5, todo.size) * sv
        inside = np.zeros(todo.size, bool)
        for x0, y0, x1, y1 in holes:
            p = pts[todo]
            inside |= (p[:, u] >= x0) & (p[:, u] <= x1) & (p[:, v] >= y0) & (p[:, v] <= y1)
        todo = todo[inside]
    nrm = np.zeros((count, 3))
    nrm[:, axis] = 1.0
    return pts, nrm, area


_SAMPLERS = {"box": _sample_box, "sphere": _sample_sphere, "plane": _sample_plane}


def synth_scene(layout: dict, seed: int) -> GaussianScene:
    """Sample surface Gaussians for every primitive in ``layout``."""
    prims = layout.get("primitives") or []
    if not prims:
        raise SpecError("layout has no primitives")
    rng = np.random.default_rng(seed)
    jitter = float(layout.get("color_jitter", 0.04))
    lo_op, hi_op = layout.get("opacity_range", (0.6, 1.0))
    flat = float(layout.get("normal_scale", 0.15))
    tangential = float(layout.get("tangent_scale", 0.6))
    parts = {k: [] for k in ("x", "s", "q", "a", "c", "n", "sem", "ins")}
    for prim in prims:
        kind = prim.get("kind")
        if kind not in _SAMPLERS:
            raise SpecError(f"unknown primitive kind {kind!r}")
        count = int(prim["count"])
        if count <= 0:
            raise SpecError("primitive count must be positive")
        pts, nrm, area = _SAMPLERS[kind](prim, count, rng)
        spacing = np.sqrt(area / count)
        frames = _frame_from_normal(nrm, rng)
        scale = np.tile([tangential * spacing, tangential * spacing, flat * spacing], (count, 1))
        scale *= rng.uniform(0.8, 1.2, (count, 1))
        color = np.clip(np.asarray(prim.get("color", (0.5, 0.5, 0.5)), float)
                        + rng.normal(0, jitter, (count, 3)), 0, 1)
        parts["x"].append(pts)
        parts["s"].append(scale)
        parts["q"].append(rotmat_to_quat(frames))
        parts["a"].append(rng.uniform(lo_op, hi_op, count))
        parts["c"].append(color)
        parts["n"].append(nrm)
        parts["sem"].append(np.full(count, int(prim.get("class_id", 0))))
        parts["ins"].append(np.full(count, int(prim.get("instance_id", 0))))
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return GaussianScene(cat["x"], cat["s"], cat["q"], cat["a"], cat["c"], normals=cat["n"],
                         semantic_labels=cat["sem"], instance_labels=cat["ins"])


def prototypes(teacher_id: str, n_labels: int, dim: int, seed: int) -> np.ndarray:
    """Seeded unit prototypes, orthonormal when ``dim >= n_labels``."""
    if teacher_id not in TEACHER_IDS:
        raise SpecError(f"unknown teacher {teacher_id!r}")
    rng = np.random.default_rng(_stable_seed("proto", seed, teacher_id, dim))
    raw = rng.normal(size=(max(n_labels, 1), dim))[:n_labels]
    if n_labels and dim >= n_labels:
        q, r = np.linalg.qr(raw.T)
        q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
        return q.T.copy()
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def synth_teacher(scene: GaussianScene, camera: Camera, teacher_id: str, dim: int,
                  noise_sigma: float, seed: int, *, label_source: str = "semantic",
                  n_labels: int | None = None, weights=None,
                  config: RasterConfig = DEFAULT_RASTER) -> TeacherFeatureMap:
    """Render label prototypes through the compositing weights, plus pixel noise.

    ``label_source="instance"`` uses instance ids instead of classes, giving an
    object-aware teacher. Pixels with total weight below 1e-4 are zero.
    """
    labels = scene.semantic_labels if label_source == "semantic" else scene.instance_labels
    if labels is None:
        raise PreconditionError(f"scene has no {label_source} labels")
    n_labels = int(labels.max()) + 1 if n_labels is None else n_labels
    proto = prototypes(teacher_id, n_labels, dim, seed)
    if weights is None:
        weights = rasterize(scene, camera, config)
    feat = composite(weights, proto[labels])
    if noise_sigma > 0:
        rng = np.random.default_rng(_stable_seed("noise", seed, teacher_id, dim,
                                                 camera.rotation.tobytes(), camera.translation.tobytes()))
        feat = feat + noise_sigma * rng.normal(size=feat.shape)
    feat[weights.total() < 1e-4] = 0.0
    return TeacherFeatureMap(teacher_id, feat)


# ---------------------------------------------------------------------------
# bundled layouts and camera rigs

BACKGROUND_CLASSES = (0, 1)


def tabletop_layout(variant: int = 0, count_scale: float = 1.0, palette_shift: float = 0.0) -> dict:
    """Small labeled scene: a floor with a back wall, plus several objects.

    Classes: 0 floor, 1 wall (background), 2 box, 3 ball, 4 cabinet, 5 lamp.
    ``variant`` moves objects around; ``palette_shift`` offsets all colors to
    fake a domain gap.
    """
    rng = np.random.default_rng(1000 + variant)
    n = lambda k: max(8, int(round(k * count_scale)))  # noqa: E731

    def col(c):
        return list(np.clip(np.asarray(c) + palette_shift, 0, 1))

    def jit(p, s=0.25):
        return [p[0] + rng.uniform(-s, s), p[1] + rng.uniform(-s, s), p[2]]

    prims = [
        {"kind": "plane", "center": [0, 0, 0], "size": [4, 4], "axis": "z", "count": n(420),
         "class_id": 0, "instance_id": 0, "color": col([0.55, 0.5, 0.45])},
        {"kind": "plane", "center": [0, 2.0, 1.0], "size": [4, 2], "axis": "y", "count": n(260),
         "class_id": 1, "instance_id": 1, "color": col([0.8, 0.8, 0.75])},
        {"kind": "box", "center": jit([-1.0, -0.6, 0.3]), "size": [0.6, 0.6, 0.6], "count": n(200),
         "class_id": 2, "instance_id": 2, "color": col([0.8, 0.25, 0.2]), "open_bottom": True},
        {"kind": "box", "center": jit([0.9, 0.9, 0.3]), "size": [0.5, 0.7, 0.6], "count": n(200),
         "class_id": 2, "instance_id": 3, "color": col([0.75, 0.3, 0.25]), "open_bottom": True},
        {"kind": "sphere", "center": jit([0.8, -0.8, 0.35]), "radius": 0.35, "count": n(200),
         "class_id": 3, "instance_id": 4, "color": col([0.2, 0.35, 0.8])},
        {"kind": "sphere", "center": jit([-0.3, 0.6, 0.25]), "radius": 0.25, "count": n(140),
         "class_id": 3, "instance_id": 5, "color": col([0.25, 0.4, 0.75])},
        {"kind": "box", "center": jit([-1.2, 1.3, 0.6]), "size": [0.8, 0.4, 1.2], "count": n(260),
         "class_id": 4, "instance_id": 6, "color": col([0.3, 0.65, 0.3]), "open_bottom": True},
        {"kind": "box", "center": jit([0.1, -1.2, 0.2]), "size": [0.3, 0.3, 0.4], "count": n(120),
         "class_id": 5, "instance_id": 7, "color": col([0.85, 0.8, 0.2]), "open_bottom": True},
    ]
    return {"primitives": prims, "color_jitter": 0.04, "opacity_range": [0.6, 1.0]}


def two_room_layout(count_scale: float = 1.0) -> dict:
    """Two 4x4 m rooms side by side, joined by a doorway, with furniture."""
    n = lambda k: max(8, int(round(k * count_scale)))  # noqa: E731
    wall = [0.8, 0.8, 0.75]
    prims = [
        # floors leave out the footprints of the furniture standing on them
        {"kind": "plane", "center": [-2, 0, 0], "size": [4, 4], "axis": "z", "count": n(300),
         "class_id": 0, "instance_id": 0, "color": [0.55, 0.5, 0.45],
         "holes": [[-3.2, -1.4, -2.4, -0.6], [-1.8, 0.7, -1.2, 1.3]]},
        {"kind": "plane", "center": [2, 0, 0], "size": [4, 4], "axis": "z", "count": n(300),
         "class_id": 0, "instance_id": 1, "color": [0.5, 0.45, 0.4],
         "holes": [[2.0, 0.9, 3.0, 1.5], [1.65, -1.35, 2.35, -0.65]]},
        # outer walls
        {"kind": "plane", "center": [0, -2, 1.25], "size": [8, 2.5], "axis": "y", "count": n(300),
         "class_id": 1, "instance_id": 2, "color": wall},
        {"kind": "plane", "center": [0, 2, 1.25], "size": [8, 2.5], "axis": "y", "count": n(300),
         "class_id": 1, "instance_id": 3, "color": wall},
        {"kind": "plane", "center": [-4, 0, 1.25], "size": [4, 2.5], "axis": "x", "count": n(150),
         "class_id": 1, "instance_id": 4, "color": wall},
        {"kind": "plane", "center": [4, 0, 1.25], "size": [4, 2.5], "axis": "x", "count": n(150),
         "class_id": 1, "instance_id": 5, "color": wall},
        # dividing wall with a 1.2 m doorway in the middle
        {"kind": "plane", "center": [0, -1.3, 1.25], "size": [1.4, 2.5], "axis": "x", "count": n(80),
         "class_id": 1, "instance_id": 6, "color": wall},
        {"kind": "plane", "center": [0, 1.3, 1.25], "size": [1.4, 2.5], "axis": "x", "count": n(80),
         "class_id": 1, "instance_id": 7, "color": wall},
        {"kind": "box", "center": [-2.8, -1.0, 0.4], "size": [0.8, 0.8, 0.8], "count": n(160),
         "class_id": 2, "instance_id": 8, "color": [0.8, 0.25, 0.2], "open_bottom": True},
        {"kind": "sphere", "center": [-1.5, 1.0, 0.3], "radius": 0.3, "count": n(120),
         "class_id": 3, "instance_id": 9, "color": [0.2, 0.35, 0.8]},
        {"kind": "box", "center": [2.5, 1.2, 0.5], "size": [1.0, 0.6, 1.0], "count": n(160),
         "class_id": 4, "instance_id": 10, "color": [0.3, 0.65, 0.3], "open_bottom": True},
        {"kind": "sphere", "center": [2.0, -1.0, 0.35], "radius": 0.35, "count": n(120),
         "class_id": 3, "instance_id": 11, "color": [0.25, 0.4, 0.75]},
    ]
    return {"primitives": prims, "color_jitter": 0.04, "opacity_range": [0.6, 1.0]}


def orbit_cameras(scene: GaussianScene, n_views: int, width: int, height: int,
                  radius: float | None = None, height_above: float = 1.8,
                  fov_x_deg: float = 70.0, phase: float = 0.0) -> list[Camera]:
    """Cameras on a horizontal circle around the scene, looking at its center."""
    lo, hi = scene.bounds
    center = 0.5 * (lo + hi)
    if radius is None:
        radius = 0.9 * np.linalg.norm((hi - lo)[:2])
    cams = []
    for k in range(n_views):
        ang = phase + 2 * np.pi * k / n_views
        pos = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height_above])
        target = center.copy()
        target[2] = lo[2] + 0.3
        cams.append(Camera.look_at(pos, target, width, height, fov_x_deg))
    return cams


def isolated_layout(count: int = 200, spacing: float = 12.0) -> dict:
    """Floating objects far apart, one class each (no shared pixels under object rigs)."""
    prims = []
    for k in range(5):
        c = [spacing * k, 0.0, 0.0]
        if k % 2 == 0:
            prims.append({"kind": "sphere", "center": c, "radius": 0.45, "count": count,
                          "class_id": k, "instance_id": k, "color": [0.6, 0.15 * k, 0.3]})
        else:
            prims.append({"kind": "box", "center": c, "size": [0.7, 0.7, 0.7], "count": count,
                          "class_id": k, "instance_id": k, "color": [0.2, 0.3, 0.15 * k]})
    return {"primitives": prims, "color_jitter": 0.04, "opacity_range": [0.6, 1.0]}


def object_rig(center, n_views: int, width: int, height: int, radius: float = 2.0,
               fov_x_deg: float = 50.0) -> list[Camera]:
    """Cameras spread over a sphere (Fibonacci lattice) looking at ``center``."""
    center = np.asarray(center, float)
    cams = []
    golden = np.pi * (3 - np.sqrt(5))
    for k in range(n_views):
        z = 1 - 2 * (k + 0.5) / n_views
        r = np.sqrt(1 - z * z)
        d = np.array([r * np.cos(golden * k), r * np.sin(golden * k), z])
        cams.append(Camera.look_at(center + radius * d, center, width, height, fov_x_deg))
    return cams
