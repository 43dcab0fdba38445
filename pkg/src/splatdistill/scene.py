"""Data model for scenes, cameras and teacher maps.

A scene is stored as a struct of arrays (one row per Gaussian). Quaternions
use the ``(w, x, y, z)`` convention of the 3DGS PLY layout. Cameras use the
OpenCV convention (x right, y down, z forward) with a world-to-camera pose.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, FormatError, PreconditionError, SpecError

SH_C0 = 0.28209479177387814
TEACHER_IDS = ("lang", "dino", "pe")

_REQUIRED_PLY_FIELDS = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class Gaussian(NamedTuple):
    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    normal: np.ndarray | None = None


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """Immutable set of Gaussians with optional labels.

    Arrays are copied on construction and marked read-only, so a scene can be
    shared freely between threads.
    """

    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    semantic_labels: np.ndarray | None = None
    instance_labels: np.ndarray | None = None
    f_dc: np.ndarray | None = None

    def __post_init__(self):
        n = len(np.asarray(self.centers).reshape(-1, 3))
        shapes = {
            "centers": (n, 3), "scales": (n, 3), "rotations": (n, 4),
            "opacities": (n,), "colors": (n, 3),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            object.__setattr__(self, name, _frozen(arr))
        for name in ("normals", "f_dc"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(np.asarray(val).reshape(n, 3)))
        for name in ("semantic_labels", "instance_labels"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.int64)
                if val.shape != (n,):
                    raise DataError(f"{name} has length {val.size}, expected {n}")
                object.__setattr__(self, name, _frozen(val, np.int64))

    def __len__(self):
        return self.centers.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        normal = None if self.normals is None else self.normals[i]
        return Gaussian(self.centers[i], self.scales[i], self.rotations[i],
                        float(self.opacities[i]), self.colors[i], normal)

    @property
    def bounds(self) -> np.ndarray:
        """Axis-aligned box ``[[xmin, ymin, zmin], [xmax, ymax, zmax]]``."""
        if len(self) == 0:
            return np.zeros((2, 3))
        return np.stack([self.centers.min(0), self.centers.max(0)])

    @property
    def extent(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def validate(self, tol: float = 1e-6) -> None:
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(qn - 1) > tol):
            raise DataError("quaternions must have unit norm")
        if np.any(self.scales <= 0):
            raise DataError("scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise DataError("opacities must lie in [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise DataError("colors must lie in [0, 1]")

    def subset(self, index) -> GaussianScene:
        """Scene restricted to ``index`` (boolean mask or integer array)."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)

        def take(a):
            return None if a is None else a[index]

        return GaussianScene(
            self.centers[index], self.scales[index], self.rotations[index],
            self.opacities[index], self.colors[index], take(self.normals),
            take(self.semantic_labels), take(self.instance_labels), take(self.f_dc),
        )

    def with_(self, **changes) -> GaussianScene:
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(np.asarray(self.rotation).reshape(3, 3)))
        object.__setattr__(self, "translation", _frozen(np.asarray(self.translation).reshape(3)))
        if self.fx <= 0 or self.fy <= 0:
            raise PreconditionError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise PreconditionError("principal point must lie inside the image")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise PreconditionError("camera rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def resized(self, width: int, height: int) -> Camera:
        """Same viewpoint at a different resolution (pixel centers at integers)."""
        sx, sy = width / self.width, height / self.height
        return Camera(width, height, self.fx * sx, self.fy * sy,
                      (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
                      self.rotation, self.translation)

    @classmethod
    def look_at(cls, position, target, width, height, fov_x_deg=70.0, up=(0, 0, 1)):
        position = np.asarray(position, float)
        forward = np.asarray(target, float) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, (0, 1, 0))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(width, height, fx, fx, (width - 1) / 2, (height - 1) / 2,
                   rot, -rot @ position)

    @classmethod
    def from_yaw(cls, position, yaw, width, height, fov_x_deg=70.0, pitch=0.0):
        """Camera at ``position`` looking along ``yaw`` about +z (radians)."""
        d = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        return cls.look_at(position, np.asarray(position, float) + d, width, height, fov_x_deg)


@dataclass(frozen=True, eq=False)
class TeacherFeatureMap:
    teacher_id: str
    data: np.ndarray  # (height, width, dim)

    def __post_init__(self):
        if self.teacher_id not in TEACHER_IDS:
            raise SpecError(f"unknown teacher {self.teacher_id!r}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DataError("feature map must be height x width x dim")
        if not np.all(np.isfinite(data)):
            raise DataError("feature map contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]

    @property
    def nbytes_f32(self) -> int:
        return self.data.size * 4


# ---------------------------------------------------------------------------
# quaternions


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """``(..., 4)`` unit quaternions ``(w, x, y, z)`` to ``(..., 3, 3)`` matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` with ``w >= 0``."""
    m = np.asarray(m, dtype=np.float64).reshape(-1, 3, 3)
    out = np.empty((len(m), 4))
    for k, r in enumerate(m):
        tr = np.trace(r)
        if tr > 0:
            s = 2 * np.sqrt(tr + 1)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2 * np.sqrt(1 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2 * np.sqrt(1 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2 * np.sqrt(1 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[k] = q if q[0] >= 0 else -q
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


# ---------------------------------------------------------------------------
# PLY


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p, eps=1e-7):
    p = np.clip(p, eps, 1 - eps)
    return np.log(p / (1 - p))


def load_ply(path) -> GaussianScene:
    """Read a binary little-endian 3DGS PLY file.

    Higher-order SH coefficients (``f_rest_*``) are parsed and dropped.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        props, count, fmt = [], None, None
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "end_header":
                break
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    count = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise FormatError(f"{path}: list properties are not supported")
                props.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
        if fmt != "binary_little_endian":
            raise FormatError(f"{path}: only binary_little_endian is supported, got {fmt}")
        if count is None:
            raise FormatError(f"{path}: no vertex element")
        names = [p[0] for p in props]
        for name in _REQUIRED_PLY_FIELDS:
            if name not in names:
                raise FormatError(f"{path}: missing required field {name!r}")
        dtype = np.dtype(props)
        buf = fh.read(count * dtype.itemsize)
        if len(buf) < count * dtype.itemsize:
            raise FormatError(f"{path}: truncated vertex data")
        rec = np.frombuffer(buf, dtype=dtype, count=count)

    def cols(*fields):
        return np.stack([rec[f].astype(np.float64) for f in fields], axis=1)

    used = list(_REQUIRED_PLY_FIELDS)
    has_normals = all(n in names for n in ("nx", "ny", "nz"))
    if has_normals:
        used += ["nx", "ny", "nz"]
    for name in used:
        bad = np.flatnonzero(~np.isfinite(rec[name]))
        if bad.size:
            raise DataError(f"{path}: non-finite {name!r} at element {int(bad[0])}")

    f_dc = cols("f_dc_0", "f_dc_1", "f_dc_2")
    rot = cols("rot_0", "rot_1", "rot_2", "rot_3")
    norm = np.linalg.norm(rot, axis=1, keepdims=True)
    bad = np.flatnonzero(norm[:, 0] == 0)
    if bad.size:
        raise DataError(f"{path}: zero quaternion at element {int(bad[0])}")
    labels = {}
    for key, name in (("semantic_labels", "semantic"), ("instance_labels", "instance")):
        if name in names:
            labels[key] = rec[name].astype(np.int64)
    return GaussianScene(
        centers=cols("x", "y", "z"),
        scales=np.exp(cols("scale_0", "scale_1", "scale_2")),
        rotations=rot / norm,
        opacities=_sigmoid(rec["opacity"].astype(np.float64)),
        colors=np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0),
        normals=cols("nx", "ny", "nz") if has_normals else None,
        f_dc=f_dc,
        **labels,
    )


def save_ply(scene: GaussianScene, path) -> None:
    """Write ``scene`` as a 3DGS PLY (f64 properties, so round trips are exact).

    Labels, when present, are stored as extra ``int`` properties
    ``semantic``/``instance``; standard readers ignore them.
    """
    fields = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
              "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    dtype = [(f, "<f8") for f in fields]
    if scene.semantic_labels is not None:
        dtype.append(("semantic", "<i4"))
    if scene.instance_labels is not None:
        dtype.append(("instance", "<i4"))
    n = len(scene)
    rec = np.zeros(n, dtype=dtype)
    for k, f in enumerate("xyz"):
        rec[f] = scene.centers[:, k]
    normals = scene.normals if scene.normals is not None else np.zeros((n, 3))
    for k, f in enumerate(("nx", "ny", "nz")):
        rec[f] = normals[:, k]
    f_dc = (scene.colors - 0.5) / SH_C0
    if scene.f_dc is not None and np.allclose(np.clip(0.5 + SH_C0 * scene.f_dc, 0, 1), scene.colors):
        f_dc = scene.f_dc
    for k in range(3):
        rec[f"f_dc_{k}"] = f_dc[:, k]
        rec[f"scale_{k}"] = np.log(scene.scales[:, k])
    for k in range(4):
        rec[f"rot_{k}"] = scene.rotations[:, k]
    rec["opacity"] = _logit(scene.opacities)
    if scene.semantic_labels is not None:
        rec["semantic"] = scene.semantic_labels
    if scene.instance_labels is not None:
        rec["instance"] = scene.instance_labels

    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property double {f}" for f in fields]
    if scene.semantic_labels is not None:
        lines.append("property int semantic")
    if scene.instance_labels is not None:
        lines.append("property int instance")
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# CHFM teacher feature maps


def save_chfm(fmap: TeacherFeatureMap, path) -> int:
    """Write a feature map; returns the number of bytes written."""
    h, w, d = fmap.data.shape
    payload = struct.pack("<4sIIII", b"CHFM", 1, h, w, d)
    payload += np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def load_chfm(path, teacher_id: str) -> TeacherFeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != b"CHFM":
        raise FormatError(f"{path}: bad CHFM magic")
    version, h, w, d = struct.unpack_from("<IIII", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported CHFM version {version}")
    if len(raw) != 20 + 4 * h * w * d:
        raise FormatError(f"{path}: CHFM payload size mismatch")
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(h, w, d)
    return TeacherFeatureMap(teacher_id, data.astype(np.float64))
