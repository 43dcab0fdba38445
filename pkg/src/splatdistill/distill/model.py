"""Shared per-Gaussian encoder with one projector head per teacher.

The encoder is a point-wise MLP interleaved with k-nearest-neighbour mean
pooling, so every output row depends only on its Gaussian and its spatial
neighbourhood. Heads map the shared latent into each teacher's standardized
feature space.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ConfigError, FormatError, PreconditionError, ShapeError
from ..scene import GaussianScene
from .nn import gelu, gelu_grad, init_linear, knn_pool_matrix, layer_norm, layer_norm_backward

INPUT_MODES = ("gs_full", "pc_variant")


@dataclass(frozen=True)
class EncoderConfig:
    input_mode: str = "gs_full"
    hidden_widths: tuple = (64, 64, 64)
    out_dim: int = 64
    neighborhood_k: int = 16
    estimate_normals: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}")
        if not self.hidden_widths:
            raise ConfigError("hidden_widths must be non-empty")
        if self.out_dim < 8:
            raise ConfigError("out_dim must be at least 8")
        if self.neighborhood_k < 1:
            raise ConfigError("neighborhood_k must be positive")

    @property
    def input_dim(self) -> int:
        return 14 if self.input_mode == "gs_full" else 9


def estimate_normals(centers: np.ndarray, k: int = 16) -> np.ndarray:
    """Smallest-variance direction of each point's k-neighbourhood, sign-canonicalized."""
    n = len(centers)
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1))
    k = min(k, n)
    _, idx = cKDTree(centers).query(centers, k=k)
    nb = centers[np.asarray(idx).reshape(n, k)]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    normals = np.linalg.eigh(cov)[1][:, :, 0]
    flip = np.take_along_axis(normals, np.argmax(np.abs(normals), axis=1)[:, None], 1) < 0
    return np.where(flip, -normals, normals)


def input_features(scene: GaussianScene, config: EncoderConfig) -> np.ndarray:
    if config.input_mode == "gs_full":
        q = scene.rotations * np.where(scene.rotations[:, :1] < 0, -1.0, 1.0)
        return np.column_stack([scene.centers, scene.colors, scene.opacities, q, np.log(scene.scales)])
    normals = scene.normals
    if normals is None:
        if not config.estimate_normals:
            raise PreconditionError("pc_variant needs normals; enable estimate_normals or provide them")
        normals = estimate_normals(scene.centers, config.neighborhood_k)
    return np.column_stack([scene.centers, scene.colors, normals])


@dataclass
class ForwardCache:
    graph: object
    x0: np.ndarray
    pre: list  # pre-activations per hidden layer
    inputs: list  # layer inputs per hidden layer
    h_last: np.ndarray
    z: np.ndarray
    heads: dict = field(default_factory=dict)


class DistillModel:
    """Encoder parameters ``enc.*`` plus heads ``head.<teacher>.*``; all float64."""

    def __init__(self, encoder: EncoderConfig, teacher_dims: dict, head_hidden: int = 64, seed: int = 0):
        self.encoder = encoder
        self.teacher_dims = {str(k): int(v) for k, v in teacher_dims.items()}
        self.head_hidden = int(head_hidden)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        p = {}
        widths = encoder.hidden_widths
        p["enc.stem.W"], p["enc.stem.b"] = init_linear(rng, encoder.input_dim, widths[0])
        for j, w in enumerate(widths[1:]):
            p[f"enc.block{j}.W"], p[f"enc.block{j}.b"] = init_linear(rng, 2 * widths[j], w)
        p["enc.out.W"], p["enc.out.b"] = init_linear(rng, widths[-1], encoder.out_dim)
        for tid, d in self.teacher_dims.items():
            p[f"head.{tid}.l1.W"], p[f"head.{tid}.l1.b"] = init_linear(rng, encoder.out_dim, head_hidden)
            p[f"head.{tid}.ln.g"] = np.ones(head_hidden)
            p[f"head.{tid}.ln.b"] = np.zeros(head_hidden)
            p[f"head.{tid}.l2.W"], p[f"head.{tid}.l2.b"] = init_linear(rng, head_hidden, d)
        self.params = p
        self.input_mean = np.zeros(encoder.input_dim)
        self.input_std = np.ones(encoder.input_dim)

    # -- configuration ---------------------------------------------------
    def config_dict(self) -> dict:
        enc = asdict(self.encoder)
        enc["hidden_widths"] = list(enc["hidden_widths"])
        return {"encoder": enc, "teacher_dims": self.teacher_dims, "head_hidden": self.head_hidden,
                "seed": self.seed}

    def config_digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.config_dict(), sort_keys=True).encode()).digest()

    def copy(self) -> DistillModel:
        other = DistillModel.__new__(DistillModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.input_mean = self.input_mean.copy()
        other.input_std = self.input_std.copy()
        return other

    def fit_input_stats(self, scenes) -> None:
        """Fix the input standardization from training scenes (never refit per crop)."""
        feats = np.concatenate([input_features(s, self.encoder) for s in scenes])
        self.input_mean = feats.mean(axis=0)
        self.input_std = np.maximum(feats.std(axis=0), 1e-6)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward ---------------------------------------------------------
    def graph(self, scene: GaussianScene):
        return knn_pool_matrix(scene.centers, self.encoder.neighborhood_k)

    def encode(self, scene: GaussianScene, graph=None, cache: bool = False):
        p = self.params
        g = self.graph(scene) if graph is None else graph
        x0 = (input_features(scene, self.encoder) - self.input_mean) / self.input_std
        inputs, pre = [x0], []
        a = x0 @ p["enc.stem.W"] + p["enc.stem.b"]
        pre.append(a)
        h = gelu(a)
        for j in range(len(self.encoder.hidden_widths) - 1):
            c = np.hstack([h, g @ h])
            inputs.append(c)
            a = c @ p[f"enc.block{j}.W"] + p[f"enc.block{j}.b"]
            pre.append(a)
            h = gelu(a)
        z = h @ p["enc.out.W"] + p["enc.out.b"]
        if not cache:
            return z
        return z, ForwardCache(g, x0, pre, inputs, h, z)

    def head(self, tid: str, z: np.ndarray, cache: ForwardCache | None = None) -> np.ndarray:
        if tid not in self.teacher_dims:
            raise ConfigError(f"model has no head for teacher {tid!r}")
        p = self.params
        u = z @ p[f"head.{tid}.l1.W"] + p[f"head.{tid}.l1.b"]
        v, ln = layer_norm(u, p[f"head.{tid}.ln.g"], p[f"head.{tid}.ln.b"])
        a = gelu(v)
        y = a @ p[f"head.{tid}.l2.W"] + p[f"head.{tid}.l2.b"]
        if cache is not None:
            cache.heads[tid] = (v, ln, a)
        return y

    def forward(self, scene: GaussianScene, teachers=None, graph=None):
        """Latents ``Z`` and per-teacher predictions, plus the cache :meth:`backward` needs."""
        z, cache = self.encode(scene, graph, cache=True)
        teachers = self.teacher_dims if teachers is None else teachers
        return z, {t: self.head(t, z, cache) for t in teachers}, cache

    def predict(self, scene: GaussianScene, teacher: str) -> np.ndarray:
        return self.head(teacher, self.encode(scene))

    # -- backward --------------------------------------------------------
    def backward(self, cache: ForwardCache, dpred: dict, dz: np.ndarray | None = None,
                 train_heads: bool = True) -> dict:
        """Parameter gradients given ``dL/dprediction`` per teacher (and optionally ``dL/dZ``)."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dz = np.zeros_like(cache.z) if dz is None else dz.copy()
        for tid, dy in dpred.items():
            v, ln, a = cache.heads[tid]
            if dy.shape != (len(cache.z), self.teacher_dims[tid]):
                raise ShapeError(f"gradient for {tid!r} has shape {dy.shape}")
            if train_heads:
                grads[f"head.{tid}.l2.W"] += a.T @ dy
                grads[f"head.{tid}.l2.b"] += dy.sum(axis=0)
            dv = (dy @ p[f"head.{tid}.l2.W"].T) * gelu_grad(v)
            du, dg, db = layer_norm_backward(dv, p[f"head.{tid}.ln.g"], ln)
            if train_heads:
                grads[f"head.{tid}.ln.g"] += dg
                grads[f"head.{tid}.ln.b"] += db
                grads[f"head.{tid}.l1.W"] += cache.z.T @ du
                grads[f"head.{tid}.l1.b"] += du.sum(axis=0)
            dz += du @ p[f"head.{tid}.l1.W"].T

        grads["enc.out.W"] += cache.h_last.T @ dz
        grads["enc.out.b"] += dz.sum(axis=0)
        dh = dz @ p["enc.out.W"].T
        n_blocks = len(self.encoder.hidden_widths) - 1
        for j in reversed(range(n_blocks)):
            da = dh * gelu_grad(cache.pre[j + 1])
            c = cache.inputs[j + 1]
            grads[f"enc.block{j}.W"] += c.T @ da
            grads[f"enc.block{j}.b"] += da.sum(axis=0)
            dc = da @ p[f"enc.block{j}.W"].T
            w = dc.shape[1] // 2
            dh = dc[:, :w] + cache.graph.T @ dc[:, w:]
        da = dh * gelu_grad(cache.pre[0])
        grads["enc.stem.W"] += cache.x0.T @ da
        grads["enc.stem.b"] += da.sum(axis=0)
        return grads


# ---------------------------------------------------------------------------
# checkpoint: "CHMD" | u32 version | 32-byte config digest | u32 json length |
# config json | u32 record count | records (u16 name length, name, u8 ndim,
# u32 dims..., f32 data)

_CHMD_VERSION = 1


def save_checkpoint(model: DistillModel, path) -> int:
    cfg = json.dumps(model.config_dict(), sort_keys=True).encode()
    records = dict(model.params)
    records["buf.input_mean"] = model.input_mean
    records["buf.input_std"] = model.input_std
    out = [struct.pack("<4sI", b"CHMD", _CHMD_VERSION), model.config_digest(),
           struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name])
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, "<f4").tobytes())
    payload = b"".join(out)
    Path(path).write_bytes(payload)
    return len(payload)


def load_checkpoint(path) -> DistillModel:
    raw = Path(path).read_bytes()
    try:
        magic, version = struct.unpack_from("<4sI", raw, 0)
        if magic != b"CHMD":
            raise FormatError(f"{path}: bad CHMD magic")
        if version != _CHMD_VERSION:
            raise FormatError(f"{path}: unsupported CHMD version {version}")
        digest = raw[8:40]
        (n_cfg,) = struct.unpack_from("<I", raw, 40)
        cfg = json.loads(raw[44:44 + n_cfg])
        off = 44 + n_cfg
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        records = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2: off + 2 + n_name].decode()
            off += 2 + n_name
            (ndim,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{ndim}I", raw, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            records[name] = np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(np.float64)
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt CHMD file ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in CHMD file")
    enc = cfg["encoder"]
    model = DistillModel(EncoderConfig(**enc), cfg["teacher_dims"], cfg["head_hidden"], cfg["seed"])
    if model.config_digest() != digest:
        raise FormatError(f"{path}: config digest mismatch")
    for name, arr in records.items():
        if name == "buf.input_mean":
            model.input_mean = arr
        elif name == "buf.input_std":
            model.input_std = arr
        elif name in model.params and model.params[name].shape == arr.shape:
            model.params[name] = arr
        else:
            raise FormatError(f"{path}: unexpected tensor {name!r} {arr.shape}")
    return model
