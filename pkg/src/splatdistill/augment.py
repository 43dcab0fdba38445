"""Train-time scene augmentations that respect how splats render.

``rendering_equivalent`` moves mostly translucent splats along their own
principal axes, so the rendered images barely change. ``immature_manifold``
inflates a random subset of splats, imitating an earlier, blurrier stage of
scene optimization. ``rigid_transform`` rotates the scene about the gravity
axis; ``transform_camera`` moves a camera with it so the render is unchanged.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .scene import Camera, GaussianScene, quat_multiply, quat_to_rotmat

DEFAULT_EPSILON = 0.05
DEFAULT_GAMMA = 0.3
DEFAULT_RHO = 0.3


def rendering_equivalent(scene: GaussianScene, epsilon: float = DEFAULT_EPSILON,
                         seed: int = 0) -> GaussianScene:
    """Covariance-aware center noise: ``x + R diag(s) eta``, ``eta ~ N(0, (eps (1 - alpha))^2)``."""
    if not 0.0 <= epsilon <= 0.5:
        raise ConfigError(f"epsilon must lie in [0, 0.5], got {epsilon}")
    if epsilon == 0.0 or len(scene) == 0:
        return scene
    rng = np.random.default_rng(seed)
    eta = rng.normal(size=(len(scene), 3)) * (epsilon * (1.0 - scene.opacities))[:, None]
    offset = np.einsum("nij,nj->ni", quat_to_rotmat(scene.rotations), scene.scales * eta)
    return scene.with_(centers=scene.centers + offset)


def immature_manifold(scene: GaussianScene, gamma: float = DEFAULT_GAMMA, rho: float = DEFAULT_RHO,
                      seed: int = 0, temper_opacity: bool = True) -> GaussianScene:
    """Inflate a seeded ``rho`` fraction of splats by ``1 + gamma * u`` per axis."""
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    n = len(scene)
    if n == 0:
        return scene
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=max(1, int(round(rho * n))), replace=False)
    u = rng.uniform(0.0, 1.0, (len(chosen), 3))
    # a zero draw would leave an axis unchanged; redraw those (probability ~0)
    while np.any(u == 0.0):
        u[u == 0.0] = rng.uniform(0.0, 1.0, int(np.sum(u == 0.0)))
    factor = 1.0 + gamma * u
    scales = scene.scales.copy()
    scales[chosen] *= factor
    opac = scene.opacities.copy()
    if temper_opacity:
        opac[chosen] /= 1.0 + gamma * u.mean(axis=1)
    return scene.with_(scales=scales, opacities=np.clip(opac, 0.0, 1.0))


def point_jitter(scene: GaussianScene, sigma: float, seed: int = 0) -> GaussianScene:
    """Isotropic center jitter of the point-cloud kind; kept only as a comparison baseline."""
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    return scene.with_(centers=scene.centers + sigma * rng.normal(size=scene.centers.shape))


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rigid_transform(scene: GaussianScene, yaw: float = 0.0, translation=(0.0, 0.0, 0.0)) -> GaussianScene:
    """Rotate by ``yaw`` radians about +z, then translate."""
    rz = _yaw_matrix(yaw)
    t = np.asarray(translation, dtype=np.float64)
    qz = np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
    changes = {
        "centers": scene.centers @ rz.T + t,
        "rotations": quat_multiply(np.broadcast_to(qz, scene.rotations.shape), scene.rotations),
    }
    if scene.normals is not None:
        changes["normals"] = scene.normals @ rz.T
    return scene.with_(**changes)


def transform_camera(camera: Camera, yaw: float = 0.0, translation=(0.0, 0.0, 0.0)) -> Camera:
    """The camera that sees ``rigid_transform(scene, yaw, translation)`` as ``camera`` saw ``scene``."""
    rz = _yaw_matrix(yaw)
    rot = camera.rotation @ rz.T
    trans = camera.translation - rot @ np.asarray(translation, dtype=np.float64)
    return Camera(camera.width, camera.height, camera.fx, camera.fy, camera.cx, camera.cy, rot, trans)


# image metrics used to check the augmentation contracts

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


def laplacian_energy(image: np.ndarray) -> float:
    """Sum of squared discrete Laplacian responses, summed over channels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return float(sum(np.sum(ndimage.laplace(img[..., c], mode="nearest") ** 2)
                     for c in range(img.shape[2])))
