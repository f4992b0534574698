"""3D Gaussian primitives and their projection to screen-space splats.

The cloud stores unconstrained parameterisations (log scales, opacity logits)
so plain gradient steps keep every derived quantity valid. ``project`` is the
forward half of the differentiable pipeline; ``project_backward`` chains
screen-space gradients back onto the cloud parameters, including the
dependence of the projected covariance on position through the perspective
Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Camera

# Low-pass floor added to both diagonal entries of every projected covariance
# (pixels^2), and the near plane (world units).
LOWPASS = 0.3
Z_NEAR = 0.01
# Mahalanobis radius containing 99% of a 2D Gaussian: sqrt(-2 ln 0.01).
EXTENT_SIGMA = 3.0348542587702925


@dataclass
class GaussianCloud:
    """Explicit object model: N Gaussians with constant (degree-0) colors."""

    positions: np.ndarray  # (N, 3) world units
    rotations: np.ndarray  # (N, 4) unit quaternions (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) linear RGB

    PARAM_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in self.PARAM_FIELDS))

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)


@dataclass
class Splats:
    """Screen-space 2D Gaussians, one row per surviving source Gaussian.

    ``cov2d`` already includes the low-pass floor. Rows keep the source order
    of the cloud.
    """

    source_index: np.ndarray  # (M,) int
    mean2d: np.ndarray  # (M, 2) pixels, (u, v) = (col-axis, row-axis)
    cov2d: np.ndarray  # (M, 2, 2) pixels^2, symmetric
    depth_z: np.ndarray  # (M,) camera-space z
    dist_r: np.ndarray  # (M,) Euclidean camera distance
    opacity: np.ndarray  # (M,) in (0, 1)
    color: np.ndarray  # (M, 3)

    @property
    def m(self) -> int:
        return len(self.depth_z)


@dataclass
class SplatGrads:
    """Gradients w.r.t. every Splats field (cov2d in full-matrix convention)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth_z: np.ndarray
    dist_r: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    # Sum over pixels of the norm of each pixel's mean2d gradient
    # contribution; drives densification.
    abs_mean2d: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "SplatGrads":
        return cls(
            mean2d=np.zeros((m, 2)),
            cov2d=np.zeros((m, 2, 2)),
            depth_z=np.zeros(m),
            dist_r=np.zeros(m),
            opacity=np.zeros(m),
            color=np.zeros((m, 3)),
            abs_mean2d=np.zeros(m),
        )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rot(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; normalises defensively."""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rot_partials(qn: np.ndarray):
    """d R / d q_hat for normalised quaternions (..., 4) -> (..., 4, 3, 3)."""
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    zero = np.zeros_like(w)
    P = np.empty(qn.shape[:-1] + (4, 3, 3))
    P[..., 0, :, :] = 2 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    P[..., 1, :, :] = 2 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2 * x, -w], axis=-1),
            np.stack([z, w, -2 * x], axis=-1),
        ],
        axis=-2,
    )
    P[..., 2, :, :] = 2 * np.stack(
        [
            np.stack([-2 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2 * y], axis=-1),
        ],
        axis=-2,
    )
    P[..., 3, :, :] = 2 * np.stack(
        [
            np.stack([-2 * z, -w, x], axis=-1),
            np.stack([w, -2 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return P


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R diag(exp(log_scale))^2 R^T of one Gaussian."""
    R = quat_to_rot(np.asarray(rotation, dtype=np.float64))
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (R * s2[None, :]) @ R.T


def _world_covariances(cloud: GaussianCloud) -> np.ndarray:
    R = quat_to_rot(cloud.rotations)
    s2 = np.exp(2.0 * cloud.log_scales)
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


def project(cloud: GaussianCloud, cam: Camera) -> Splats:
    """Project the cloud onto the camera, culling what cannot contribute.

    A Gaussian is dropped when its camera depth leaves (Z_NEAR, r_max] or when
    its 99% screen extent misses the image. Output rows preserve source order.
    """
    p = cam.world_to_camera(cloud.positions)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = (z > Z_NEAR) & (z <= cam.r_max)
        u = cam.fx * p[:, 0] / z + cam.cx
        v = cam.fy * p[:, 1] / z + cam.cy
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return _empty_splats()

    p = p[idx]
    z = z[idx]
    u = u[idx]
    v = v[idx]
    sigma = _world_covariances(cloud)[idx]
    m3 = np.einsum("ij,njk,lk->nil", cam.rotation, sigma, cam.rotation)
    jac = _perspective_jacobians(cam, p)
    cov = np.einsum("nij,njk,nlk->nil", jac, m3, jac)
    cov[:, 0, 0] += LOWPASS
    cov[:, 1, 1] += LOWPASS

    radius = EXTENT_SIGMA * np.sqrt(_max_eigenvalue(cov))
    on_screen = (
        (u + radius > 0.0)
        & (u - radius < cam.width)
        & (v + radius > 0.0)
        & (v - radius < cam.height)
    )
    idx = idx[on_screen]
    if idx.size == 0:
        return _empty_splats()

    return Splats(
        source_index=idx,
        mean2d=np.stack([u[on_screen], v[on_screen]], axis=1),
        cov2d=cov[on_screen],
        depth_z=z[on_screen],
        dist_r=np.linalg.norm(p[on_screen], axis=1),
        opacity=_sigmoid(cloud.opacity_logits[idx]),
        color=cloud.colors[idx].copy(),
    )


def _empty_splats() -> Splats:
    return Splats(
        source_index=np.zeros(0, dtype=np.int64),
        mean2d=np.zeros((0, 2)),
        cov2d=np.zeros((0, 2, 2)),
        depth_z=np.zeros(0),
        dist_r=np.zeros(0),
        opacity=np.zeros(0),
        color=np.zeros((0, 3)),
    )


def _perspective_jacobians(cam: Camera, p: np.ndarray) -> np.ndarray:
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    jac = np.zeros((len(p), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z**2
    return jac


def _max_eigenvalue(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b**2, 0.0))
    return half_tr + disc


def project_backward(cloud: GaussianCloud, cam: Camera, splats: Splats, grads: SplatGrads):
    """Chain splat-space gradients back to cloud parameters.

    ``grads.cov2d`` follows the full-matrix convention (off-diagonal tied
    entries each hold their own term; the chain rule sums them). Returns a
    dict keyed like ``GaussianCloud.PARAM_FIELDS`` with dense (N, ...) arrays;
    culled Gaussians receive zero.
    """
    out = {
        "positions": np.zeros((cloud.n, 3)),
        "rotations": np.zeros((cloud.n, 4)),
        "log_scales": np.zeros((cloud.n, 3)),
        "opacity_logits": np.zeros(cloud.n),
        "colors": np.zeros((cloud.n, 3)),
    }
    if splats.m == 0:
        return out
    idx = splats.source_index

    out["colors"][idx] = grads.color
    s = splats.opacity
    out["opacity_logits"][idx] = grads.opacity * s * (1.0 - s)

    p = cam.world_to_camera(cloud.positions[idx])
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    jac = _perspective_jacobians(cam, p)

    q = cloud.rotations[idx]
    qnorm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / qnorm
    R = quat_to_rot(qn)
    s2 = np.exp(2.0 * cloud.log_scales[idx])
    sigma = np.einsum("nij,nj,nkj->nik", R, s2, R)
    m3 = np.einsum("ij,njk,lk->nil", cam.rotation, sigma, cam.rotation)

    gc = grads.cov2d
    # C = J M3 J^T: dL/dJ = (G + G^T) J M3, dL/dM3 = J^T G J
    gj = np.einsum("nij,njk,nkl->nil", gc + np.transpose(gc, (0, 2, 1)), jac, m3)
    g_m3 = np.einsum("nji,njk,nkl->nil", jac, gc, jac)
    g_sigma = np.einsum("ji,njk,kl->nil", cam.rotation, g_m3, cam.rotation)

    # Sigma = R diag(s2) R^T
    g_R = np.einsum("nij,njk,nk->nik", g_sigma + np.transpose(g_sigma, (0, 2, 1)), R, s2)
    g_s2_diag = np.einsum("nji,njk,nki->ni", R, g_sigma, R)
    out["log_scales"][idx] = 2.0 * s2 * g_s2_diag

    partials = _rot_partials(qn)
    g_qn = np.einsum("nqij,nij->nq", partials, g_R)
    # through the normalisation q_hat = q / |q|
    g_q = (g_qn - qn * np.sum(g_qn * qn, axis=1, keepdims=True)) / qnorm
    out["rotations"][idx] = g_q

    # position gradient: mean2d, depth, dist, and cov2d via the Jacobian
    g_p = np.einsum("nji,nj->ni", jac, grads.mean2d)
    g_p[:, 2] += grads.depth_z
    g_p += grads.dist_r[:, None] * p / np.linalg.norm(p, axis=1, keepdims=True)
    fz2x = -cam.fx / z**2
    fz2y = -cam.fy / z**2
    g_p[:, 0] += gj[:, 0, 2] * fz2x
    g_p[:, 1] += gj[:, 1, 2] * fz2y
    g_p[:, 2] += (
        gj[:, 0, 0] * fz2x
        + gj[:, 1, 1] * fz2y
        + gj[:, 0, 2] * (2.0 * cam.fx * x / z**3)
        + gj[:, 1, 2] * (2.0 * cam.fy * y / z**3)
    )
    out["positions"][idx] = g_p @ cam.rotation
    return out
