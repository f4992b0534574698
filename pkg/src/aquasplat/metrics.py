"""Evaluation metrics: PSNR, SSIM, CIEDE2000 color difference, angular error.

Color differences run through the full sRGB(D65) -> XYZ -> Lab pipeline and
the complete CIEDE2000 formula including the rotation term. Chart evaluation
projects known color patches into a view, samples the restored image around
each, and reports per-chart means with their spread.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .compositor import srgb_encode
from .errors import ContractViolation
from .gaussians import Z_NEAR
from .geom import Camera
from .losses import ssim_mean

PSNR_CAP = 99.0

# sRGB primaries to XYZ, D65 white.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = np.array([0.95047, 1.0, 1.08883])


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation("psnr inputs must share a shape")
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def ssim(a, b) -> float:
    """Mean SSIM; the same windowed kernel the training loss uses."""
    return ssim_mean(a, b)


def srgb_to_lab(rgb):
    """sRGB triples in [0,1] -> CIE Lab (D65)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    x = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = x @ _RGB_TO_XYZ.T / _WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def ciede2000_lab(lab1, lab2) -> float:
    """CIEDE2000 difference between two Lab triples (full formula)."""
    l1, a1, b1 = (float(v) for v in np.asarray(lab1, dtype=np.float64))
    l2, a2, b2 = (float(v) for v in np.asarray(lab2, dtype=np.float64))

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    cbar = 0.5 * (c1 + c2)
    g = 0.5 * (1.0 - np.sqrt(cbar**7 / (cbar**7 + 25.0**7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0 if (a1p != 0.0 or b1 != 0.0) else 0.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0 if (a2p != 0.0 or b2 != 0.0) else 0.0

    dlp = l2 - l1
    dcp = c2p - c1p
    if c1p * c2p == 0.0:
        dhp = 0.0
    else:
        dhp = h2p - h1p
        if dhp > 180.0:
            dhp -= 360.0
        elif dhp < -180.0:
            dhp += 360.0
    dHp = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dhp) / 2.0)

    lbar = 0.5 * (l1 + l2)
    cbarp = 0.5 * (c1p + c2p)
    if c1p * c2p == 0.0:
        hbar = h1p + h2p
    elif abs(h1p - h2p) <= 180.0:
        hbar = 0.5 * (h1p + h2p)
    elif h1p + h2p < 360.0:
        hbar = 0.5 * (h1p + h2p + 360.0)
    else:
        hbar = 0.5 * (h1p + h2p - 360.0)

    t = (
        1.0
        - 0.17 * np.cos(np.radians(hbar - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbar))
        + 0.32 * np.cos(np.radians(3.0 * hbar + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbar - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbar - 275.0) / 25.0) ** 2))
    rc = 2.0 * np.sqrt(cbarp**7 / (cbarp**7 + 25.0**7))
    sl = 1.0 + 0.015 * (lbar - 50.0) ** 2 / np.sqrt(20.0 + (lbar - 50.0) ** 2)
    sc = 1.0 + 0.045 * cbarp
    sh = 1.0 + 0.015 * cbarp * t
    rt = -np.sin(np.radians(2.0 * dtheta)) * rc

    return float(
        np.sqrt(
            (dlp / sl) ** 2
            + (dcp / sc) ** 2
            + (dHp / sh) ** 2
            + rt * (dcp / sc) * (dHp / sh)
        )
    )


def ciede2000(rgb_a, rgb_b) -> float:
    """CIEDE2000 between two sRGB triples in [0,1]."""
    return ciede2000_lab(srgb_to_lab(rgb_a), srgb_to_lab(rgb_b))


@dataclass
class AngularErrorResult:
    mean_degrees: float
    n_used: int
    n_skipped: int


def mean_angular_error(colors_a, colors_b) -> AngularErrorResult:
    """Mean angle in degrees between paired RGB vectors; zero vectors skipped."""
    a = np.atleast_2d(np.asarray(colors_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(colors_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ContractViolation("angular error needs paired triples")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    skipped = int((~ok).sum())
    if not ok.any():
        return AngularErrorResult(mean_degrees=float("nan"), n_used=0, n_skipped=skipped)
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return AngularErrorResult(
        mean_degrees=float(ang.mean()), n_used=int(ok.sum()), n_skipped=skipped
    )


@dataclass
class Chart:
    """One color chart: patch centres in world space and their true colors."""

    name: str
    positions: np.ndarray  # (P, 3)
    colors: np.ndarray  # (P, 3) linear RGB

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)


@dataclass
class ChartEvalResult:
    delta_e_mean: float
    delta_e_std: float
    angular_mean: float
    angular_std: float
    per_chart: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)


MEDIAN_WINDOW = 5  # pixels sampled around each projected patch centre


def chart_eval(restored, charts, cam: Camera, depth_map=None) -> ChartEvalResult:
    """Color fidelity of a restored view against known chart patches.

    Each visible patch centre is projected into the view and the median of a
    5x5 pixel block around it is compared to the reference color: CIEDE2000 on
    the sRGB encodings, angular error on the raw linear values. Per-chart means
    are aggregated into a mean and population std across charts. A chart with
    no visible patch is excluded with a warning; ``depth_map`` (when given)
    additionally rejects occluded patches.
    """
    restored = np.asarray(restored, dtype=np.float64)
    half = MEDIAN_WINDOW // 2
    per_chart = {}
    excluded = []
    for chart in charts:
        p_cam = cam.world_to_camera(chart.positions)
        de_vals, psi_vals = [], []
        for i in range(len(chart.positions)):
            x, y, z = p_cam[i]
            if z <= Z_NEAR:
                continue
            u = cam.fx * x / z + cam.cx
            v = cam.fy * y / z + cam.cy
            col, row = int(np.floor(u)), int(np.floor(v))
            if not (0 <= col < cam.width and 0 <= row < cam.height):
                continue
            if depth_map is not None:
                d = depth_map[row, col]
                if abs(d - z) > 0.2 * z:
                    continue
            r0, r1 = max(0, row - half), min(cam.height, row + half + 1)
            c0, c1 = max(0, col - half), min(cam.width, col + half + 1)
            sample = np.median(restored[r0:r1, c0:c1].reshape(-1, 3), axis=0)
            ref = chart.colors[i]
            de_vals.append(ciede2000(srgb_encode(sample), srgb_encode(ref)))
            res = mean_angular_error(sample[None, :], ref[None, :])
            if res.n_used:
                psi_vals.append(res.mean_degrees)
        if not de_vals:
            warnings.warn(f"chart {chart.name!r} has no visible patch; excluded")
            excluded.append(chart.name)
            continue
        per_chart[chart.name] = (float(np.mean(de_vals)), float(np.mean(psi_vals)))

    if not per_chart:
        return ChartEvalResult(
            delta_e_mean=float("nan"),
            delta_e_std=float("nan"),
            angular_mean=float("nan"),
            angular_std=float("nan"),
            per_chart={},
            excluded=excluded,
        )
    des = np.array([v[0] for v in per_chart.values()])
    psis = np.array([v[1] for v in per_chart.values()])
    return ChartEvalResult(
        delta_e_mean=float(des.mean()),
        delta_e_std=float(des.std()),
        angular_mean=float(psis.mean()),
        angular_std=float(psis.std()),
        per_chart=per_chart,
        excluded=excluded,
    )
