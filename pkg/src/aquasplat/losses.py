"""Training objectives: reconstruction plus the four depth-guided losses.

The depth guidance comes from a pseudo-depth map: per-image normalised
disparity in [0, 1], larger = nearer. It partitions the image into near/far
regions and an edge band, weights a transmittance-bimodality penalty and a
depth-variance penalty, supervises rendered depth through an inverse-depth
Pearson correlation, and weights a patch-wise DFT magnitude loss toward
distant patches. Every loss returns its value together with the analytic
gradient on the buffer it constrains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .compositor import read_float_dump, read_png
from .errors import ConfigError, ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    """All scalar knobs of the objective."""

    ssim_weight: float = 0.2
    trans_weight: float = 1e-4
    depth_var_weight: float = 1e-3
    depth_corr_weight: float = 0.1
    freq_weight: float = 0.02
    trans_near: float = 1.0
    trans_far: float = 10.0
    var_near: float = 1.0
    var_far: float = 0.1
    var_edge: float = 0.001
    near_threshold: float = 0.4
    edge_threshold: float = 0.05
    patch_size: int = 256

    def __post_init__(self):
        for name in (
            "ssim_weight",
            "trans_weight",
            "depth_var_weight",
            "depth_corr_weight",
            "freq_weight",
            "trans_near",
            "trans_far",
            "var_near",
            "var_far",
            "var_edge",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.patch_size < 8:
            raise ConfigError("patch_size must be >= 8")


@dataclass
class PseudoDepth:
    """Disparity guidance and the region masks derived from it."""

    disparity: np.ndarray  # (H, W) in [0, 1], larger = nearer
    near_mask: np.ndarray  # bool, high disparity
    far_mask: np.ndarray  # bool, complement of near
    edge_mask: np.ndarray  # bool, band along disparity discontinuities

    def __post_init__(self):
        if (self.near_mask & self.far_mask).any() or not (self.near_mask | self.far_mask).all():
            raise ContractViolation("near/far masks must partition the image")


@dataclass
class LossReport:
    """Per-term values plus the gradient buffers the backward chain consumes."""

    total: float
    recon: float
    trans_reg: float
    depth_var: float
    depth_corr: float
    patch_freq: float
    d_image: np.ndarray  # gradient on the rendered underwater image
    d_depth: np.ndarray
    d_depth_var: np.ndarray
    d_trans_metric: np.ndarray


def build_masks(disparity, near_threshold=0.4, edge_threshold=0.05) -> PseudoDepth:
    """Near/far partition by disparity threshold; edges by Sobel magnitude."""
    disp = np.asarray(disparity, dtype=np.float64)
    near = disp > near_threshold
    gx = ndimage.sobel(disp, axis=1, mode="reflect")
    gy = ndimage.sobel(disp, axis=0, mode="reflect")
    edge = np.hypot(gx, gy) > edge_threshold
    return PseudoDepth(disparity=disp, near_mask=near, far_mask=~near, edge_mask=edge)


def load_disparity(path) -> np.ndarray:
    """Read a disparity map from a float dump or 16-bit grayscale PNG."""
    path = str(path)
    if path.endswith(".f32"):
        return read_float_dump(path)
    return read_png(path)


# --- SSIM kernel (shared with the metrics module) ---------------------------

def _window1d():
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW) - half
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()

_KERNEL1D = _window1d()


def _blur(img):
    out = ndimage.correlate1d(img, _KERNEL1D, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, _KERNEL1D, axis=1, mode="constant", cval=0.0)


def _ssim_terms(a, b):
    mu_a, mu_b = _blur(a), _blur(b)
    raw_aa, raw_bb, raw_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = raw_aa - mu_a**2
    var_b = raw_bb - mu_b**2
    cov = raw_ab - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = mu_a**2 + mu_b**2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim_map(a, b):
    """Per-pixel SSIM with an 11x11 Gaussian window, zero-padded borders."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation("ssim inputs must share a shape")
    _, _, n1, n2, d1, d2 = _ssim_terms(a, b)
    return (n1 * n2) / (d1 * d2)


def ssim_mean(a, b) -> float:
    return float(ssim_map(a, b).mean())


def ssim_with_grad(a, b):
    """Mean SSIM and its gradient w.r.t. the first image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation("ssim inputs must share a shape")
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_terms(a, b)
    smap = (n1 * n2) / (d1 * d2)
    up = 1.0 / smap.size

    d_mu = up * (2.0 * mu_b * (n2 - n1) / (d1 * d2) - smap * 2.0 * mu_a * (1.0 / d1 - 1.0 / d2))
    d_raw_aa = up * (-smap / d2)
    d_raw_ab = up * (2.0 * n1 / (d1 * d2))
    # adjoint of the symmetric zero-padded blur is the blur itself
    grad = _blur(d_mu) + _blur(d_raw_aa) * 2.0 * a + _blur(d_raw_ab) * b
    return float(smap.mean()), grad


# --- individual objectives ---------------------------------------------------

def recon_loss(image, target, ssim_weight=0.2):
    """(1 - w) L1 + w (1 - SSIM)/2 between rendered and observed images."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ContractViolation("recon_loss inputs must share a shape")
    diff = image - target
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim_with_grad(image, target)
    value = (1.0 - ssim_weight) * l1 + ssim_weight * 0.5 * (1.0 - s)
    grad = (1.0 - ssim_weight) * g_l1 - ssim_weight * 0.5 * g_s
    return value, grad


def trans_reg_loss(trans_metric, pseudo: PseudoDepth, near_weight=1.0, far_weight=10.0):
    """Mean of the transmittance-bimodality metric, upweighted in far regions."""
    t = np.asarray(trans_metric, dtype=np.float64)
    gamma = np.where(pseudo.near_mask, near_weight, far_weight)
    value = float((gamma * t).mean())
    return value, gamma / t.size


def depth_var_loss(depth_var, pseudo: PseudoDepth, near_weight=1.0, far_weight=0.1, edge_weight=0.001):
    """Weighted mean depth variance: near / far outside edges, tiny on edges."""
    v = np.asarray(depth_var, dtype=np.float64)
    eta = np.where(pseudo.near_mask, near_weight, far_weight)
    eta = np.where(pseudo.edge_mask, edge_weight, eta)
    value = float((eta * v).mean())
    return value, eta / v.size


def depth_corr_loss(depth, disparity):
    """One minus the Pearson correlation of inverse rendered depth and disparity.

    Scale- and shift-invariant in the guidance, so normalised relative
    disparity supervises metric depth.
    """
    d = np.asarray(depth, dtype=np.float64)
    disp = np.asarray(disparity, dtype=np.float64)
    if d.shape != disp.shape:
        raise ContractViolation("depth and disparity must share a shape")
    x = 1.0 / (d + 1.0)
    a = x - x.mean()
    b = disp - disp.mean()
    sxx = float((a * a).sum())
    syy = float((b * b).sum())
    if syy <= 1e-12:
        raise ContractViolation("disparity map has no variance")
    if sxx < 1e-12:
        # degenerate flat render: flat correlation is undefined, treat as
        # uncorrelated with no useful gradient direction
        return 1.0, np.zeros_like(d)
    sxy = float((a * b).sum())
    denom = np.sqrt(sxx * syy)
    rho = sxy / denom
    d_rho_dx = b / denom - rho * a / sxx
    grad = d_rho_dx / (d + 1.0) ** 2
    return 1.0 - rho, grad


def patch_freq_loss(image, target, disparity, patch_size):
    """Disparity-weighted L1 between patchwise DFT magnitudes.

    The image grid is cut into patch_size^2 tiles (trailing remainder pixels
    excluded); patches whose mean disparity is low (distant) weigh more.
    """
    img = np.asarray(image, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    disp = np.asarray(disparity, dtype=np.float64)
    if img.shape != tgt.shape or img.shape[:2] != disp.shape:
        raise ContractViolation("patch_freq_loss inputs must share image dims")
    h, w = disp.shape
    k = int(patch_size)
    ny, nx = h // k, w // k
    if ny == 0 or nx == 0:
        raise ConfigError(f"patch_size {k} exceeds the image size {h}x{w}")
    n_patches = ny * nx

    value = 0.0
    grad = np.zeros_like(img)
    for py in range(ny):
        for px in range(nx):
            rs, cs = slice(py * k, (py + 1) * k), slice(px * k, (px + 1) * k)
            psi = 1.0 - disp[rs, cs].mean()
            for ch in range(img.shape[2]):
                f = np.fft.fft2(img[rs, cs, ch])
                f_ref = np.fft.fft2(tgt[rs, cs, ch])
                mag = np.abs(f)
                mag_ref = np.abs(f_ref)
                value += psi * np.abs(mag - mag_ref).sum()
                sign = np.sign(mag - mag_ref) * psi / n_patches
                ratio = np.where(mag > 0.0, f / np.where(mag > 0.0, mag, 1.0), 0.0)
                grad[rs, cs, ch] += (k * k) * np.real(np.fft.ifft2(sign * ratio))
    return value / n_patches, grad


def total_loss(image, target, bundle, pseudo: PseudoDepth, weights: LossWeights) -> LossReport:
    """Combine every objective and collect the per-buffer gradients."""
    lw = weights
    r_val, r_grad = recon_loss(image, target, lw.ssim_weight)
    t_val, t_grad = trans_reg_loss(bundle.trans_metric, pseudo, lw.trans_near, lw.trans_far)
    v_val, v_grad = depth_var_loss(
        bundle.depth_var, pseudo, lw.var_near, lw.var_far, lw.var_edge
    )
    c_val, c_grad = depth_corr_loss(bundle.depth, pseudo.disparity)
    f_val, f_grad = patch_freq_loss(image, target, pseudo.disparity, lw.patch_size)

    total = (
        r_val
        + lw.trans_weight * t_val
        + lw.depth_var_weight * v_val
        + lw.depth_corr_weight * c_val
        + lw.freq_weight * f_val
    )
    return LossReport(
        total=float(total),
        recon=float(r_val),
        trans_reg=float(t_val),
        depth_var=float(v_val),
        depth_corr=float(c_val),
        patch_freq=float(f_val),
        d_image=r_grad + lw.freq_weight * f_grad,
        d_depth=lw.depth_corr_weight * c_grad,
        d_depth_var=lw.depth_var_weight * v_grad,
        d_trans_metric=lw.trans_weight * t_grad,
    )
