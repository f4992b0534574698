"""The learned water medium: direction-dependent ambient light and scattering.

Ambient light is a degree-3 real spherical-harmonic expansion; attenuation and
backscatter coefficients come from a two-layer softplus perceptron fed a
27-dimensional sinusoidal embedding of the viewing direction. Every output is
per RGB channel. Forward passes cache their activations so the analytic
backward pass can run without recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

HIDDEN = 128
ENC_FREQS = 4  # sin/cos at frequencies 2^0..2^3 times pi -> 3 + 3*2*4 = 27 dims
ENC_DIM = 3 + 3 * 2 * ENC_FREQS
N_SH = 16  # degrees 0..3

# Orthonormal real spherical-harmonic constants, degree 0..3.
_C0 = 0.28209479177387814  # 1/(2 sqrt(pi))
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
       0.3731763325901154, 0.4570457994644658, 1.445305721320277,
       0.5900435899266435)


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 real SH basis functions at unit directions (..., 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (N_SH,))
    out[..., 0] = _C0
    out[..., 1] = _C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = _C1 * x
    xx, yy, zz = x * x, y * y, z * z
    out[..., 4] = _C2[0] * x * y
    out[..., 5] = _C2[1] * y * z
    out[..., 6] = _C2[2] * (3.0 * zz - 1.0)
    out[..., 7] = _C2[3] * x * z
    out[..., 8] = _C2[4] * (xx - yy)
    out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = _C3[1] * x * y * z
    out[..., 11] = _C3[2] * y * (5.0 * zz - 1.0)
    out[..., 12] = _C3[3] * z * (5.0 * zz - 3.0)
    out[..., 13] = _C3[4] * x * (5.0 * zz - 1.0)
    out[..., 14] = _C3[5] * z * (xx - yy)
    out[..., 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow; max/log1p/exp beats logaddexp on big batches
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class WaterField:
    """SH coefficient table plus perceptron weights."""

    sh_coeffs: np.ndarray  # (16, 3)
    mlp_w1: np.ndarray  # (128, 27)
    mlp_b1: np.ndarray  # (128,)
    mlp_w2: np.ndarray  # (6, 128)
    mlp_b2: np.ndarray  # (6,)

    def __post_init__(self):
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(N_SH, 3)
        self.mlp_w1 = np.asarray(self.mlp_w1, dtype=np.float64).reshape(HIDDEN, ENC_DIM)
        self.mlp_b1 = np.asarray(self.mlp_b1, dtype=np.float64).reshape(HIDDEN)
        self.mlp_w2 = np.asarray(self.mlp_w2, dtype=np.float64).reshape(6, HIDDEN)
        self.mlp_b2 = np.asarray(self.mlp_b2, dtype=np.float64).reshape(6)

    PARAM_FIELDS = ("sh_coeffs", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")

    @classmethod
    def zeros(cls) -> "WaterField":
        return cls(
            sh_coeffs=np.zeros((N_SH, 3)),
            mlp_w1=np.zeros((HIDDEN, ENC_DIM)),
            mlp_b1=np.zeros(HIDDEN),
            mlp_w2=np.zeros((6, HIDDEN)),
            mlp_b2=np.zeros(6),
        )

    @classmethod
    def initial(cls, mean_color, rng: np.random.Generator) -> "WaterField":
        """Default trainable initialisation.

        The constant SH coefficient is set so the ambient light starts at the
        mean training-image colour; perceptron weights are uniform in
        +-1/sqrt(fan_in) with biases at -1, putting the initial water
        coefficients near softplus(-1) ~ 0.31.
        """
        field = cls.zeros()
        field.sh_coeffs[0] = np.asarray(mean_color, dtype=np.float64) / _C0
        field.mlp_w1 = rng.uniform(-1, 1, size=(HIDDEN, ENC_DIM)) / np.sqrt(ENC_DIM)
        field.mlp_b1 = np.full(HIDDEN, -1.0)
        field.mlp_w2 = rng.uniform(-1, 1, size=(6, HIDDEN)) / np.sqrt(HIDDEN)
        field.mlp_b2 = np.full(6, -1.0)
        return field

    @classmethod
    def uniform_water(cls, ambient, attenuation, backscatter) -> "WaterField":
        """Field whose outputs are the given constants for every direction."""
        field = cls.zeros()
        field.sh_coeffs[0] = np.asarray(ambient, dtype=np.float64) / _C0
        field.mlp_b2 = softplus_inv(
            np.concatenate(
                [np.asarray(attenuation, float), np.asarray(backscatter, float)]
            )
        )
        return field

    def copy(self) -> "WaterField":
        return WaterField(*(getattr(self, f).copy() for f in self.PARAM_FIELDS))


def _check_unit(dirs):
    norms = np.linalg.norm(np.asarray(dirs, dtype=np.float64), axis=-1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ContractViolation("viewing directions must be unit vectors")


def sh_ambient(field: WaterField, dirs: np.ndarray) -> np.ndarray:
    """Ambient light for unit directions (..., 3); activation-free, any real."""
    _check_unit(dirs)
    return sh_basis(dirs) @ field.sh_coeffs


def positional_encode(dirs: np.ndarray) -> np.ndarray:
    """Sinusoidal embedding of directions: (..., 3) -> (..., 27).

    Layout: the raw direction, then for each frequency 2^k pi (k = 0..3) a
    sin block and a cos block of the three components.
    """
    d = np.asarray(dirs, dtype=np.float64)
    parts = [d]
    for k in range(ENC_FREQS):
        scaled = (2.0**k) * np.pi * d
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def water_coeffs(field: WaterField, dirs: np.ndarray):
    """Attenuation and backscatter coefficients for unit directions.

    Returns two (..., 3) arrays, both strictly positive.
    """
    _check_unit(dirs)
    enc = positional_encode(dirs)
    h = softplus(enc @ field.mlp_w1.T + field.mlp_b1)
    out = softplus(h @ field.mlp_w2.T + field.mlp_b2)
    return out[..., :3], out[..., 3:]


@dataclass
class FieldCache:
    """Activations recorded by :func:`field_forward` for the backward pass."""

    dirs: np.ndarray
    basis: np.ndarray
    enc: np.ndarray
    z1: np.ndarray
    h: np.ndarray
    z2: np.ndarray
    exp_neg_abs_z1: np.ndarray


@dataclass
class DirStatics:
    """Per-view constants: SH basis and sinusoidal encoding of fixed directions."""

    dirs: np.ndarray
    basis: np.ndarray
    enc: np.ndarray


def precompute_dirs(dirs: np.ndarray) -> DirStatics:
    _check_unit(dirs)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    return DirStatics(dirs=d, basis=sh_basis(d), enc=positional_encode(d))


def field_forward(field: WaterField, dirs, statics: DirStatics = None):
    """Evaluate ambient light and water coefficients over a flat (N, 3) batch.

    Returns (ambient, attenuation, backscatter, cache). Passing the
    precomputed ``statics`` of a fixed direction set skips re-encoding.
    """
    if statics is None:
        statics = precompute_dirs(dirs)
    d, basis, enc = statics.dirs, statics.basis, statics.enc
    ambient = basis @ field.sh_coeffs
    z1 = enc @ field.mlp_w1.T + field.mlp_b1
    ez1 = np.exp(-np.abs(z1))
    h = np.maximum(z1, 0.0) + np.log1p(ez1)
    z2 = h @ field.mlp_w2.T + field.mlp_b2
    out = softplus(z2)
    cache = FieldCache(dirs=d, basis=basis, enc=enc, z1=z1, h=h, z2=z2,
                       exp_neg_abs_z1=ez1)
    return ambient, out[:, :3], out[:, 3:], cache


def field_backward(field: WaterField, cache: FieldCache, d_ambient, d_atten, d_back):
    """Gradients of a scalar loss w.r.t. every WaterField parameter.

    Upstream arrays must match the batch the cache was built from; a mismatch
    raises :class:`ContractViolation`. Returns a dict keyed like
    ``WaterField.PARAM_FIELDS``.
    """
    n = cache.dirs.shape[0]
    d_ambient = np.zeros((n, 3)) if d_ambient is None else np.asarray(d_ambient).reshape(-1, 3)
    d_atten = np.zeros((n, 3)) if d_atten is None else np.asarray(d_atten).reshape(-1, 3)
    d_back = np.zeros((n, 3)) if d_back is None else np.asarray(d_back).reshape(-1, 3)
    if d_ambient.shape[0] != n or d_atten.shape[0] != n or d_back.shape[0] != n:
        raise ContractViolation("upstream gradients do not match the cached batch")

    g_sh = cache.basis.T @ d_ambient

    d_out = np.concatenate([d_atten, d_back], axis=1)
    d_z2 = d_out * _sigmoid(cache.z2)
    g_w2 = d_z2.T @ cache.h
    g_b2 = d_z2.sum(axis=0)
    d_h = d_z2 @ field.mlp_w2
    # softplus'(z1) = sigmoid(z1), rebuilt from the cached exp(-|z1|)
    sig = 1.0 / (1.0 + cache.exp_neg_abs_z1)
    sig = np.where(cache.z1 >= 0.0, sig, 1.0 - sig)
    d_z1 = d_h * sig
    g_w1 = d_z1.T @ cache.enc
    g_b1 = d_z1.sum(axis=0)

    return {
        "sh_coeffs": g_sh,
        "mlp_w1": g_w1,
        "mlp_b1": g_b1,
        "mlp_w2": g_w2,
        "mlp_b2": g_b2,
    }
