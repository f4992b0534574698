"""Physics-based underwater image formation and its inverse.

An underwater pixel is the water-free color attenuated along the camera path
plus ambient light scattered back in:

    underwater = clean * exp(-attenuation * dist)
                 + ambient * (1 - exp(-backscatter * dist))

All compositing happens in linear RGB; sRGB encoding only touches pixels at
import/export so gradients stay alive inside the differentiable path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractViolation
from .gaussians import GaussianCloud, project
from .geom import Camera
from .rasterize import rasterize

DUMP_MAGIC = b"AQGS"


@dataclass
class UnderwaterImage:
    image: np.ndarray  # (H, W, 3) linear RGB, unclamped
    clamped_view: np.ndarray  # (H, W, 3) clamped to [0, 1] for export


def _check_shapes(clean, dist, ambient, atten, back):
    hw = clean.shape[:2]
    if clean.shape != hw + (3,):
        raise ContractViolation("clean image must be (H, W, 3)")
    for name, buf, shape in (
        ("dist", dist, hw),
        ("ambient", ambient, hw + (3,)),
        ("attenuation", atten, hw + (3,)),
        ("backscatter", back, hw + (3,)),
    ):
        if buf.shape != shape:
            raise ContractViolation(f"{name} buffer has shape {buf.shape}, expected {shape}")


def compose(clean, dist, ambient, attenuation, backscatter) -> UnderwaterImage:
    """Apply the water medium to a water-free render.

    ``dist`` is (H, W); the three water buffers and ``clean`` are (H, W, 3).
    """
    clean = np.asarray(clean, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    ambient = np.asarray(ambient, dtype=np.float64)
    attenuation = np.asarray(attenuation, dtype=np.float64)
    backscatter = np.asarray(backscatter, dtype=np.float64)
    _check_shapes(clean, dist, ambient, attenuation, backscatter)

    r = dist[..., None]
    image = clean * np.exp(-attenuation * r) + ambient * (1.0 - np.exp(-backscatter * r))
    return UnderwaterImage(image=image, clamped_view=np.clip(image, 0.0, 1.0))


def compose_backward(clean, dist, ambient, attenuation, backscatter, upstream):
    """Gradients of the composed image w.r.t. every input buffer.

    ``upstream`` is (H, W, 3); the distance gradient is reduced over channels.
    Returns a dict with keys clean, dist, ambient, attenuation, backscatter.
    """
    clean = np.asarray(clean, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    ambient = np.asarray(ambient, dtype=np.float64)
    attenuation = np.asarray(attenuation, dtype=np.float64)
    backscatter = np.asarray(backscatter, dtype=np.float64)
    _check_shapes(clean, dist, ambient, attenuation, backscatter)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != clean.shape:
        raise ContractViolation("upstream gradient must match the image shape")

    r = dist[..., None]
    ta = np.exp(-attenuation * r)
    tb = np.exp(-backscatter * r)
    d_clean = g * ta
    d_ambient = g * (1.0 - tb)
    d_atten = g * (-clean * r * ta)
    d_back = g * (ambient * r * tb)
    d_dist = (g * (-clean * attenuation * ta + ambient * backscatter * tb)).sum(axis=-1)
    return {
        "clean": d_clean,
        "dist": d_dist,
        "ambient": d_ambient,
        "attenuation": d_atten,
        "backscatter": d_back,
    }


def invert(underwater, dist, ambient, attenuation, backscatter, min_transmission=1e-6):
    """Algebraic inverse of :func:`compose`; well-posed while transmission stays
    above ``min_transmission``. Returns (clean, valid_mask)."""
    r = np.asarray(dist, dtype=np.float64)[..., None]
    ta = np.exp(-np.asarray(attenuation, dtype=np.float64) * r)
    tb = np.exp(-np.asarray(backscatter, dtype=np.float64) * r)
    valid = ta > min_transmission
    clean = (np.asarray(underwater, dtype=np.float64) - ambient * (1.0 - tb)) / np.where(
        valid, ta, 1.0
    )
    return np.where(valid, clean, 0.0), valid


def restore(state, cam: Camera):
    """Water-free render of a trained checkpoint state at the given camera.

    Bypasses the water medium entirely: project + rasterize only. Returns the
    clean image clamped to [0, 1] for export and the depth map.
    """
    cloud = state.cloud if hasattr(state, "cloud") else state[0]
    if not isinstance(cloud, GaussianCloud):
        raise ContractViolation("state does not carry a GaussianCloud")
    bundle = rasterize(project(cloud, cam), cam)
    return np.clip(bundle.color, 0.0, 1.0), bundle.depth


# --- color space -----------------------------------------------------------

def srgb_encode(linear):
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded):
    x = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


# --- image files ------------------------------------------------------------

def write_png(path, linear_image):
    """Export a linear [0,1] image as 8-bit sRGB-encoded PNG."""
    arr = srgb_encode(linear_image)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def read_png(path):
    """Load a PNG into a linear [0,1] float image (sRGB decoded).

    16-bit grayscale images decode to their raw normalised values (they carry
    data maps, not display colors).
    """
    img = Image.open(path)
    if img.mode in ("I", "I;16"):
        return np.asarray(img, dtype=np.float64) / 65535.0
    arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(arr)


def write_float_dump(path, array):
    """Lossless float32 image dump: magic 'AQGS', u32 H, W, C, then the data."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ContractViolation("float dump expects an (H, W) or (H, W, C) array")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.astype("<f4").tobytes())


def read_float_dump(path):
    """Read a float dump back as float64; (H, W, 1) squeezes to (H, W)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DUMP_MAGIC:
            raise ContractViolation(f"bad float dump magic {magic!r}")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(h * w * c * 4), dtype="<f4").astype(np.float64)
    arr = data.reshape(h, w, c)
    return arr[..., 0] if c == 1 else arr
