"""Binary checkpoint format and the f32 parameter grid.

A checkpoint stores the trained state: magic, format version, the scene
frustum radius, the Gaussian cloud arrays, the water field arrays, an echo of
the training configuration, the RNG seed, and the iteration count. All arrays
are flat little-endian float32 in declared field order. Trainable parameters
are kept on the float32 grid in memory (math still runs in float64), so
load(save(x)) is a bitwise identity.

The cloud and water sections double as standalone tagged fragments; synthetic
datasets ship their ground truth in exactly that encoding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .gaussians import GaussianCloud
from .waterfield import ENC_DIM, HIDDEN, N_SH, WaterField

MAGIC = b"AQGS-CKPT"
VERSION = 1

_CLOUD_TAG = b"CLOD"
_WATER_TAG = b"WATR"
_CONF_TAG = b"CONF"
_SEED_TAG = b"SEED"
_ITER_TAG = b"ITER"

_WATER_SHAPES = (
    ("sh_coeffs", (N_SH, 3)),
    ("mlp_w1", (HIDDEN, ENC_DIM)),
    ("mlp_b1", (HIDDEN,)),
    ("mlp_w2", (6, HIDDEN)),
    ("mlp_b2", (6,)),
)


def snap_f32(arr: np.ndarray) -> np.ndarray:
    """Round float64 values onto the float32 grid (still stored as float64)."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


def snap_cloud(cloud: GaussianCloud) -> None:
    for name in GaussianCloud.PARAM_FIELDS:
        setattr(cloud, name, snap_f32(getattr(cloud, name)))


def snap_water(water: WaterField) -> None:
    for name in WaterField.PARAM_FIELDS:
        setattr(water, name, snap_f32(getattr(water, name)))


@dataclass
class CheckpointState:
    cloud: GaussianCloud
    water: WaterField
    r_max: float
    config_text: str = ""
    seed: int = 0
    iteration: int = 0


def _write_array(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh, shape):
    n = int(np.prod(shape))
    data = np.frombuffer(fh.read(n * 4), dtype="<f4")
    if data.size != n:
        raise ConfigError("truncated checkpoint array")
    return data.astype(np.float64).reshape(shape)


def _expect_tag(fh, tag):
    got = fh.read(4)
    if got != tag:
        raise ConfigError(f"expected section {tag!r}, found {got!r}")


def write_cloud_fragment(fh, cloud: GaussianCloud) -> None:
    fh.write(_CLOUD_TAG)
    fh.write(struct.pack("<Q", cloud.n))
    for name in GaussianCloud.PARAM_FIELDS:
        _write_array(fh, getattr(cloud, name))


def read_cloud_fragment(fh) -> GaussianCloud:
    _expect_tag(fh, _CLOUD_TAG)
    n = struct.unpack("<Q", fh.read(8))[0]
    shapes = {"positions": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
              "opacity_logits": (n,), "colors": (n, 3)}
    return GaussianCloud(**{k: _read_array(fh, s) for k, s in shapes.items()})


def write_water_fragment(fh, water: WaterField) -> None:
    fh.write(_WATER_TAG)
    for name, _ in _WATER_SHAPES:
        _write_array(fh, getattr(water, name))


def read_water_fragment(fh) -> WaterField:
    _expect_tag(fh, _WATER_TAG)
    return WaterField(**{name: _read_array(fh, shape) for name, shape in _WATER_SHAPES})


def save_checkpoint(path, state: CheckpointState) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<f", state.r_max))
        write_cloud_fragment(fh, state.cloud)
        write_water_fragment(fh, state.water)
        conf = state.config_text.encode("utf-8")
        fh.write(_CONF_TAG)
        fh.write(struct.pack("<I", len(conf)))
        fh.write(conf)
        fh.write(_SEED_TAG)
        fh.write(struct.pack("<Q", state.seed))
        fh.write(_ITER_TAG)
        fh.write(struct.pack("<Q", state.iteration))


def load_checkpoint(path) -> CheckpointState:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"not a checkpoint file: magic {magic!r}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        r_max = struct.unpack("<f", fh.read(4))[0]
        cloud = read_cloud_fragment(fh)
        water = read_water_fragment(fh)
        _expect_tag(fh, _CONF_TAG)
        conf_len = struct.unpack("<I", fh.read(4))[0]
        config_text = fh.read(conf_len).decode("utf-8")
        _expect_tag(fh, _SEED_TAG)
        seed = struct.unpack("<Q", fh.read(8))[0]
        _expect_tag(fh, _ITER_TAG)
        iteration = struct.unpack("<Q", fh.read(8))[0]
    return CheckpointState(
        cloud=cloud, water=water, r_max=float(np.float32(r_max)),
        config_text=config_text, seed=seed, iteration=iteration,
    )


def save_fragment(path, obj) -> None:
    with open(path, "wb") as fh:
        if isinstance(obj, GaussianCloud):
            write_cloud_fragment(fh, obj)
        elif isinstance(obj, WaterField):
            write_water_fragment(fh, obj)
        else:
            raise ConfigError(f"cannot write fragment for {type(obj).__name__}")


def load_fragment(path):
    with open(path, "rb") as fh:
        tag = fh.read(4)
        fh.seek(0)
        if tag == _CLOUD_TAG:
            return read_cloud_fragment(fh)
        if tag == _WATER_TAG:
            return read_water_fragment(fh)
        raise ConfigError(f"unknown fragment tag {tag!r}")
