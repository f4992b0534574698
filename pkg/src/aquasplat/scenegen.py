"""Synthetic underwater datasets with exact ground truth.

Scenes are themselves Gaussian clouds viewed through a water field drawn from
the model class, so recovery experiments have a realisable target and every
buffer the pipeline must reproduce exists in closed form. Three families are
built in: a tilted textured wall, fronto-parallel terraces, and a field of
color charts against a backdrop.

Archive layout (one directory per dataset): cameras.txt, views/NNN_underwater.png,
views/NNN_clean.png, views/NNN_disp.f32, views/NNN_masks.png,
gt/water.ckpt-fragment, gt/cloud.ckpt-fragment, and charts.txt when the scene
contains charts.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from . import ckpt
from .compositor import compose, write_float_dump, write_png, read_png, read_float_dump
from .errors import ConfigError
from .gaussians import GaussianCloud, project
from .geom import Camera, compute_r_max, load_cameras, pixel_directions, save_cameras
from .losses import build_masks
from .metrics import Chart
from .rasterize import rasterize
from .waterfield import WaterField, field_forward, softplus_inv

RECIPES = ("textured-wall", "terraced-terrain", "color-chart-field")

# named RNG substreams hanging off the one dataset seed
_STREAMS = {"scene": 11, "water": 23, "cameras": 37, "init": 53, "train": 71}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name]]))


def test_view_indices(n_views: int) -> list:
    """Hold out one view in every eight."""
    return [i for i in range(n_views) if i % 8 == 0]


# --- scene construction -------------------------------------------------------

def _look_at(position, target):
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_hint, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    # orthonormalise against accumulated roundoff
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return rotation, -rotation @ position


def _color_field(rng, xy):
    """Smooth seeded color texture over (N, 2) plane coordinates."""
    colors = np.full((len(xy), 3), 0.5)
    for _ in range(6):
        freq = rng.uniform(0.8, 4.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.04, 0.16, 3)
        wave = np.sin(xy @ freq + phase)
        colors += wave[:, None] * amp[None, :]
    return np.clip(colors, 0.05, 0.95)


def _wall_cloud(rng) -> GaussianCloud:
    nx, ny = 44, 32
    xs = np.linspace(-2.2, 2.2, nx)
    ys = np.linspace(-1.6, 1.6, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    x = gx.ravel() + rng.normal(scale=0.012, size=gx.size)
    y = gy.ravel() + rng.normal(scale=0.012, size=gy.size)
    z = 4.5 + 0.55 * x + 0.15 * np.sin(2.0 * y)
    positions = np.column_stack([x, y, z])
    colors = _color_field(rng, positions[:, :2])
    n = len(positions)
    log_scales = np.column_stack([
        np.full(n, np.log(0.085)) + rng.normal(scale=0.06, size=n),
        np.full(n, np.log(0.085)) + rng.normal(scale=0.06, size=n),
        np.full(n, np.log(0.02)),
    ])
    cloud = GaussianCloud(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=log_scales,
        opacity_logits=np.full(n, 4.0),
        colors=colors,
    )
    # foreground bumps give occlusion edges and near/far contrast
    for cx, cy, cz in ((-1.1, 0.45, 3.1), (0.2, -0.5, 2.8), (1.2, 0.3, 3.3)):
        k = 40
        offs = rng.normal(scale=0.16, size=(k, 3)) * np.array([1.0, 1.0, 0.35])
        bump_pos = np.array([cx, cy, cz]) + offs
        bump_col = _color_field(rng, bump_pos[:, :2] * 3.0)
        cloud = _concat_clouds(cloud, GaussianCloud(
            positions=bump_pos,
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (k, 1)),
            log_scales=np.full((k, 3), np.log(0.07)),
            opacity_logits=np.full(k, 4.0),
            colors=bump_col,
        ))
    return cloud


def _concat_clouds(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    return GaussianCloud(*(
        np.concatenate([getattr(a, f), getattr(b, f)]) for f in GaussianCloud.PARAM_FIELDS
    ))


def _plane_cloud(rng, z, x_half, y_range, spacing=0.09):
    xs = np.arange(-x_half, x_half + 1e-9, spacing)
    ys = np.arange(y_range[0], y_range[1] + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    n = gx.size
    positions = np.column_stack([gx.ravel(), gy.ravel(), np.full(n, float(z))])
    colors = _color_field(rng, positions[:, :2] + z)
    # dense and nearly opaque: transmittance terminates inside the plane, so
    # nothing behind it bleeds into the depth map
    return GaussianCloud(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), np.log(spacing * 0.95)),
        opacity_logits=np.full(n, 8.0),
        colors=colors,
    )


def _terrace_cloud(rng, levels, tan_x, tan_y) -> GaussianCloud:
    depths = [3.5, 5.5, 8.0, 11.0][:levels]
    cloud = None
    for i, z in enumerate(reversed(depths)):  # far to near
        x_half = 1.15 * z * tan_x
        if i == len(depths) - 1 and levels > 1:
            y_range = (0.12 * z * tan_y, 1.15 * z * tan_y)  # nearest: bottom band
        else:
            y_range = (-1.15 * z * tan_y, 1.15 * z * tan_y)
        plane = _plane_cloud(rng, z, x_half, y_range)
        cloud = plane if cloud is None else _concat_clouds(cloud, plane)
    return cloud


CHART_ROWS, CHART_COLS = 2, 3
CHART_PATCH = 0.28


def _chart_cloud(rng):
    backdrop = _plane_cloud(rng, 6.0, 3.4, (-2.4, 2.4), spacing=0.11)
    charts = []
    cloud = backdrop
    for c_idx, (ox, oy, z) in enumerate(((-1.15, -0.45, 3.0), (0.0, 0.25, 4.2), (1.3, -0.3, 5.4))):
        centers, colors = [], []
        for i in range(CHART_ROWS):
            for j in range(CHART_COLS):
                color = rng.uniform(0.15, 0.9, 3)
                cx = ox + (j - (CHART_COLS - 1) / 2.0) * CHART_PATCH * 1.15
                cy = oy + (i - (CHART_ROWS - 1) / 2.0) * CHART_PATCH * 1.15
                centers.append([cx, cy, z])
                colors.append(color)
                offs = np.linspace(-CHART_PATCH / 2 * 0.8, CHART_PATCH / 2 * 0.8, 5)
                gx, gy = np.meshgrid(offs, offs)
                k = gx.size
                cloud = _concat_clouds(cloud, GaussianCloud(
                    positions=np.column_stack([
                        cx + gx.ravel(), cy + gy.ravel(), np.full(k, z)
                    ]),
                    rotations=np.tile([1.0, 0.0, 0.0, 0.0], (k, 1)),
                    log_scales=np.full((k, 3), np.log(CHART_PATCH * 0.16)),
                    opacity_logits=np.full(k, 8.0),
                    colors=np.tile(color, (k, 1)),
                ))
        charts.append(Chart(name=f"chart{c_idx}", positions=np.array(centers),
                            colors=np.array(colors)))
    return cloud, charts


def sample_water(kind: str, seed: int) -> WaterField:
    """Ground-truth water drawn from the model class."""
    ambient = np.array([0.12, 0.36, 0.42])
    attenuation = np.array([0.42, 0.16, 0.12])
    backscatter = np.array([0.30, 0.25, 0.21])
    water = WaterField.uniform_water(ambient, attenuation, backscatter)
    if kind == "uniform":
        return water
    if kind != "varying":
        raise ConfigError(f"unknown water spec {kind!r} (use uniform|varying)")
    rng = substream(seed, "water")
    water.sh_coeffs[0] += rng.normal(scale=0.01, size=3)
    water.sh_coeffs[1:4] += rng.normal(scale=0.03, size=(3, 3))
    water.sh_coeffs[4:9] += rng.normal(scale=0.015, size=(5, 3))
    water.sh_coeffs[9:16] += rng.normal(scale=0.008, size=(7, 3))
    water.mlp_w1 = rng.uniform(-0.25, 0.25, water.mlp_w1.shape) / np.sqrt(water.mlp_w1.shape[1])
    water.mlp_b1 = -1.0 + rng.normal(scale=0.1, size=water.mlp_b1.shape)
    water.mlp_w2 = rng.uniform(-0.3, 0.3, water.mlp_w2.shape) / np.sqrt(water.mlp_w2.shape[1])
    base = softplus_inv(np.concatenate([attenuation, backscatter]))
    water.mlp_b2 = base + rng.normal(scale=0.04, size=6)
    return water


@dataclass
class SceneDef:
    cloud: GaussianCloud
    water: WaterField
    cameras: list
    charts: list = field(default_factory=list)


def build_scene(recipe: str, views: int, resolution, water: str, seed: int,
                terrace_levels: int = 3) -> SceneDef:
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}; choose from {RECIPES}")
    if views < 2:
        raise ConfigError("need at least 2 views")
    h, w = resolution
    rng = substream(seed, "scene")
    cam_rng = substream(seed, "cameras")
    fx = fy = 1.05 * w
    cx, cy = w / 2.0, h / 2.0
    tan_x, tan_y = cx / fx, cy / fy

    charts = []
    if recipe == "textured-wall":
        cloud = _wall_cloud(rng)
        center = np.array([0.0, 0.0, 4.5])
        angles = np.linspace(-0.32, 0.32, views)
        positions = [
            center + 4.6 * np.array([np.sin(a), 0.0, -np.cos(a)])
            + np.array([0.0, 0.35 * np.sin(2.1 * a + 0.7), 0.0])
            for a in angles
        ]
        poses = [_look_at(p, center + cam_rng.normal(scale=0.02, size=3)) for p in positions]
    elif recipe == "terraced-terrain":
        cloud = _terrace_cloud(rng, terrace_levels, tan_x, tan_y)
        offsets = np.linspace(-0.15, 0.15, views)
        poses = []
        for i in range(views):
            t = -np.array([offsets[i], 0.06 * np.sin(2.0 * np.pi * i / views), 0.0])
            poses.append((np.eye(3), t))
    else:
        cloud, charts = _chart_cloud(rng)
        center = np.array([0.0, 0.0, 4.6])
        angles = np.linspace(-0.30, 0.30, views)
        positions = [
            center + 4.6 * np.array([np.sin(a), 0.0, -np.cos(a)])
            + np.array([0.0, 0.22 * np.sin(2.3 * a), 0.0])
            for a in angles
        ]
        poses = [_look_at(p, center) for p in positions]

    cam_positions = [(-R.T @ t) for R, t in poses]
    r_max = compute_r_max(cam_positions, cloud.positions)
    cameras = [
        Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
               rotation=R, translation=t, r_max=r_max)
        for R, t in poses
    ]
    return SceneDef(cloud=cloud, water=sample_water(water, seed), cameras=cameras,
                    charts=charts)


# --- rendering & archive ------------------------------------------------------

def render_view(cloud: GaussianCloud, water: WaterField, cam: Camera) -> dict:
    """Ground-truth buffers for one view."""
    bundle = rasterize(project(cloud, cam), cam)
    dirs = pixel_directions(cam).reshape(-1, 3)
    ambient, atten, back, _ = field_forward(water, dirs)
    shape = (cam.height, cam.width, 3)
    under = compose(bundle.color, bundle.dist, ambient.reshape(shape),
                    atten.reshape(shape), back.reshape(shape))
    return {
        "clean": np.clip(bundle.color, 0.0, 1.0),
        "underwater": under.clamped_view,
        "depth": bundle.depth,
        "disparity": normalize_disparity(bundle.depth),
    }


def normalize_disparity(depth: np.ndarray) -> np.ndarray:
    """Per-image normalised inverse depth in [0, 1], larger = nearer."""
    inv = 1.0 / (np.asarray(depth, dtype=np.float64) + 1.0)
    lo, hi = inv.min(), inv.max()
    if hi - lo < 1e-12:
        return np.ones_like(inv)
    return (inv - lo) / (hi - lo)


def generate(recipe: str, out_dir, views: int = 16, resolution=(128, 160),
             water: str = "varying", seed: int = 0, threads: int = 1,
             terrace_levels: int = 3) -> SceneDef:
    """Build a scene and write the dataset archive. Deterministic per seed."""
    from pathlib import Path

    scene = build_scene(recipe, views, resolution, water, seed, terrace_levels)
    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)

    save_cameras(out / "cameras.txt", scene.cameras)
    with open(out / "gt" / "cloud.ckpt-fragment", "wb") as fh:
        ckpt.write_cloud_fragment(fh, scene.cloud)
    with open(out / "gt" / "water.ckpt-fragment", "wb") as fh:
        ckpt.write_water_fragment(fh, scene.water)
    if scene.charts:
        _save_charts(out / "charts.txt", scene.charts)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            rendered = list(pool.map(
                lambda cam: render_view(scene.cloud, scene.water, cam), scene.cameras
            ))
    else:
        rendered = [render_view(scene.cloud, scene.water, cam) for cam in scene.cameras]

    for i, view in enumerate(rendered):
        stem = out / "views" / f"{i:03d}"
        write_png(f"{stem}_underwater.png", view["underwater"])
        write_png(f"{stem}_clean.png", view["clean"])
        write_float_dump(f"{stem}_disp.f32", view["disparity"])
        masks = build_masks(view["disparity"])
        mask_img = np.stack([
            masks.near_mask.astype(np.float64),
            masks.far_mask.astype(np.float64),
            masks.edge_mask.astype(np.float64),
        ], axis=-1)
        write_png(f"{stem}_masks.png", mask_img)
    return scene


def _save_charts(path, charts) -> None:
    lines = ["# aquasplat charts v1: name index x y z r g b"]
    for chart in charts:
        for i, (pos, col) in enumerate(zip(chart.positions, chart.colors)):
            fields = [chart.name, str(i)]
            fields += [repr(float(v)) for v in pos]
            fields += [repr(float(v)) for v in col]
            lines.append(" ".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_charts(path) -> list:
    groups = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            name = parts[0]
            pos = [float(v) for v in parts[2:5]]
            col = [float(v) for v in parts[5:8]]
            groups.setdefault(name, ([], []))
            groups[name][0].append(pos)
            groups[name][1].append(col)
    return [Chart(name=k, positions=np.array(v[0]), colors=np.array(v[1]))
            for k, v in groups.items()]


@dataclass
class Dataset:
    """A dataset archive pulled into memory."""

    root: str
    cameras: list
    underwater: list  # linear [0,1] images
    clean: list  # may be empty
    disparity: list
    charts: list
    r_max: float

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def test_indices(self) -> list:
        return test_view_indices(self.n_views)

    @property
    def train_indices(self) -> list:
        held = set(self.test_indices)
        return [i for i in range(self.n_views) if i not in held]

    def gt_cloud(self) -> GaussianCloud:
        return ckpt.load_fragment(f"{self.root}/gt/cloud.ckpt-fragment")

    def gt_water(self) -> WaterField:
        return ckpt.load_fragment(f"{self.root}/gt/water.ckpt-fragment")


def load_dataset(root) -> Dataset:
    from pathlib import Path

    rootp = Path(root)
    if not (rootp / "cameras.txt").exists():
        raise ConfigError(f"{root} is not a dataset archive (no cameras.txt)")
    cameras = load_cameras(rootp / "cameras.txt")
    underwater, clean, disparity = [], [], []
    for i in range(len(cameras)):
        stem = rootp / "views" / f"{i:03d}"
        underwater.append(read_png(f"{stem}_underwater.png"))
        clean_path = Path(f"{stem}_clean.png")
        if clean_path.exists():
            clean.append(read_png(clean_path))
        disparity.append(read_float_dump(f"{stem}_disp.f32"))
    charts_path = rootp / "charts.txt"
    charts = load_charts(charts_path) if charts_path.exists() else []
    return Dataset(root=str(root), cameras=cameras, underwater=underwater,
                   clean=clean, disparity=disparity, charts=charts,
                   r_max=cameras[0].r_max)
