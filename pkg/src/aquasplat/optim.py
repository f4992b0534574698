"""Adam training of the Gaussian cloud and water field, with density control.

One view per iteration in a per-epoch shuffled order. Each step runs the full
differentiable chain (project, rasterize, water query, compose, losses) and
its hand-written backward, then applies bias-corrected Adam per parameter
group. Positions and the water MLP follow log-linear learning-rate decay.
Gaussians whose accumulated screen-space gradient norms stay high are cloned
(small) or split (large); nearly transparent ones are pruned.

Freeze modes support the recovery experiments: ``gaussians`` pins the cloud to
the dataset's ground truth and trains only the water field (per-view
rasterization is then cached, since it never changes); ``water`` pins the
water field to ground truth.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from . import ckpt
from .compositor import compose, compose_backward
from .errors import ConfigError, NumericalFailure
from .gaussians import GaussianCloud, build_covariance, logit, project, project_backward
from .geom import R_MAX_SCALE, pixel_directions
from .losses import LossWeights, build_masks, total_loss
from .metrics import psnr
from .rasterize import rasterize, rasterize_backward
from .scenegen import substream
from .waterfield import WaterField, field_backward, field_forward, precompute_dirs

log = logging.getLogger(__name__)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-15

CLOUD_GROUPS = GaussianCloud.PARAM_FIELDS
WATER_GROUPS = WaterField.PARAM_FIELDS

LOG_COLUMNS = (
    "iteration", "loss_total", "loss_recon", "loss_trans", "loss_depth_var",
    "loss_depth_corr", "loss_patch_freq", "psnr", "lr_position", "lr_rotation",
    "lr_scale", "lr_opacity", "lr_color", "lr_sh_dc", "lr_sh_rest", "lr_mlp",
    "n_gaussians", "wall_ms",
)


@dataclass
class TrainConfig:
    iterations: int = 30000
    seed: int = 0
    freeze: str = "none"  # none | water | gaussians
    init_count: int = 1500
    # learning rates; position is scaled by the scene extent and decays
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_color: float = 2.5e-3
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_mlp: float = 2e-3
    lr_mlp_final: float = 2e-5
    # adaptive density control
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15000
    densify_grad_threshold: float = 2e-4
    densify_size_threshold: float = 0.01  # fraction of the scene extent
    prune_opacity: float = 0.005
    split_scale_factor: float = 1.6
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    loss: LossWeights = field(default_factory=lambda: LossWeights(patch_size=32))

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.freeze not in ("none", "water", "gaussians"):
            raise ConfigError("freeze must be none|water|gaussians")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be > 0")


def config_to_text(cfg: TrainConfig) -> str:
    """Flat key = value form; loss weights are inlined by field name."""
    lines = []
    for f in fields(cfg):
        if f.name == "loss":
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for f in fields(cfg.loss):
        lines.append(f"{f.name} = {getattr(cfg.loss, f.name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: TrainConfig = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    cfg = replace(cfg, loss=replace(cfg.loss))
    loss_fields = {f.name: f.type for f in fields(LossWeights)}
    cfg_fields = {f.name: f.type for f in fields(TrainConfig)}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line: {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in loss_fields:
            cast = int if key == "patch_size" else float
            setattr(cfg.loss, key, cast(value))
        elif key in cfg_fields and key != "loss":
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, value.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(cfg, loss=replace(cfg.loss))  # re-run validation


def exp_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Log-linear interpolation from lr_init (step 0) to lr_final (step total)."""
    if total <= 0:
        return lr_init
    t = min(max(step / total, 0.0), 1.0)
    return float(np.exp((1.0 - t) * np.log(lr_init) + t * np.log(lr_final)))


@dataclass
class AdamState:
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    steps: dict = field(default_factory=dict)

    def ensure(self, name, shape):
        if name not in self.moments:
            self.moments[name] = (np.zeros(shape), np.zeros(shape))
            self.steps[name] = 0


def adam_step(param, grad, state: AdamState, name: str, lr):
    """One bias-corrected Adam update; skips the group on non-finite grads."""
    state.ensure(name, param.shape)
    if not np.isfinite(grad).all():
        log.warning("non-finite gradient in group %s; skipping update", name)
        return param
    m, v = state.moments[name]
    state.steps[name] += 1
    t = state.steps[name]
    m *= ADAM_B1
    m += (1 - ADAM_B1) * grad
    v *= ADAM_B2
    v += (1 - ADAM_B2) * grad**2
    m_hat = m / (1 - ADAM_B1**t)
    v_hat = v / (1 - ADAM_B2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# --- adaptive density control ---------------------------------------------------

def densify_and_prune(cloud: GaussianCloud, accum_grad, accum_count, config: TrainConfig,
                      scene_extent: float, rng, adam: AdamState = None):
    """Clone small / split large over-threshold Gaussians, prune transparent ones.

    Returns the new cloud; Adam moments are carried for survivors and zeroed
    for new rows. Accumulators are expected to be reset by the caller.
    """
    avg = np.where(accum_count > 0, accum_grad / np.maximum(accum_count, 1), 0.0)
    candidates = avg > config.densify_grad_threshold
    sizes = np.exp(cloud.log_scales).max(axis=1)
    large = sizes > config.densify_size_threshold * scene_extent
    split_mask = candidates & large
    clone_mask = candidates & ~large
    prune_mask = cloud.opacities < config.prune_opacity
    keep = ~(split_mask | prune_mask)

    parts = {name: [getattr(cloud, name)[keep]] for name in CLOUD_GROUPS}
    n_new = 0

    if clone_mask.any():
        kept_clones = clone_mask & ~prune_mask
        for name in CLOUD_GROUPS:
            parts[name].append(getattr(cloud, name)[kept_clones].copy())
        n_new += int(kept_clones.sum())

    if split_mask.any():
        idx = np.flatnonzero(split_mask)
        new_scales = cloud.log_scales[idx] - np.log(config.split_scale_factor)
        for rep in range(2):
            samples = np.empty((len(idx), 3))
            for j, i in enumerate(idx):
                cov = build_covariance(cloud.rotations[i], cloud.log_scales[i])
                chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
                samples[j] = cloud.positions[i] + chol @ rng.standard_normal(3)
            parts["positions"].append(samples)
            parts["rotations"].append(cloud.rotations[idx].copy())
            parts["log_scales"].append(new_scales.copy())
            parts["opacity_logits"].append(cloud.opacity_logits[idx].copy())
            parts["colors"].append(cloud.colors[idx].copy())
        n_new += 2 * len(idx)

    new_cloud = GaussianCloud(**{name: np.concatenate(vals) for name, vals in parts.items()})
    ckpt.snap_cloud(new_cloud)

    if adam is not None:
        n_keep_rows = [int(keep.sum())]
        if clone_mask.any():
            n_keep_rows.append(int((clone_mask & ~prune_mask).sum()))
        for name in CLOUD_GROUPS:
            if name not in adam.moments:
                continue
            m, v = adam.moments[name]
            tail_shape = (new_cloud.n - int(keep.sum()),) + m.shape[1:]
            adam.moments[name] = (
                np.concatenate([m[keep], np.zeros(tail_shape)]),
                np.concatenate([v[keep], np.zeros(tail_shape)]),
            )
    return new_cloud


# --- training loop ----------------------------------------------------------------

def init_cloud(dataset, config: TrainConfig, rng) -> GaussianCloud:
    """Seeded random initialisation: back-projected pixels at random depths."""
    train_idx = dataset.train_indices
    n = config.init_count
    views = rng.integers(0, len(train_idx), n)
    positions = np.empty((n, 3))
    colors = np.empty((n, 3))
    grids = {}
    for k in range(n):
        v = train_idx[views[k]]
        cam = dataset.cameras[v]
        if v not in grids:
            grids[v] = pixel_directions(cam)
        row = int(rng.integers(cam.height))
        col = int(rng.integers(cam.width))
        depth = rng.uniform(0.05, 0.5) * dataset.r_max
        positions[k] = cam.position + depth * grids[v][row, col]
        colors[k] = dataset.underwater[v][row, col]

    dist, _ = cKDTree(positions).query(positions, k=min(4, n))
    if n > 1:
        mean_nn = dist[:, 1:].mean(axis=1)
    else:
        mean_nn = np.full(n, 0.1)
    # cap the initial footprint; huge random-init splats only slow things down
    extent = dataset.r_max / R_MAX_SCALE
    scales = np.log(np.clip(mean_nn, 1e-3, 0.02 * extent))[:, None].repeat(3, axis=1)

    cloud = GaussianCloud(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=scales,
        opacity_logits=np.full(n, logit(0.1)),
        colors=np.clip(colors, 0.01, 0.99),
    )
    ckpt.snap_cloud(cloud)
    return cloud


@dataclass
class _ViewData:
    cam: object
    target: np.ndarray
    pseudo: object
    dir_statics: object  # precomputed encodings of the view's pixel rays
    bundle: object = None  # cached rasterization when the cloud is frozen


def _water_lr_table(cfg: TrainConfig, iteration: int):
    sh_lr = np.full((16, 1), cfg.lr_sh_rest)
    sh_lr[0] = cfg.lr_sh_dc
    mlp_lr = exp_lr(iteration, cfg.iterations, cfg.lr_mlp, cfg.lr_mlp_final)
    return sh_lr, mlp_lr


def train(dataset, config: TrainConfig, log_path=None, dump_dir=None):
    """Optimise a scene; returns (CheckpointState, log rows).

    ``log_path`` receives the append-only CSV metrics log; ``dump_dir`` is
    where a diagnostic state dump lands if the loss goes non-finite.
    """
    cfg = config
    if cfg.loss.patch_size > min(dataset.cameras[0].height, dataset.cameras[0].width):
        raise ConfigError("loss patch_size exceeds the dataset resolution")
    if len(dataset.train_indices) < 1 or dataset.n_views < 2:
        raise ConfigError("dataset must provide at least 2 views")

    init_rng = substream(cfg.seed, "init")
    order_rng = substream(cfg.seed, "train")
    scene_extent = dataset.r_max / R_MAX_SCALE

    if cfg.freeze == "gaussians":
        cloud = dataset.gt_cloud()
    else:
        cloud = init_cloud(dataset, cfg, init_rng)
    if cfg.freeze == "water":
        water = dataset.gt_water()
    else:
        mean_color = np.mean([dataset.underwater[i].mean(axis=(0, 1))
                              for i in dataset.train_indices], axis=0)
        water = WaterField.initial(mean_color, init_rng)
        ckpt.snap_water(water)

    views = {}
    for i in dataset.train_indices:
        cam = dataset.cameras[i]
        pseudo = build_masks(dataset.disparity[i], cfg.loss.near_threshold,
                             cfg.loss.edge_threshold)
        views[i] = _ViewData(
            cam=cam, target=dataset.underwater[i], pseudo=pseudo,
            dir_statics=precompute_dirs(pixel_directions(cam).reshape(-1, 3)),
        )
        if cfg.freeze == "gaussians":
            views[i].bundle = rasterize(project(cloud, cam), cam)

    adam = AdamState()
    accum_grad = np.zeros(cloud.n)
    accum_count = np.zeros(cloud.n, dtype=np.int64)
    rows = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write(",".join(LOG_COLUMNS) + "\n")

    epoch_order = []

    def next_view(it):
        nonlocal epoch_order
        if not epoch_order:
            epoch_order = [dataset.train_indices[j]
                           for j in order_rng.permutation(len(dataset.train_indices))]
        return epoch_order.pop()

    try:
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            vid = next_view(it)
            vd = views[vid]
            cam = vd.cam
            h, w = cam.height, cam.width

            if vd.bundle is not None:
                splats, bundle = None, vd.bundle
            else:
                splats = project(cloud, cam)
                bundle = rasterize(splats, cam, record_tiles=True)

            ambient, atten, back, fcache = field_forward(water, None, vd.dir_statics)
            shape3 = (h, w, 3)
            under = compose(bundle.color, bundle.dist, ambient.reshape(shape3),
                            atten.reshape(shape3), back.reshape(shape3))
            report = total_loss(under.image, vd.target, bundle, vd.pseudo, cfg.loss)

            if not np.isfinite(report.total):
                dump = _dump_state(dump_dir, cloud, water, it, report)
                raise NumericalFailure(
                    f"non-finite loss at iteration {it}", dump_path=dump)

            grads_c = compose_backward(
                bundle.color, bundle.dist, ambient.reshape(shape3),
                atten.reshape(shape3), back.reshape(shape3), report.d_image)

            if cfg.freeze != "water":
                wgrads = field_backward(
                    water, fcache,
                    grads_c["ambient"].reshape(-1, 3),
                    grads_c["attenuation"].reshape(-1, 3),
                    grads_c["backscatter"].reshape(-1, 3))
                sh_lr, mlp_lr = _water_lr_table(cfg, it)
                water.sh_coeffs = adam_step(water.sh_coeffs, wgrads["sh_coeffs"],
                                            adam, "sh_coeffs", sh_lr)
                for name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
                    setattr(water, name, adam_step(getattr(water, name), wgrads[name],
                                                   adam, name, mlp_lr))
                ckpt.snap_water(water)

            if cfg.freeze != "gaussians":
                upstream = {
                    "color": grads_c["clean"],
                    "dist": grads_c["dist"],
                    "depth": report.d_depth,
                    "depth_var": report.d_depth_var,
                    "trans_metric": report.d_trans_metric,
                }
                sgrads = rasterize_backward(splats, cam, bundle, upstream)
                cgrads = project_backward(cloud, cam, splats, sgrads)

                np.add.at(accum_grad, splats.source_index, sgrads.abs_mean2d)
                np.add.at(accum_count, splats.source_index, 1)

                pos_lr = scene_extent * exp_lr(it, cfg.iterations,
                                               cfg.lr_position, cfg.lr_position_final)
                lrs = {
                    "positions": pos_lr,
                    "rotations": cfg.lr_rotation,
                    "log_scales": cfg.lr_scale,
                    "opacity_logits": cfg.lr_opacity,
                    "colors": cfg.lr_color,
                }
                for name in CLOUD_GROUPS:
                    setattr(cloud, name, adam_step(getattr(cloud, name), cgrads[name],
                                                   adam, name, lrs[name]))
                cloud.normalize_rotations()
                ckpt.snap_cloud(cloud)

                if (cfg.densify_interval > 0
                        and cfg.densify_start <= it < cfg.densify_stop
                        and (it + 1) % cfg.densify_interval == 0):
                    cloud = densify_and_prune(cloud, accum_grad, accum_count, cfg,
                                              scene_extent, init_rng, adam)
                    accum_grad = np.zeros(cloud.n)
                    accum_count = np.zeros(cloud.n, dtype=np.int64)

                if (cfg.opacity_reset_interval > 0
                        and it < cfg.densify_stop
                        and (it + 1) % cfg.opacity_reset_interval == 0):
                    cloud.opacity_logits = np.minimum(
                        cloud.opacity_logits, logit(cfg.opacity_reset_value))
                    ckpt.snap_cloud(cloud)
                    if "opacity_logits" in adam.moments:
                        m, v = adam.moments["opacity_logits"]
                        m[:] = 0.0
                        v[:] = 0.0

            sh_lr, mlp_lr = _water_lr_table(cfg, it)
            row = {
                "iteration": it,
                "loss_total": report.total,
                "loss_recon": report.recon,
                "loss_trans": report.trans_reg,
                "loss_depth_var": report.depth_var,
                "loss_depth_corr": report.depth_corr,
                "loss_patch_freq": report.patch_freq,
                "psnr": psnr(under.clamped_view, vd.target),
                "lr_position": scene_extent * exp_lr(it, cfg.iterations,
                                                     cfg.lr_position, cfg.lr_position_final),
                "lr_rotation": cfg.lr_rotation,
                "lr_scale": cfg.lr_scale,
                "lr_opacity": cfg.lr_opacity,
                "lr_color": cfg.lr_color,
                "lr_sh_dc": cfg.lr_sh_dc,
                "lr_sh_rest": cfg.lr_sh_rest,
                "lr_mlp": mlp_lr,
                "n_gaussians": cloud.n,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            rows.append(row)
            if log_fh:
                log_fh.write(",".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
                if it % 50 == 0:
                    log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()

    state = ckpt.CheckpointState(
        cloud=cloud, water=water, r_max=dataset.r_max,
        config_text=config_to_text(cfg), seed=cfg.seed, iteration=cfg.iterations,
    )
    return state, rows


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _dump_state(dump_dir, cloud, water, iteration, report):
    from pathlib import Path

    path = Path(dump_dir or ".") / "diverged_state.npz"
    np.savez(
        path,
        iteration=iteration,
        loss_total=report.total,
        **{f"cloud_{n}": getattr(cloud, n) for n in CLOUD_GROUPS},
        **{f"water_{n}": getattr(water, n) for n in WATER_GROUPS},
    )
    return str(path)
