"""Tile-scheduled forward rasterization of 2D splats and its exact backward.

Per pixel, splats are alpha-blended front to back in a canonical global order
(ascending camera depth, ties broken by source index, so blending is invariant
to input permutation). Alongside the color image the pass produces the
accumulated opacity, opacity-normalised depth and Euclidean-distance maps with
an ``r_max`` fallback for empty pixels, the per-pixel depth variance of the
blended splats, and a transmittance-bimodality metric. Tiling only schedules
work; values are identical to a single sequential blend over all splats.

Blending conventions, fixed so oracles are reproducible: per-splat alpha is
clamped to 0.99, splats with alpha < 1/255 are skipped, and a pixel stops
accepting splats once blending the next one would drop its transmittance
below 1e-4 (that splat is not blended).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .gaussians import SplatGrads, Splats
from .geom import Camera

TILE = 16
ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
# Sharpness of the transmittance-bimodality penalty.
TRANS_SHARPNESS = 10.0


@dataclass
class RenderCache:
    """Forward records that let the backward pass replay without re-sorting."""

    order: np.ndarray  # splat rows sorted by (depth, source index)
    pair_splat: np.ndarray  # tile-bucketed indices into the sorted arrays
    tile_starts: np.ndarray  # (n_tiles + 1,) segment offsets into pair_splat
    conic: np.ndarray  # (M, 2, 2) inverse covariances, sorted order
    final_trans: np.ndarray  # (H, W) transmittance left after blending
    splats: Splats
    cam: Camera
    tile_data: dict = None  # per-tile blend state when recorded


@dataclass
class RenderBundle:
    """Per-pixel outputs of one rasterization pass."""

    color: np.ndarray  # (H, W, 3) water-free RGB
    alpha: np.ndarray  # (H, W) accumulated opacity in [0, 1]
    depth: np.ndarray  # (H, W) normalised blend depth, r_max where empty
    dist: np.ndarray  # (H, W) normalised Euclidean distance, r_max where empty
    depth_var: np.ndarray  # (H, W) >= 0
    trans_metric: np.ndarray  # (H, W) transmittance bimodality, >= 0
    n_contrib: np.ndarray  # (H, W) int, splats actually blended
    cache: RenderCache = field(repr=False, default=None)


def blend_weight_metric(trans: np.ndarray) -> np.ndarray:
    """Penalty that is ~0 when a transmittance sits at 0 or 1."""
    t = np.abs(trans)
    return -np.log(np.exp(-TRANS_SHARPNESS * t) + np.exp(-TRANS_SHARPNESS * np.abs(1.0 - t)))


def _blend_weight_metric_deriv(trans: np.ndarray) -> np.ndarray:
    # valid for trans in (0, 1], which blending guarantees
    lo = np.exp(-TRANS_SHARPNESS * trans)
    hi = np.exp(-TRANS_SHARPNESS * (1.0 - trans))
    return TRANS_SHARPNESS * (lo - hi) / (lo + hi)


def _tile_pairs(mean2d: np.ndarray, cov2d: np.ndarray, opacity: np.ndarray, cam: Camera):
    """Bucket sorted splats into the 16x16 tiles their footprint can touch.

    The footprint radius is exact: alpha = opacity * exp(-q/2) falls below the
    1/255 skip threshold once the Mahalanobis form exceeds 2 ln(255 opacity),
    so pixels outside sqrt(2 ln(255 o) * lam_max) around the mean can never be
    blended. Splats with opacity <= 1/255 contribute nowhere and are dropped.
    Tighter tiles therefore change scheduling only, never values.
    """
    ntx = (cam.width + TILE - 1) // TILE
    nty = (cam.height + TILE - 1) // TILE
    m = len(mean2d)
    if m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(ntx * nty + 1, dtype=np.int64), ntx

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b**2, 0.0))
    reach = 2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_MIN)
    radius = np.sqrt(np.maximum(reach, 0.0) * lam_max)
    radius[reach <= 0.0] = -1.0  # never contributes: produces an empty range

    ix0 = np.clip(np.floor((mean2d[:, 0] - radius) / TILE), 0, ntx - 1).astype(np.int64)
    ix1 = np.clip(np.floor((mean2d[:, 0] + radius) / TILE), 0, ntx - 1).astype(np.int64)
    iy0 = np.clip(np.floor((mean2d[:, 1] - radius) / TILE), 0, nty - 1).astype(np.int64)
    iy1 = np.clip(np.floor((mean2d[:, 1] + radius) / TILE), 0, nty - 1).astype(np.int64)

    wx = ix1 - ix0 + 1
    wy = iy1 - iy0 + 1
    counts = np.where(radius < 0.0, 0, wx * wy)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    splat_of_pair = np.repeat(np.arange(m), counts)
    local = np.arange(total) - np.repeat(offsets[:-1], counts)
    wx_rep = np.repeat(wx, counts)
    lx = local % wx_rep
    ly = local // wx_rep
    tile_of_pair = (np.repeat(iy0, counts) + ly) * ntx + (np.repeat(ix0, counts) + lx)

    # stable sort by tile keeps the global depth order within each tile
    perm = np.argsort(tile_of_pair, kind="stable")
    pair_splat = splat_of_pair[perm]
    tile_sorted = tile_of_pair[perm]
    tile_starts = np.searchsorted(tile_sorted, np.arange(ntx * nty + 1))
    return pair_splat, tile_starts, ntx


def _invert_cov(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = -b / det
    conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det
    return conic


def _tile_pixels(t: int, ntx: int, cam: Camera):
    ty, tx = divmod(t, ntx)
    r0, r1 = ty * TILE, min((ty + 1) * TILE, cam.height)
    c0, c1 = tx * TILE, min((tx + 1) * TILE, cam.width)
    # flattened row-major pixel centres of the tile
    px = np.tile(np.arange(c0, c1) + 0.5, r1 - r0)
    py = np.repeat(np.arange(r0, r1) + 0.5, c1 - c0)
    return (r0, r1, c0, c1), px, py


def _tile_alphas(sub, px, py, mean2d, conic, opacity):
    """Per-pixel alphas and blend state for one tile's splat subset.

    Returns (dx, dy, gauss, alpha_raw, masked_alpha, trans, blended) where
    ``trans`` is the transmittance before each splat and ``blended`` marks the
    splats actually composited at each pixel.
    """
    mu = mean2d[sub]
    dx = px[:, None] - mu[:, 0][None, :]
    dy = py[:, None] - mu[:, 1][None, :]
    ca = conic[sub, 0, 0][None, :]
    cb = conic[sub, 0, 1][None, :]
    cc = conic[sub, 1, 1][None, :]
    quad = dx * dx
    quad *= ca
    tmp = dx * dy
    tmp *= 2.0 * cb
    quad += tmp
    tmp = dy * dy
    tmp *= cc
    quad += tmp
    quad *= -0.5
    gauss = np.exp(quad, out=quad)
    alpha_raw = opacity[sub][None, :] * gauss
    alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
    masked = np.where(alpha >= ALPHA_MIN, alpha, 0.0)

    one_minus = 1.0 - masked
    inclusive = np.cumprod(one_minus, axis=1, out=one_minus)
    trans = np.empty_like(inclusive)
    trans[:, 0] = 1.0
    trans[:, 1:] = inclusive[:, :-1]

    bad = (masked > 0.0) & (inclusive < T_STOP)
    blended = (masked > 0.0) & ~np.logical_or.accumulate(bad, axis=1)
    return dx, dy, gauss, alpha_raw, masked, trans, blended


def rasterize(splats: Splats, cam: Camera, record_tiles: bool = False) -> RenderBundle:
    """Forward pass. ``record_tiles`` keeps per-tile blend state alive so an
    immediately following backward pass can skip the replay; leave it off for
    bundles that stay cached (renders, frozen-cloud training)."""
    h, w = cam.height, cam.width
    bundle = RenderBundle(
        color=np.zeros((h, w, 3)),
        alpha=np.zeros((h, w)),
        depth=np.full((h, w), cam.r_max),
        dist=np.full((h, w), cam.r_max),
        depth_var=np.zeros((h, w)),
        trans_metric=np.zeros((h, w)),
        n_contrib=np.zeros((h, w), dtype=np.int64),
    )
    final_trans = np.ones((h, w))

    order = np.lexsort((splats.source_index, splats.depth_z))
    mean2d = splats.mean2d[order]
    cov2d = splats.cov2d[order]
    depth = splats.depth_z[order]
    dist = splats.dist_r[order]
    opacity = splats.opacity[order]
    color = splats.color[order]
    conic = _invert_cov(cov2d) if len(order) else np.zeros((0, 2, 2))

    pair_splat, tile_starts, ntx = _tile_pairs(mean2d, cov2d, opacity, cam)
    bundle.cache = RenderCache(
        order=order,
        pair_splat=pair_splat,
        tile_starts=tile_starts,
        conic=conic,
        final_trans=final_trans,
        splats=splats,
        cam=cam,
        tile_data={} if record_tiles else None,
    )
    if splats.m == 0:
        return bundle

    for t in range(len(tile_starts) - 1):
        s0, s1 = tile_starts[t], tile_starts[t + 1]
        if s1 == s0:
            continue
        sub = pair_splat[s0:s1]
        (r0, r1, c0, c1), px, py = _tile_pixels(t, ntx, cam)
        shape = (r1 - r0, c1 - c0)

        state = _tile_alphas(sub, px, py, mean2d, conic, opacity)
        _, _, _, _, masked, trans, blended = state
        weight = np.where(blended, masked * trans, 0.0)

        acc = weight.sum(axis=1)
        csum = weight @ color[sub]
        dsum = weight @ depth[sub]
        rsum = weight @ dist[sub]
        covered = acc > 0.0
        inv = np.where(covered, 1.0 / np.where(covered, acc, 1.0), 0.0)
        dmean = np.where(covered, dsum * inv, cam.r_max)
        rmean = np.where(covered, rsum * inv, cam.r_max)
        dvar = (weight * (depth[sub][None, :] - dmean[:, None]) ** 2).sum(axis=1) * inv

        n_blend = blended.sum(axis=1)
        lo = np.exp(-TRANS_SHARPNESS * trans)
        hi = np.exp(-TRANS_SHARPNESS * (1.0 - trans))
        both = lo + hi
        tsum = (-np.log(both) * blended).sum(axis=1)
        tmetric = np.where(n_blend > 0, tsum / np.maximum(n_blend, 1), 0.0)
        if bundle.cache.tile_data is not None:
            lo -= hi
            lo *= TRANS_SHARPNESS
            lo /= both
            bundle.cache.tile_data[t] = state + (lo,)  # last entry: d metric / d trans

        bundle.color[r0:r1, c0:c1] = csum.reshape(shape + (3,))
        bundle.alpha[r0:r1, c0:c1] = acc.reshape(shape)
        bundle.depth[r0:r1, c0:c1] = dmean.reshape(shape)
        bundle.dist[r0:r1, c0:c1] = rmean.reshape(shape)
        bundle.depth_var[r0:r1, c0:c1] = dvar.reshape(shape)
        bundle.trans_metric[r0:r1, c0:c1] = tmetric.reshape(shape)
        bundle.n_contrib[r0:r1, c0:c1] = n_blend.reshape(shape)
        final_trans[r0:r1, c0:c1] = np.prod(
            np.where(blended, 1.0 - masked, 1.0), axis=1
        ).reshape(shape)
    return bundle


def _check_cache(splats: Splats, cam: Camera, bundle: RenderBundle) -> RenderCache:
    cache = bundle.cache
    if cache is None:
        raise ContractViolation("bundle carries no forward cache")
    cam_ok = cache.cam is cam or (
        cache.cam.width == cam.width
        and cache.cam.height == cam.height
        and cache.cam.r_max == cam.r_max
        and (cache.cam.fx, cache.cam.fy, cache.cam.cx, cache.cam.cy)
        == (cam.fx, cam.fy, cam.cx, cam.cy)
        and np.array_equal(cache.cam.rotation, cam.rotation)
        and np.array_equal(cache.cam.translation, cam.translation)
    )
    same = (
        cam_ok
        and cache.splats.m == splats.m
        and np.array_equal(cache.splats.mean2d, splats.mean2d)
        and np.array_equal(cache.splats.depth_z, splats.depth_z)
        and np.array_equal(cache.splats.opacity, splats.opacity)
        and np.array_equal(cache.splats.cov2d, splats.cov2d)
        and np.array_equal(cache.splats.dist_r, splats.dist_r)
        and np.array_equal(cache.splats.color, splats.color)
    )
    if not same:
        raise ContractViolation("forward/backward inputs do not match")
    return cache


def rasterize_backward(splats: Splats, cam: Camera, bundle: RenderBundle, upstream: dict) -> SplatGrads:
    """Exact gradients of every RenderBundle buffer w.r.t. every splat field.

    ``upstream`` maps buffer names (color, alpha, depth, dist, depth_var,
    trans_metric) to gradient arrays; missing entries mean zero. Returns
    gradients in the input splat row order.
    """
    cache = _check_cache(splats, cam, bundle)
    h, w = cam.height, cam.width

    def up(name, shape):
        g = upstream.get(name)
        return np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)

    u_color = up("color", (h, w, 3))
    u_alpha = up("alpha", (h, w))
    u_depth = up("depth", (h, w))
    u_dist = up("dist", (h, w))
    u_var = up("depth_var", (h, w))
    u_trans = up("trans_metric", (h, w))

    order = cache.order
    m = splats.m
    g_sorted = SplatGrads.zeros(m)
    if m == 0:
        return g_sorted

    mean2d = splats.mean2d[order]
    depth = splats.depth_z[order]
    dist = splats.dist_r[order]
    opacity = splats.opacity[order]
    color = splats.color[order]
    conic = cache.conic
    ntx = (cam.width + TILE - 1) // TILE

    for t in range(len(cache.tile_starts) - 1):
        s0, s1 = cache.tile_starts[t], cache.tile_starts[t + 1]
        if s1 == s0:
            continue
        sub = cache.pair_splat[s0:s1]
        (r0, r1, c0, c1), px, py = _tile_pixels(t, ntx, cam)

        if cache.tile_data is not None:
            dx, dy, gauss, alpha_raw, masked, trans, blended, tderiv = cache.tile_data[t]
        else:
            dx, dy, gauss, alpha_raw, masked, trans, blended = _tile_alphas(
                sub, px, py, mean2d, conic, opacity
            )
            tderiv = _blend_weight_metric_deriv(trans)
        weight = np.where(blended, masked * trans, 0.0)

        acc = bundle.alpha[r0:r1, c0:c1].reshape(-1)
        dmean = bundle.depth[r0:r1, c0:c1].reshape(-1)
        rmean = bundle.dist[r0:r1, c0:c1].reshape(-1)
        dvar = bundle.depth_var[r0:r1, c0:c1].reshape(-1)
        nb = bundle.n_contrib[r0:r1, c0:c1].reshape(-1)

        lj = u_color[r0:r1, c0:c1].reshape(-1, 3)
        lo = u_alpha[r0:r1, c0:c1].reshape(-1)
        ld = u_depth[r0:r1, c0:c1].reshape(-1)
        lr = u_dist[r0:r1, c0:c1].reshape(-1)
        lv = u_var[r0:r1, c0:c1].reshape(-1)
        lt = u_trans[r0:r1, c0:c1].reshape(-1)

        covered = acc > 0.0
        inv = np.where(covered, 1.0 / np.where(covered, acc, 1.0), 0.0)
        ldi = (ld * inv)[:, None]
        lri = (lr * inv)[:, None]
        lvi = (lv * inv)[:, None]
        ddiff = depth[sub][None, :] - dmean[:, None]
        rdiff = dist[sub][None, :] - rmean[:, None]

        # dL/d blend weight w_i, from every buffer that sums over w
        dldw = lj @ color[sub].T
        dldw += lo[:, None]
        dldw += ldi * ddiff
        dldw += lri * rdiff
        tmp = ddiff * ddiff
        tmp -= dvar[:, None]
        tmp *= lvi
        dldw += tmp

        # transmittance chain: T_{i+1} = T_i (1 - a_i), w_i = a_i T_i
        inv_n = np.where(nb > 0, 1.0 / np.maximum(nb, 1), 0.0)
        direct_t = dldw * masked
        tderiv = tderiv * (lt * inv_n)[:, None]
        direct_t += tderiv
        direct_t *= blended
        direct_t *= trans
        num = np.cumsum(direct_t[:, ::-1], axis=1)[:, ::-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            g_t = np.where(trans > 0.0, num / trans, 0.0)
        g_t_next = np.concatenate([g_t[:, 1:], np.zeros((g_t.shape[0], 1))], axis=1)

        d_alpha = dldw
        d_alpha -= g_t_next
        d_alpha *= trans
        d_alpha = np.where(blended, d_alpha, 0.0)
        unclamped = alpha_raw < ALPHA_CLAMP
        d_gauss = d_alpha * opacity[sub][None, :]
        d_gauss *= unclamped
        g_sorted.opacity[sub] += (d_alpha * gauss * unclamped).sum(axis=0)
        d_quad = gauss * d_gauss
        d_quad *= -0.5

        ca = conic[sub, 0, 0][None, :]
        cb = conic[sub, 0, 1][None, :]
        cc = conic[sub, 1, 1][None, :]
        gm_x = ca * dx
        gm_x += cb * dy
        gm_x *= -2.0 * d_quad
        gm_y = cb * dx
        gm_y += cc * dy
        gm_y *= -2.0 * d_quad

        # each splat appears at most once per tile, so plain indexed adds work
        g_sorted.mean2d[sub, 0] += gm_x.sum(axis=0)
        g_sorted.mean2d[sub, 1] += gm_y.sum(axis=0)
        g_sorted.abs_mean2d[sub] += np.sqrt(gm_x**2 + gm_y**2).sum(axis=0)
        g_sorted.color[sub] += weight.T @ lj
        g_sorted.depth_z[sub] += (weight * (ldi + 2.0 * lvi * ddiff)).sum(axis=0)
        g_sorted.dist_r[sub] += (weight * lri).sum(axis=0)

        g_conic = np.empty((len(sub), 2, 2))
        g_conic[:, 0, 0] = (d_quad * dx * dx).sum(axis=0)
        g_conic[:, 0, 1] = (d_quad * dx * dy).sum(axis=0)
        g_conic[:, 1, 0] = g_conic[:, 0, 1]
        g_conic[:, 1, 1] = (d_quad * dy * dy).sum(axis=0)
        g_cov = -np.einsum("nij,njk,nkl->nil", conic[sub], g_conic, conic[sub])
        np.add.at(g_sorted.cov2d, sub, g_cov)

    out = SplatGrads.zeros(m)
    out.mean2d[order] = g_sorted.mean2d
    out.cov2d[order] = g_sorted.cov2d
    out.depth_z[order] = g_sorted.depth_z
    out.dist_r[order] = g_sorted.dist_r
    out.opacity[order] = g_sorted.opacity
    out.color[order] = g_sorted.color
    out.abs_mean2d[order] = g_sorted.abs_mean2d
    return out
