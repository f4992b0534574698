import numpy as np
import pytest

from aquasplat.compositor import write_float_dump
from aquasplat.errors import ConfigError, ContractViolation
from aquasplat.losses import (
    LossWeights,
    PseudoDepth,
    build_masks,
    depth_corr_loss,
    depth_var_loss,
    load_disparity,
    patch_freq_loss,
    recon_loss,
    ssim_map,
    ssim_mean,
    ssim_with_grad,
    total_loss,
    trans_reg_loss,
)
from aquasplat.rasterize import RenderBundle
from conftest import assert_grads_close, check_gradients, finite_diff
from oracles import naive_dft_magnitude, naive_ssim_mean


def masks_all(shape, near=True, edge=False):
    ones = np.ones(shape, dtype=bool)
    zeros = np.zeros(shape, dtype=bool)
    return PseudoDepth(
        disparity=np.where(ones, 1.0 if near else 0.0, 0.0),
        near_mask=ones if near else zeros,
        far_mask=zeros if near else ones,
        edge_mask=ones if edge else zeros,
    )


# --- SSIM / reconstruction ----------------------------------------------------

def test_ssim_identical_is_one(rng):
    img = rng.uniform(0, 1, (12, 14, 3))
    assert ssim_mean(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_naive_oracle(rng):
    a = rng.uniform(0, 1, (10, 11))
    b = rng.uniform(0, 1, (10, 11))
    assert ssim_mean(a, b) == pytest.approx(naive_ssim_mean(a, b), abs=1e-6)


def test_ssim_constant_shift_closed_form_at_center():
    a = np.full((25, 25), 0.3)
    b = np.full((25, 25), 0.4)
    smap = ssim_map(a, b)
    c1 = 0.01**2
    # window mass is 1 at interior pixels, variances vanish
    expected = (2 * 0.3 * 0.4 + c1) / (0.3**2 + 0.4**2 + c1)
    assert smap[12, 12] == pytest.approx(expected, abs=1e-9)


def test_ssim_strongly_negative_on_inverted_binary(rng):
    a = (rng.uniform(0, 1, (16, 16)) > 0.5).astype(float)
    b = 1.0 - a
    assert ssim_mean(a, b) < -0.3


@pytest.mark.parametrize("seed", range(3))
def test_ssim_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 0.9, (8, 9))
    b = rng.uniform(0.1, 0.9, (8, 9))
    _, grad = ssim_with_grad(a, b)
    fd = finite_diff(lambda x: ssim_mean(x, b), a.copy())
    assert_grads_close(grad, fd, label="ssim")


def test_recon_identical_is_zero(rng):
    img = rng.uniform(0, 1, (9, 9, 3))
    val, grad = recon_loss(img, img)
    assert val == pytest.approx(0.0, abs=1e-12)


def test_recon_constant_offset_l1_term():
    target = np.full((20, 20, 3), 0.4)
    img = target + 0.1
    val, _ = recon_loss(img, target, ssim_weight=0.2)
    s = ssim_mean(img, target)
    assert val == pytest.approx(0.8 * 0.1 + 0.2 * 0.5 * (1 - s), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_recon_gradient_matches_fd(seed):
    rng = np.random.default_rng(10 + seed)
    img = rng.uniform(0.1, 0.9, (8, 8, 3))
    target = rng.uniform(0.1, 0.9, (8, 8, 3))
    _, grad = recon_loss(img, target)
    fd = finite_diff(lambda x: recon_loss(x, target)[0], img.copy())
    assert_grads_close(grad, fd, label="recon")


# --- transmittance regularisation ----------------------------------------------

def test_trans_reg_zero_metric():
    pd = masks_all((6, 6), near=False)
    val, _ = trans_reg_loss(np.zeros((6, 6)), pd)
    assert val == 0.0


def test_trans_reg_all_far_constant_one():
    pd = masks_all((6, 6), near=False)
    val, _ = trans_reg_loss(np.ones((6, 6)), pd, near_weight=1.0, far_weight=10.0)
    assert val == pytest.approx(10.0)


def test_trans_reg_matches_pixel_loop(rng):
    t = rng.uniform(0, 2, (7, 5))
    near = rng.uniform(0, 1, (7, 5)) > 0.5
    pd = PseudoDepth(disparity=near.astype(float), near_mask=near,
                     far_mask=~near, edge_mask=np.zeros_like(near))
    val, grad = trans_reg_loss(t, pd, 1.0, 10.0)
    acc = 0.0
    for i in range(7):
        for j in range(5):
            acc += (1.0 if near[i, j] else 10.0) * t[i, j]
    assert val == pytest.approx(acc / 35.0)
    fd = finite_diff(lambda x: trans_reg_loss(x, pd, 1.0, 10.0)[0], t.copy())
    assert_grads_close(grad, fd, label="trans_reg")


# --- depth variance -------------------------------------------------------------

def test_depth_var_zero():
    pd = masks_all((4, 4))
    assert depth_var_loss(np.zeros((4, 4)), pd)[0] == 0.0


def test_depth_var_all_near_unit():
    pd = masks_all((4, 4), near=True)
    assert depth_var_loss(np.ones((4, 4)), pd)[0] == pytest.approx(1.0)


def test_depth_var_matches_pixel_loop(rng):
    v = rng.uniform(0, 3, (6, 6))
    near = rng.uniform(0, 1, (6, 6)) > 0.4
    edge = rng.uniform(0, 1, (6, 6)) > 0.7
    pd = PseudoDepth(disparity=near.astype(float), near_mask=near,
                     far_mask=~near, edge_mask=edge)
    val, grad = depth_var_loss(v, pd, 1.0, 0.1, 0.001)
    acc = 0.0
    for i in range(6):
        for j in range(6):
            w = 0.001 if edge[i, j] else (1.0 if near[i, j] else 0.1)
            acc += w * v[i, j]
    assert val == pytest.approx(acc / 36.0)
    fd = finite_diff(lambda x: depth_var_loss(x, pd, 1.0, 0.1, 0.001)[0], v.copy())
    assert_grads_close(grad, fd, label="depth_var")


# --- inverse-depth correlation ---------------------------------------------------

def test_depth_corr_perfect():
    rng = np.random.default_rng(3)
    depth = rng.uniform(0.5, 9, (8, 8))
    disp = 1.0 / (depth + 1.0)
    val, _ = depth_corr_loss(depth, disp)
    assert val == pytest.approx(0.0, abs=1e-12)


def test_depth_corr_affine_invariant(rng):
    depth = rng.uniform(0.5, 9, (8, 8))
    disp = 3.2 * (1.0 / (depth + 1.0)) + 0.7
    val, _ = depth_corr_loss(depth, disp)
    assert val == pytest.approx(0.0, abs=1e-10)


def test_depth_corr_matches_direct_statistics(rng):
    depth = rng.uniform(0.5, 9, (10, 10))
    disp = rng.uniform(0, 1, (10, 10))
    val, grad = depth_corr_loss(depth, disp)
    x = (1.0 / (depth + 1.0)).ravel()
    y = disp.ravel()
    rho = np.corrcoef(x, y)[0, 1]
    assert val == pytest.approx(1.0 - rho, abs=1e-12)
    fd = finite_diff(lambda d: depth_corr_loss(d, disp)[0], depth.copy())
    assert_grads_close(grad, fd, label="depth_corr")


def test_depth_corr_bounds(rng):
    for _ in range(20):
        depth = rng.uniform(0.1, 20, (6, 6))
        disp = rng.uniform(0, 1, (6, 6))
        val, _ = depth_corr_loss(depth, disp)
        assert 0.0 <= val <= 2.0


def test_depth_corr_degenerate_flat_render():
    disp = np.linspace(0, 1, 16).reshape(4, 4)
    val, grad = depth_corr_loss(np.full((4, 4), 5.0), disp)
    assert val == 1.0 and not grad.any()


def test_depth_corr_flat_disparity_rejected():
    with pytest.raises(ContractViolation):
        depth_corr_loss(np.ones((4, 4)), np.full((4, 4), 0.5))


# --- patch frequency --------------------------------------------------------------

def test_patch_freq_identical_zero(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    disp = rng.uniform(0, 1, (16, 16))
    val, grad = patch_freq_loss(img, img, disp, 8)
    assert val == 0.0 and not grad.any()


def test_patch_freq_constant_patches_dc_bin():
    k = 8
    img = np.full((8, 16, 3), 0.6)
    tgt = np.full((8, 16, 3), 0.2)
    disp = np.concatenate([np.full((8, 8), 0.25), np.full((8, 8), 0.75)], axis=1)
    val, _ = patch_freq_loss(img, tgt, disp, k)
    per_patch = [(1 - 0.25) * k * k * 3 * 0.4, (1 - 0.75) * k * k * 3 * 0.4]
    assert val == pytest.approx(sum(per_patch) / 2.0, rel=1e-12)


def test_patch_freq_matches_naive_dft(rng):
    k = 8
    img = rng.uniform(0, 1, (8, 16, 3))
    tgt = rng.uniform(0, 1, (8, 16, 3))
    disp = rng.uniform(0, 1, (8, 16))
    val, grad = patch_freq_loss(img, tgt, disp, k)
    acc = 0.0
    for px in range(2):
        patch_disp = disp[:, px * k:(px + 1) * k]
        psi = 1.0 - patch_disp.mean()
        for ch in range(3):
            m1 = naive_dft_magnitude(img[:, px * k:(px + 1) * k, ch])
            m2 = naive_dft_magnitude(tgt[:, px * k:(px + 1) * k, ch])
            acc += psi * np.abs(m1 - m2).sum()
    assert val == pytest.approx(acc / 2.0, rel=1e-9)

    def f(x):
        return patch_freq_loss(x, tgt, disp, k)[0]

    check_gradients(f, img, grad, label="patch_freq")


def test_patch_freq_excludes_remainder_pixels(rng):
    img = rng.uniform(0, 1, (10, 10, 3))
    tgt = rng.uniform(0, 1, (10, 10, 3))
    disp = rng.uniform(0, 1, (10, 10))
    val_full, _ = patch_freq_loss(img, tgt, disp, 8)
    val_crop, _ = patch_freq_loss(img[:8, :8], tgt[:8, :8], disp[:8, :8], 8)
    assert val_full == pytest.approx(val_crop, rel=1e-12)


def test_patch_freq_translation_by_whole_patches(rng):
    img = rng.uniform(0, 1, (8, 24, 3))
    tgt = rng.uniform(0, 1, (8, 24, 3))
    disp = rng.uniform(0, 1, (8, 24))
    roll = lambda x: np.roll(x, 8, axis=1)
    v1, _ = patch_freq_loss(img, tgt, disp, 8)
    v2, _ = patch_freq_loss(roll(img), roll(tgt), roll(disp), 8)
    assert v1 == pytest.approx(v2, rel=1e-12)


def test_patch_freq_patch_too_large(rng):
    with pytest.raises(ConfigError):
        patch_freq_loss(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), np.zeros((8, 8)), 16)


# --- masks -----------------------------------------------------------------------

def test_masks_all_near():
    pd = build_masks(np.ones((6, 6)), near_threshold=0.5)
    assert pd.near_mask.all() and not pd.far_mask.any() and not pd.edge_mask.any()


def test_masks_zero_threshold():
    disp = np.zeros((4, 4))
    disp[1, 2] = 0.3
    pd = build_masks(disp, near_threshold=0.0)
    assert pd.near_mask.sum() == 1 and pd.far_mask.sum() == 15


def test_masks_step_edge_band():
    disp = np.zeros((8, 8))
    disp[:, 4:] = 1.0
    pd = build_masks(disp, near_threshold=0.5, edge_threshold=0.05)
    # Sobel responds on the two columns adjacent to the step
    expected = np.zeros((8, 8), dtype=bool)
    expected[:, 3:5] = True
    assert np.array_equal(pd.edge_mask, expected)
    # oracle: direct 3x3 Sobel correlation with reflected borders
    pad = np.pad(disp, 1, mode="edge")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
    for i in range(8):
        for j in range(8):
            win = pad[i:i + 3, j:j + 3]
            gx = (win * kx).sum()
            gy = (win * kx.T).sum()
            assert pd.edge_mask[i, j] == (np.hypot(gx, gy) > 0.05)


def test_masks_partition(rng):
    pd = build_masks(rng.uniform(0, 1, (12, 12)))
    assert np.array_equal(pd.near_mask, ~pd.far_mask)


# --- combination -------------------------------------------------------------------

def _bundle(depth, depth_var, trans_metric, r_max=10.0):
    h, w = depth.shape
    return RenderBundle(
        color=np.zeros((h, w, 3)),
        alpha=np.ones((h, w)),
        depth=depth,
        dist=depth * 1.1,
        depth_var=depth_var,
        trans_metric=trans_metric,
        n_contrib=np.ones((h, w), dtype=np.int64),
    )


def test_total_loss_zero_when_everything_matches(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    depth = rng.uniform(1, 5, (16, 16))
    pd = build_masks(1.0 / (depth + 1.0))
    rep = total_loss(img, img, _bundle(depth, np.zeros((16, 16)), np.zeros((16, 16))),
                     pd, LossWeights(patch_size=8))
    assert rep.total == pytest.approx(0.0, abs=1e-9)


def test_total_loss_paper_weighting():
    # all five component losses pinned at 1 combine to 1.1211
    w = LossWeights()
    total = 1.0 + w.trans_weight + w.depth_var_weight + w.depth_corr_weight + w.freq_weight
    assert total == pytest.approx(1.1211)


def test_total_loss_routes_gradients(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    tgt = rng.uniform(0, 1, (16, 16, 3))
    depth = rng.uniform(1, 5, (16, 16))
    dvar = rng.uniform(0, 0.5, (16, 16))
    tm = rng.uniform(0, 1, (16, 16))
    pd = build_masks(rng.uniform(0, 1, (16, 16)))
    lw = LossWeights(patch_size=8)
    rep = total_loss(img, tgt, _bundle(depth, dvar, tm), pd, lw)
    assert rep.total == pytest.approx(
        rep.recon + lw.trans_weight * rep.trans_reg + lw.depth_var_weight * rep.depth_var
        + lw.depth_corr_weight * rep.depth_corr + lw.freq_weight * rep.patch_freq
    )

    def f_img(x):
        return total_loss(x, tgt, _bundle(depth, dvar, tm), pd, lw).total

    check_gradients(f_img, img, rep.d_image, label="total:d_image")

    def f_depth(d):
        return total_loss(img, tgt, _bundle(d, dvar, tm), pd, lw).total

    check_gradients(f_depth, depth, rep.d_depth, label="total:d_depth")


def test_load_disparity_formats(tmp_path, rng):
    disp = rng.uniform(0, 1, (6, 8)).astype(np.float32).astype(np.float64)
    p1 = tmp_path / "d.f32"
    write_float_dump(p1, disp)
    assert np.array_equal(load_disparity(p1), disp)

    from PIL import Image
    quantized = (disp * 65535).astype(np.uint16)
    p2 = tmp_path / "d.png"
    Image.fromarray(quantized).save(p2)
    assert np.abs(load_disparity(p2) - disp).max() < 1.0 / 65535


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(ssim_weight=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(patch_size=4)
