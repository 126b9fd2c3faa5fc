"""Objectives: masked image terms, feature stack, contrastive loss."""

import numpy as np
import pytest

from splatskin import autodiff as ad
from splatskin import losses, raster
from splatskin.camera import Camera


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# masked L1
# ---------------------------------------------------------------------------

def test_l1_identical_images_is_zero():
    a = _rng().uniform(size=(6, 6, 3))
    fg = np.ones((6, 6), dtype=bool)
    assert losses.l1_image(a, a.copy(), fg) == 0.0


def test_l1_constant_offset_returns_offset():
    a = _rng().uniform(size=(5, 7, 3))
    fg = np.ones((5, 7), dtype=bool)
    val = losses.l1_image(a, a + 0.1, fg)
    assert abs(val - 0.1) < 2e-6   # smooth-L1 shaves beta/2 off the kink


def test_l1_respects_foreground_mask():
    a = np.zeros((4, 4, 3))
    b = np.zeros((4, 4, 3))
    b[0, 0] = 1.0                  # difference only outside the mask
    fg = np.zeros((4, 4), dtype=bool)
    fg[2:, 2:] = True
    assert losses.l1_image(a, b, fg) == 0.0


def test_l1_shape_mismatch_and_empty_mask_raise():
    with pytest.raises(ValueError, match="shapes differ"):
        losses.l1_image(np.zeros((3, 3, 3)), np.zeros((3, 4, 3)),
                        np.ones((3, 3), dtype=bool))
    with pytest.raises(ValueError, match="empty foreground"):
        losses.l1_image(np.zeros((3, 3, 3)), np.zeros((3, 3, 3)),
                        np.zeros((3, 3), dtype=bool))


def test_l1_gradient_matches_finite_differences():
    rng = _rng(3)
    gt = rng.uniform(size=(5, 5, 3))
    # keep |diff| far above the smooth-L1 band so FD probes stay one-sided
    pred0 = gt + rng.choice([-1.0, 1.0], size=gt.shape) \
        * rng.uniform(0.05, 0.2, size=gt.shape)
    fg = rng.uniform(size=(5, 5)) > 0.3

    def f(x):
        return losses.l1_image(x, x.tape.constant(gt), fg)

    assert ad.grad_check(f, pred0) <= 1e-4


def test_normal_loss_trivial_values():
    ones = np.ones((4, 4, 3))
    fg = np.ones((4, 4), dtype=bool)
    assert losses.normal_loss(ones, ones, fg) == 0.0
    val = losses.normal_loss(ones, np.zeros_like(ones), fg)
    assert abs(val - 1.0) < 2e-6


# ---------------------------------------------------------------------------
# feature stack and perceptual distance
# ---------------------------------------------------------------------------

def test_feature_stack_is_seed_deterministic_and_unit_normalized():
    img = _rng(1).uniform(size=(20, 20, 3))
    fa = losses.FeatureExtractor(seed=5).features(img)
    fb = losses.FeatureExtractor(seed=5).features(img)
    fc = losses.FeatureExtractor(seed=6).features(img)
    assert len(fa) == 3 and [f.shape[2] for f in fa] == [16, 32, 64]
    for xa, xb in zip(fa, fb):
        np.testing.assert_array_equal(xa, xb)
    assert any(np.abs(xa - xc).max() > 1e-3 for xa, xc in zip(fa, fc))
    for xa in fa:
        np.testing.assert_allclose(np.linalg.norm(xa, axis=2), 1.0,
                                   atol=1e-12)


def test_feature_stack_tape_matches_numpy():
    img = _rng(2).uniform(size=(18, 18, 3))
    phi = losses.FeatureExtractor()
    ref = phi.features(img)
    tape = ad.Tape()
    out = phi.features(tape.leaf("img", img))
    for a, b in zip(out, ref):
        np.testing.assert_allclose(a.value, b, atol=1e-12)


def test_perceptual_zero_on_identical_inputs_any_noise():
    phi = losses.FeatureExtractor()
    base = _rng(4).uniform(size=(16, 16, 3))
    for seed in (0, 1, 99):
        noisy = base + _rng(seed).normal(scale=0.05, size=base.shape)
        assert losses.perceptual(noisy, noisy.copy(), phi) == 0.0


def test_perceptual_positive_on_differing_pairs():
    phi = losses.FeatureExtractor()
    rng = _rng(7)
    for _ in range(5):
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        assert losses.perceptual(a, b, phi) > 0.0


def test_perceptual_gradient_matches_finite_differences():
    phi = losses.FeatureExtractor()
    rng = _rng(11)
    gt = rng.uniform(size=(16, 16, 3))
    pred = rng.uniform(size=(16, 16, 3))

    def f(x):
        return losses.perceptual(x, x.tape.constant(gt), phi)

    coords = range(0, pred.size, 53)
    assert ad.grad_check(f, pred, coords=coords) <= 1e-4


# ---------------------------------------------------------------------------
# covisibility
# ---------------------------------------------------------------------------

def _ring_cam(az, size=24):
    return Camera.from_orbit(np.zeros(3), 4.0, az, 0.0, 20.0, 20.0,
                             size, size)


def test_facing_camera_trivial_directions():
    cam = _ring_cam(0.0)
    x = np.zeros((2, 3))
    toward = cam.center / np.linalg.norm(cam.center)
    normals = np.stack([toward, -toward])
    vis = losses.facing_camera(x, normals, cam)
    assert vis[0] and not vis[1]


def test_facing_camera_matches_bruteforce_angles_on_sphere():
    rng = _rng(13)
    n = 400
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    cam = _ring_cam(0.7)
    vis = losses.facing_camera(pts, pts, cam)
    limit = np.deg2rad(81.0)
    for i in range(n):
        d = cam.center - pts[i]
        ang = np.arccos(np.clip(pts[i] @ d / np.linalg.norm(d), -1, 1))
        assert vis[i] == (ang <= limit)
    # a camera at radius 4 sees a bit under a hemisphere of a unit sphere,
    # further shrunk by the 9-degree grazing belt: cutoff cos ~ 0.396
    frac = vis.mean()
    assert 0.2 < frac < 0.4


def test_facing_test_independent_of_first_camera():
    rng = _rng(17)
    pts = rng.normal(size=(50, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    covs = np.tile(np.eye(3) * 0.01, (50, 1, 1))
    opac = np.full(50, 0.8)
    cam_b = _ring_cam(1.3)
    m1 = losses.covisibility_mask(pts, pts, covs, opac, _ring_cam(0.0), cam_b)
    m2 = losses.covisibility_mask(pts, pts, covs, opac, _ring_cam(2.0), cam_b)
    np.testing.assert_array_equal(m1.visible, m2.visible)


def test_covisibility_mask_within_alpha_support():
    rng = _rng(19)
    pts = rng.normal(size=(80, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    covs = np.tile(np.eye(3) * 0.02, (80, 1, 1))
    opac = np.full(80, 0.9)
    cam_a, cam_b = _ring_cam(0.0), _ring_cam(np.pi / 2)
    cov_mask = losses.covisibility_mask(pts, pts, covs, opac, cam_a, cam_b)
    splats = raster.project_scene(pts, covs, opac, np.ones((80, 1)), cam_a)
    alpha = raster.rasterize(splats, cam_a).alpha
    assert cov_mask.mask.any()
    assert not (cov_mask.mask & (alpha == 0)).any()


# ---------------------------------------------------------------------------
# feature sampling and InfoNCE
# ---------------------------------------------------------------------------

def _fake_feats(rng, shapes=((12, 12, 16), (6, 6, 32), (3, 3, 64))):
    out = []
    for s in shapes:
        f = rng.normal(size=s)
        f /= np.linalg.norm(f, axis=2, keepdims=True)
        out.append(f)
    return out


def test_sample_pairs_full_mask_gives_distinct_locations():
    rng = _rng(23)
    fa, fb = _fake_feats(rng), _fake_feats(rng)
    mask = np.ones((24, 24), dtype=bool)
    ys, yps, replaced = losses.sample_feature_pairs(fa, fb, mask, n=4,
                                                    rng=rng)
    assert not replaced
    assert all(y.shape[0] == 4 for y in ys)
    # aligned: sampling identical feature maps yields identical vectors
    ys2, yps2, _ = losses.sample_feature_pairs(fa, fa, mask, n=4,
                                               rng=_rng(1))
    for y, yp in zip(ys2, yps2):
        np.testing.assert_array_equal(y, yp)


def test_sample_pairs_empty_mask_raises_and_short_mask_flags():
    rng = _rng(29)
    fa, fb = _fake_feats(rng), _fake_feats(rng)
    with pytest.raises(ValueError, match="empty"):
        losses.sample_feature_pairs(fa, fb, np.zeros((24, 24), dtype=bool),
                                    n=4, rng=rng)
    tiny = np.zeros((24, 24), dtype=bool)
    tiny[10:14, 10:14] = True   # one surviving cell at the coarsest scale
    ys, yps, replaced = losses.sample_feature_pairs(fa, fb, tiny, n=4,
                                                    rng=rng)
    assert replaced and ys[0].shape[0] == 4


def test_corresponding_pairs_more_similar_than_noncorresponding():
    phi = losses.FeatureExtractor()
    rng = _rng(31)
    img = rng.uniform(size=(24, 24, 3))
    fa = phi.features(img)
    fb = phi.features(img + rng.normal(scale=0.01, size=img.shape))
    mask = np.ones((24, 24), dtype=bool)
    ys, yps, _ = losses.sample_feature_pairs(fa, fb, mask, n=16, rng=rng)
    pos, neg = [], []
    for y, yp in zip(ys, yps):
        s = y @ yp.T
        pos.append(np.diag(s).mean())
        neg.append((s.sum() - np.trace(s)) / (s.size - len(s)))
    assert np.mean(pos) > np.mean(neg)


def test_infonce_uniform_similarity_is_ln_n_exactly():
    for n in (2, 4):
        y = np.zeros((n, 3))
        y[:, 0] = 1.0                      # all pairs identical
        val = losses.infonce_gc(y, y.copy())
        assert val == n * np.log(n)


def test_infonce_orthonormal_pair_closed_form():
    y = np.eye(2)
    val = losses.infonce_gc(y, y.copy())
    expect = 2.0 * np.log1p(np.exp(-1.0))   # two terms of -log(e/(e+1))
    assert abs(val - expect) <= 1e-12


def test_infonce_tape_matches_numpy_and_is_nonnegative():
    rng = _rng(37)
    y = rng.normal(size=(8, 5))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    yp = rng.normal(size=(8, 5))
    yp /= np.linalg.norm(yp, axis=1, keepdims=True)
    ref = losses.infonce_gc(y, yp)
    tape = ad.Tape()
    out = losses.infonce_gc(tape.leaf("y", y), tape.constant(yp))
    assert abs(float(out.value) - ref) < 1e-12
    assert ref >= 0.0


def test_infonce_decreases_when_positives_align():
    rng = _rng(41)
    yp = rng.normal(size=(6, 4))
    yp /= np.linalg.norm(yp, axis=1, keepdims=True)
    jitter = rng.normal(scale=0.3, size=yp.shape)
    far = yp + 3.0 * jitter
    far /= np.linalg.norm(far, axis=1, keepdims=True)
    near = yp + 0.1 * jitter
    near /= np.linalg.norm(near, axis=1, keepdims=True)
    assert losses.infonce_gc(near, yp) < losses.infonce_gc(far, yp)


def test_infonce_gradient_matches_finite_differences():
    rng = _rng(43)
    y0 = rng.normal(size=(6, 4))
    yp = rng.normal(size=(6, 4))
    yp /= np.linalg.norm(yp, axis=1, keepdims=True)

    def f(x):
        return losses.infonce_gc(ad.normalize(x, axis=1),
                                 x.tape.constant(yp))

    assert ad.grad_check(f, y0) <= 1e-4


def test_infonce_rejects_single_pair():
    with pytest.raises(ValueError, match="at least 2"):
        losses.infonce_gc(np.ones((1, 3)), np.ones((1, 3)))


# ---------------------------------------------------------------------------
# virtual camera
# ---------------------------------------------------------------------------

class _ZeroRng:
    def uniform(self, lo, hi):
        return 0.0


def test_virtual_camera_zero_perturbation_is_identity():
    cam = _ring_cam(0.8)
    cam2 = losses.virtual_camera(cam, _ZeroRng())
    np.testing.assert_allclose(cam2.R, cam.R, atol=1e-12)
    np.testing.assert_allclose(cam2.t, cam.t, atol=1e-12)


def test_virtual_camera_preserves_target_radius_and_bounds():
    cam = _ring_cam(0.3)
    rng = _rng(47)
    for _ in range(50):
        cam2 = losses.virtual_camera(cam, rng)
        np.testing.assert_allclose(cam2.target, cam.target, atol=1e-12)
        r, az, el = cam2.orbit_params()
        r0, az0, el0 = cam.orbit_params()
        assert abs(r - r0) < 1e-9
        assert abs(az - az0) <= np.pi / 6 + 1e-9
        assert abs(el - el0) <= np.pi / 18 + 1e-9
        # construction already validates orthonormality; double-check
        np.testing.assert_allclose(cam2.R @ cam2.R.T, np.eye(3), atol=1e-9)


# ---------------------------------------------------------------------------
# stage composites
# ---------------------------------------------------------------------------

def test_stage1_perfect_render_is_zero_and_composition_matches():
    phi = losses.FeatureExtractor()
    rng = _rng(53)
    gt = rng.uniform(size=(16, 16, 3))
    gt_n = rng.uniform(size=(16, 16, 3))
    fg = np.ones((16, 16), dtype=bool)
    w = losses.LossWeights()
    assert losses.stage1_loss(gt, gt.copy(), gt_n, gt_n.copy(), fg, w,
                              phi) == 0.0
    pred = rng.uniform(size=(16, 16, 3))
    pred_n = rng.uniform(size=(16, 16, 3))
    total = losses.stage1_loss(gt, pred, gt_n, pred_n, fg, w, phi)
    by_hand = (losses.l1_image(gt, pred, fg)
               + w.lpips * losses.perceptual(gt, pred, phi)
               + w.n_rec * losses.normal_loss(gt_n, pred_n, fg))
    assert abs(total - by_hand) < 1e-12
    w0 = losses.LossWeights(n_rec=0.0)
    rec_only = losses.stage1_loss(gt, pred, gt_n, pred_n, fg, w0, phi)
    assert abs(rec_only - (losses.l1_image(gt, pred, fg)
                           + w0.lpips * losses.perceptual(gt, pred, phi))) \
        < 1e-12


def test_stage2_composition_and_gc_toggle():
    phi = losses.FeatureExtractor()
    rng = _rng(59)
    gt = rng.uniform(size=(16, 16, 3))
    gt_n = rng.uniform(size=(16, 16, 3))
    pred = rng.uniform(size=(16, 16, 3))
    pred_n = rng.uniform(size=(16, 16, 3))
    fg = np.ones((16, 16), dtype=bool)
    w = losses.LossWeights()
    gc = 1.7
    total = losses.stage2_loss(gt, pred, gt_n, pred_n, gc, fg, w, phi)
    by_hand = (losses.l1_image(gt, pred, fg)
               + w.lpips * losses.perceptual(gt, pred, phi)
               + w.n_rec * losses.normal_loss(gt_n, pred_n, fg)
               + w.gs * gc)
    assert abs(total - by_hand) < 1e-12
    w_nogc = losses.LossWeights(gs=0.0)
    no_gc = losses.stage2_loss(gt, pred, gt_n, pred_n, gc, fg, w_nogc, phi)
    assert abs(no_gc - (by_hand - w.gs * gc - w.n_rec * losses.normal_loss(
        gt_n, pred_n, fg) + w_nogc.n_rec * losses.normal_loss(
        gt_n, pred_n, fg))) < 1e-12
    # perfect render leaves only the gc residual
    only_gc = losses.stage2_loss(gt, gt.copy(), gt_n, gt_n.copy(), gc, fg,
                                 w, phi)
    assert abs(only_gc - w.gs * gc) < 1e-15


def test_stage1_gradient_through_tape_render_inputs():
    phi = losses.FeatureExtractor()
    rng = _rng(61)
    gt = rng.uniform(size=(16, 16, 3))
    gt_n = rng.uniform(size=(16, 16, 3))
    pred0 = gt + rng.choice([-1.0, 1.0], size=gt.shape) \
        * rng.uniform(0.05, 0.2, size=gt.shape)
    pred_n = rng.uniform(size=(16, 16, 3))
    fg = rng.uniform(size=(16, 16)) > 0.2
    w = losses.LossWeights()

    def f(x):
        tape = x.tape
        return losses.stage1_loss(tape.constant(gt), x,
                                  tape.constant(gt_n),
                                  tape.constant(pred_n), fg, w, phi)

    coords = range(0, pred0.size, 61)
    assert ad.grad_check(f, pred0, coords=coords) <= 1e-4


def test_negative_loss_weights_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        losses.LossWeights(lpips=-0.1)
