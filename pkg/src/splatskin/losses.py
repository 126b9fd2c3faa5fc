"""Training objectives.

Image terms operate on (H, W, C) tensors and restrict themselves to the
ground-truth foreground (alpha > 0). The absolute-value kink is rounded off
with a smooth-L1 at beta = 1e-6: far from zero the value is |d| - beta/2,
inside the band it is quadratic, and the derivative is continuous across the
joint, so finite-difference probes of any composite loss stay meaningful.

The perceptual term runs both images through a fixed multi-scale
convolutional stack (a stand-in for a pretrained network): three stride-2
valid 3x3 convolutions with tanh, widths 16/32/64, weights drawn once from a
seeded generator and never trained. Feature vectors are unit-normalized per
location before comparison, like LPIPS does.

The geometric-consistency loss contrasts feature vectors sampled at shared
pixel locations of two renders of the same posed avatar (training camera vs
a perturbed virtual camera), restricted to regions covered by Gaussians
facing both cameras. InfoNCE keeps the positive inside the denominator, so
the uniform-similarity value is exactly ln N per positive.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import raster

SMOOTH_L1_BETA = 1e-6
GRAZE_MARGIN_DEG = 9.0     # visibility margin against grazing normals
FEATURE_PAIRS = 64         # sampled feature pairs per scale


@dataclass
class LossWeights:
    lpips: float = 0.1     # perceptual term inside the reconstruction losses
    n_rec: float = 0.05    # normal reconstruction
    gs: float = 0.01       # geometric consistency

    def __post_init__(self):
        if min(self.lpips, self.n_rec, self.gs) < 0:
            raise ValueError("loss weights must be non-negative")


def smooth_l1(diff):
    """Elementwise |d| with the kink replaced by a quadratic below beta."""
    beta = SMOOTH_L1_BETA
    d2 = ad.square(diff)
    absd = ad.sqrt(d2 + 1e-300)
    outer = (np.abs(diff.value) >= beta).astype(np.float64)
    return outer * (absd - 0.5 * beta) + (1.0 - outer) * (0.5 / beta) * d2


def foreground_mask(gt_alpha):
    return np.asarray(gt_alpha) > 0


def l1_image(a, b, fg):
    """Masked mean absolute difference; `fg` is a (H, W) bool array."""
    sa = tuple(a.shape) if hasattr(a, "shape") else np.shape(a)
    sb = tuple(b.shape) if hasattr(b, "shape") else np.shape(b)
    if sa != sb:
        raise ValueError(f"image shapes differ: {sa} vs {sb}")
    fg = np.asarray(fg, dtype=np.float64)
    if fg.shape != sa[:2]:
        raise ValueError(f"mask shape {fg.shape} does not match image {sa}")
    count = fg.sum() * sa[2]
    if count == 0:
        raise ValueError("empty foreground mask")
    diff = a - b if isinstance(a, ad.Tensor) or isinstance(b, ad.Tensor) \
        else np.asarray(a) - np.asarray(b)
    if not isinstance(diff, ad.Tensor):
        d = np.abs(diff)
        out = np.where(d >= SMOOTH_L1_BETA, d - 0.5 * SMOOTH_L1_BETA,
                       (0.5 / SMOOTH_L1_BETA) * d * d)
        return float((out * fg[:, :, None]).sum() / count)
    return (smooth_l1(diff) * fg[:, :, None]).sum() * (1.0 / count)


def normal_loss(gt_n, ren_n, fg):
    """Masked L1 between [0,1]-encoded normal images."""
    return l1_image(gt_n, ren_n, fg)


class FeatureExtractor:
    """Fixed seeded 3-scale conv stack; features unit-normalized per pixel."""

    WIDTHS = (16, 32, 64)

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.weights = []
        cin = 3
        for cout in self.WIDTHS:
            fan_in = 9 * cin
            w = rng.normal(size=(fan_in, cout)) * np.sqrt(2.0 / fan_in)
            self.weights.append(w)
            cin = cout
        self.seed = seed

    def features(self, img):
        """List of three (h, w, c) maps, tape tensors iff `img` is one."""
        on_tape = isinstance(img, ad.Tensor)
        x = img if on_tape else np.asarray(img, dtype=np.float64)
        out = []
        for w in self.weights:
            h, wd, c = x.shape
            oh, ow = (h - 3) // 2 + 1, (wd - 3) // 2 + 1
            if oh < 1 or ow < 1:
                raise ValueError("image too small for the feature stack")
            if on_tape:
                cols = ad.unfold(x, 3, 3, 2)
                x = ad.tanh(ad.matmul(cols, w)).reshape(oh, ow, w.shape[1])
                out.append(ad.normalize(x, axis=2))
            else:
                win = np.lib.stride_tricks.sliding_window_view(
                    x, (3, 3), axis=(0, 1))[::2, ::2]
                cols = np.transpose(win, (0, 1, 3, 4, 2)).reshape(
                    oh * ow, 9 * c)
                x = np.tanh(cols @ w).reshape(oh, ow, w.shape[1])
                n = np.linalg.norm(x, axis=2, keepdims=True)
                out.append(x / np.maximum(n, 1e-30))
        return out


def perceptual(a, b, phi):
    """Mean squared distance between normalized features, averaged over
    the three scales."""
    fa = phi.features(a)
    fb = phi.features(b)
    total = None
    for xa, xb in zip(fa, fb):
        term = ad.square(xa - xb).mean() if isinstance(xa, ad.Tensor) \
            or isinstance(xb, ad.Tensor) else float(((xa - xb) ** 2).mean())
        total = term if total is None else total + term
    return total * (1.0 / len(fa))


# ---------------------------------------------------------------------------
# geometric consistency
# ---------------------------------------------------------------------------

@dataclass
class CoVisibilityMask:
    visible: np.ndarray    # (N,) bool, Gaussian faces the second camera
    mask: np.ndarray       # (H, W) bool in the first camera's image plane

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)


def facing_camera(x, normals, cam, margin_deg=GRAZE_MARGIN_DEG):
    """True where the angle between n and (camera - x) is at most
    90 deg - margin: grazing and back-facing Gaussians drop out."""
    d = cam.center[None] - np.asarray(x, dtype=np.float64)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-30)
    cosine = (np.asarray(normals, dtype=np.float64) * d).sum(axis=1)
    return cosine >= np.sin(np.deg2rad(margin_deg))


def covisibility_mask(x, normals, covs, opacities, cam_a, cam_b,
                      margin_deg=GRAZE_MARGIN_DEG):
    """Pixels of cam_a's view covered by Gaussians that also face cam_b.

    The indicator payload of every Gaussian (1 if cam_b-facing, else 0) is
    composited normally, so occlusion by non-covisible Gaussians lowers the
    indicator; pixels keep the flag where the composited value exceeds 0.5.
    """
    vis = facing_camera(x, normals, cam_b, margin_deg)
    splats = raster.project_scene(np.asarray(x), np.asarray(covs),
                                  np.asarray(opacities),
                                  vis.astype(np.float64)[:, None], cam_a)
    img = raster.rasterize(splats, cam_a)
    return CoVisibilityMask(vis, img.channels[:, :, 0] > 0.5)


def _nearest_rows(n_out, n_in):
    return np.minimum((((np.arange(n_out) + 0.5) * n_in) / n_out)
                      .astype(np.intp), n_in - 1)


def downsample_mask(mask, shape):
    """Nearest-neighbor downsample of a boolean mask to (h, w)."""
    h, w = shape
    rr = _nearest_rows(h, mask.shape[0])
    cc = _nearest_rows(w, mask.shape[1])
    return mask[np.ix_(rr, cc)]


def sample_feature_pairs(feats_a, feats_b, mask, n=FEATURE_PAIRS, rng=None):
    """Draw n aligned feature-vector pairs per scale inside the mask.

    Returns (ys, yps, replaced): per-scale (n, C) feature stacks from each
    image at identical locations. Positions are drawn without replacement;
    if a scale has fewer than n masked positions the draw falls back to
    replacement and the `replaced` flag is set. An empty mask at any scale
    is an error.
    """
    rng = rng or np.random.default_rng(0)
    ys, yps = [], []
    replaced = False
    for fa, fb in zip(feats_a, feats_b):
        h, w = fa.shape[0], fa.shape[1]
        small = downsample_mask(mask, (h, w))
        pos = np.argwhere(small)
        if len(pos) == 0:
            raise ValueError(
                f"covisibility mask is empty at feature scale {h}x{w}")
        if len(pos) < n:
            sel = rng.integers(0, len(pos), size=n)
            replaced = True
        else:
            sel = rng.choice(len(pos), size=n, replace=False)
        rr, cc = pos[sel, 0], pos[sel, 1]
        if isinstance(fa, ad.Tensor):
            ys.append(fa[rr, cc])
        else:
            ys.append(np.asarray(fa)[rr, cc])
        if isinstance(fb, ad.Tensor):
            yps.append(fb[rr, cc])
        else:
            yps.append(np.asarray(fb)[rr, cc])
    return ys, yps, replaced


def infonce_gc(ys, yps):
    """Contrastive alignment over one or more scales of paired features.

    Each scale contributes sum_j -log softmax(Y Y'^T)[j, j]; the positive
    logit sits inside the denominator.
    """
    if isinstance(ys, (ad.Tensor, np.ndarray)):
        ys, yps = [ys], [yps]
    total = None
    for y, yp in zip(ys, yps):
        n = y.shape[0]
        if n < 2:
            raise ValueError("contrastive loss needs at least 2 pairs")
        on_tape = isinstance(y, ad.Tensor) or isinstance(yp, ad.Tensor)
        if on_tape:
            logits = ad.matmul(y, ad.transpose(yp, (1, 0))
                               if isinstance(yp, ad.Tensor) else yp.T)
            p = ad.softmax(logits, axis=1)
            term = -(ad.log(p) * np.eye(n)).sum()
        else:
            logits = np.asarray(y) @ np.asarray(yp).T
            logits = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            term = float(-np.log(np.diag(p)).sum())
        total = term if total is None else total + term
    return total


def virtual_camera(cam, rng):
    """Random orbit perturbation: azimuth within +-30 deg, elevation within
    +-10 deg, radius and look-at target unchanged."""
    radius, az, el = cam.orbit_params()
    az = az + rng.uniform(-np.pi / 6.0, np.pi / 6.0)
    el = el + rng.uniform(-np.pi / 18.0, np.pi / 18.0)
    return type(cam).from_orbit(cam.target, radius, az, el, cam.fx, cam.fy,
                                cam.width, cam.height)


# ---------------------------------------------------------------------------
# stage composites
# ---------------------------------------------------------------------------

def stage1_loss(i_gt, i_cs, i_gt_n, i_n, fg, weights, phi):
    """Reconstruction (L1 + perceptual on the SH-color render) plus
    weighted normal reconstruction."""
    rec = l1_image(i_gt, i_cs, fg) + weights.lpips * perceptual(i_gt, i_cs,
                                                                phi)
    return rec + weights.n_rec * normal_loss(i_gt_n, i_n, fg)


def stage2_loss(i_gt, i_pbr, i_gt_n, i_n, gc_term, fg, weights, phi):
    """PBR reconstruction plus normal and geometric-consistency terms;
    `gc_term` is the already-reduced contrastive scalar (0 disables it)."""
    pbr_rec = l1_image(i_gt, i_pbr, fg) + weights.lpips * perceptual(
        i_gt, i_pbr, phi)
    return pbr_rec + weights.n_rec * normal_loss(i_gt_n, i_n, fg) \
        + weights.gs * gc_term
