"""Differentiable Gaussian splatting.

Projection follows the EWA approximation: the 3D covariance is pushed
through the perspective Jacobian at the Gaussian center,
Sigma' = J W Sigma W^T J^T, with a 0.3 px isotropic floor on the diagonal.
Compositing is classic front-to-back alpha blending over depth-sorted
splats, alpha_i = o_i exp(-0.5 d^T Sigma'^-1 d), contributions below 1/255
skipped entirely (no color, no occlusion).

The whole image settles in one fused tape primitive ("composite") whose
backward pass is derived in closed form: with weights w_i = alpha_i T_i and
T_i the exclusive transmittance product, dL/dalpha_i = gw_i T_i - S_i /
(1 - alpha_i) where S_i accumulates gw_k w_k over splats behind i. The
depth sort and the near-plane/extent culls are data-dependent index
selections; gradients flow through the selection (gather), never through
the ordering itself.

rasterize_bruteforce replays the identical contract one pixel and one splat
at a time with no vectorization shortcuts, as the correctness oracle.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import pbr, shlight

NEAR = 0.01            # camera-space near plane
COV_FLOOR = 0.3        # isotropic 2D covariance floor, px^2
ALPHA_CUTOFF = 1.0 / 255.0
ALPHA_MAX = 1.0 - 1e-12
_BLOCK = 4096          # pixels per compositing block


# ---------------------------------------------------------------------------
# fused compositing primitive
# ---------------------------------------------------------------------------

def _alpha_block(mu, conic, opacity, px, py):
    du = px[None, :] - mu[:, 0:1]
    dv = py[None, :] - mu[:, 1:2]
    q = 0.5 * (conic[:, 0:1] * du * du + conic[:, 2:3] * dv * dv) \
        + conic[:, 1:2] * du * dv
    eq = np.exp(-q)
    a_raw = opacity[:, None] * eq
    alpha = np.where(a_raw < ALPHA_CUTOFF, 0.0, np.minimum(a_raw, ALPHA_MAX))
    return du, dv, eq, a_raw, alpha


def _transmittance(alpha):
    t_incl = np.cumprod(1.0 - alpha, axis=0)
    t_excl = np.empty_like(t_incl)
    t_excl[0] = 1.0
    t_excl[1:] = t_incl[:-1]
    return t_excl


def _composite_fwd(vals, height, width):
    mu, conic, opacity, payload = vals
    m, c = payload.shape
    out = np.zeros((height * width, c + 1))
    if m == 0:
        return out.reshape(height, width, c + 1)
    pix = np.arange(height * width)
    pxf, pyf = (pix % width).astype(np.float64), (pix // width).astype(np.float64)
    for lo in range(0, height * width, _BLOCK):
        hi = min(lo + _BLOCK, height * width)
        alpha = _alpha_block(mu, conic, opacity, pxf[lo:hi], pyf[lo:hi])[-1]
        w = alpha * _transmittance(alpha)
        out[lo:hi, :c] = w.T @ payload
        out[lo:hi, c] = w.sum(axis=0)
    return out.reshape(height, width, c + 1)


def _composite_vjp(grad, out, vals, height, width):
    mu, conic, opacity, payload = vals
    m, c = payload.shape
    if m == 0:
        return [np.zeros_like(v) for v in vals]
    grad = grad.reshape(height * width, c + 1)
    g_mu = np.zeros_like(mu)
    g_conic = np.zeros_like(conic)
    g_o = np.zeros_like(opacity)
    g_pay = np.zeros_like(payload)
    pix = np.arange(height * width)
    pxf, pyf = (pix % width).astype(np.float64), (pix // width).astype(np.float64)
    for lo in range(0, height * width, _BLOCK):
        hi = min(lo + _BLOCK, height * width)
        du, dv, eq, a_raw, alpha = _alpha_block(mu, conic, opacity,
                                                pxf[lo:hi], pyf[lo:hi])
        t_excl = _transmittance(alpha)
        w = alpha * t_excl
        g_out = grad[lo:hi, :c]                    # (P, C)
        g_a = grad[lo:hi, c]                       # (P,)
        gw = payload @ g_out.T + g_a[None, :]      # (M, P)
        g_pay += w @ g_out
        # S_i = sum_{k>i} gw_k w_k: reverse exclusive cumulative sum
        gww = gw * w
        s = np.zeros_like(gww)
        s[:-1] = gww[::-1].cumsum(axis=0)[::-1][1:]
        # d alpha / d a_raw is 1 on the live interval, 0 where the splat is
        # skipped or pinned at the ceiling
        live = (a_raw >= ALPHA_CUTOFF) & (a_raw <= ALPHA_MAX)
        g_alpha = np.where(live, gw * t_excl - s / (1.0 - alpha), 0.0)
        g_o += (eq * g_alpha).sum(axis=1)
        gq = -a_raw * g_alpha
        g_conic[:, 0] += (0.5 * du * du * gq).sum(axis=1)
        g_conic[:, 1] += (du * dv * gq).sum(axis=1)
        g_conic[:, 2] += (0.5 * dv * dv * gq).sum(axis=1)
        a_, b_, c_ = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
        g_mu[:, 0] += (-(a_ * du + b_ * dv) * gq).sum(axis=1)
        g_mu[:, 1] += (-(b_ * du + c_ * dv) * gq).sum(axis=1)
    return [g_mu, g_conic, g_o, g_pay]


ad.register_op("composite", _composite_fwd, _composite_vjp)


def composite_t(mu, conic, opacity, payload, height, width):
    """Tape compositing of depth-ordered splats -> (H, W, C+1) image+alpha."""
    return ad.apply_op("composite", mu, conic, opacity, payload,
                       height=height, width=width)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@dataclass
class Splat2D:
    mu: np.ndarray         # pixel-space mean (2,)
    cov: np.ndarray        # 2x2 floored covariance
    depth: float           # camera z
    payload: np.ndarray    # composited vector (C,)
    opacity: float

    def conic(self):
        det = self.cov[0, 0] * self.cov[1, 1] - self.cov[0, 1] ** 2
        if det <= 0:
            raise ValueError("singular 2D covariance after flooring")
        return np.array([self.cov[1, 1], -self.cov[0, 1],
                         self.cov[0, 0]]) / det


def project_np(mu, cov, cam):
    """EWA projection of one Gaussian; returns (mu2d, cov2d, depth) or None
    when the center is behind the near plane."""
    pc = cam.world_to_cam(np.asarray(mu, dtype=np.float64)[None])[0]
    if pc[2] <= NEAR:
        return None
    tx, ty, tz = pc
    mu2d = np.array([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy])
    J = np.array([[cam.fx / tz, 0.0, -cam.fx * tx / tz ** 2],
                  [0.0, cam.fy / tz, -cam.fy * ty / tz ** 2]])
    M = J @ cam.R
    cov2d = M @ np.asarray(cov, dtype=np.float64) @ M.T
    cov2d = cov2d + COV_FLOOR * np.eye(2)
    return mu2d, cov2d, tz


def project_t(mu, cov, cam):
    """Batched tape projection.

    mu (N,3), cov (N,3,3) Tensors -> (mu2d (N,2), conic (N,3) packed
    [a, b, c] of the inverse floored covariance, depth values (N,)).
    Callers must already have culled to z > NEAR (the inverse here is
    well-defined for any finite depth, but the physics is not).
    """
    n = mu.shape[0]
    pc = ad.matmul(mu, cam.R.T) + cam.t
    tx, ty, tz = pc[:, 0:1], pc[:, 1:2], pc[:, 2:3]
    inv_z = 1.0 / tz
    u = cam.fx * tx * inv_z + cam.cx
    v = cam.fy * ty * inv_z + cam.cy
    mu2d = ad.concat([u, v], axis=1)
    zero = tx * 0.0
    j = ad.concat([cam.fx * inv_z, zero, -cam.fx * tx * inv_z * inv_z,
                   zero, cam.fy * inv_z, -cam.fy * ty * inv_z * inv_z],
                  axis=1).reshape(n, 2, 3)
    m = ad.matmul(j, cam.R)
    cov2d = ad.matmul(ad.matmul(m, cov), ad.transpose(m, (0, 2, 1)))
    a = cov2d[:, 0, 0] + COV_FLOOR
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + COV_FLOOR
    det = a * c - b * b
    conic = ad.concat([(c / det).reshape(n, 1), (-b / det).reshape(n, 1),
                       (a / det).reshape(n, 1)], axis=1)
    return mu2d, conic, pc[:, 2]


def project_scene(means, covs, opacities, payloads, cam):
    """Project world Gaussians to Splat2D, dropping those behind NEAR."""
    out = []
    for mu, cov, o, p in zip(means, covs, opacities, payloads):
        proj = project_np(mu, cov, cam)
        if proj is None:
            continue
        mu2d, cov2d, z = proj
        out.append(Splat2D(mu=mu2d, cov=cov2d, depth=z,
                           payload=np.asarray(p, dtype=np.float64),
                           opacity=float(o)))
    return out


def _extent_cull(mu2d, conic, opacity, width, height):
    """Indices of splats that could reach alpha >= cutoff somewhere on
    screen. q >= 0.5 lam_min(conic) |d|^2 with |d| the distance from the
    center to the pixel rectangle bounds the achievable alpha from above;
    anything under the cutoff would be skipped by compositing anyway, so
    dropping it here cannot change the image. The threshold is slightly
    loosened to keep the bound conservative under rounding."""
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    lam_min = 0.5 * (a + c - np.sqrt(np.maximum((a - c) ** 2 + 4 * b * b, 0.0)))
    dx = np.maximum(np.maximum(-mu2d[:, 0], mu2d[:, 0] - (width - 1)), 0.0)
    dy = np.maximum(np.maximum(-mu2d[:, 1], mu2d[:, 1] - (height - 1)), 0.0)
    d2 = dx * dx + dy * dy
    peak = opacity * np.exp(-0.5 * np.maximum(lam_min, 0.0) * d2)
    return np.nonzero(peak >= ALPHA_CUTOFF * (1.0 - 1e-9))[0]


# ---------------------------------------------------------------------------
# image containers and reference paths
# ---------------------------------------------------------------------------

@dataclass
class RenderedImage:
    channels: np.ndarray   # (H, W, C)
    alpha: np.ndarray      # (H, W)
    semantics: str = "rgb"


def _sort_order(depths):
    return np.argsort(depths, kind="stable")


def rasterize(splats, cam):
    """Composite projected splats into an image (vectorized path)."""
    h, w = cam.height, cam.width
    if not splats:
        return RenderedImage(np.zeros((h, w, 3)), np.zeros((h, w)))
    order = _sort_order(np.array([s.depth for s in splats]))
    splats = [splats[i] for i in order]
    mu = np.array([s.mu for s in splats])
    conic = np.array([s.conic() for s in splats])
    opacity = np.array([s.opacity for s in splats])
    payload = np.array([s.payload for s in splats])
    out = _composite_fwd([mu, conic, opacity, payload], h, w)
    return RenderedImage(out[:, :, :-1], out[:, :, -1])


def rasterize_bruteforce(splats, cam):
    """Per-pixel, per-splat reference with no batching or shortcuts."""
    h, w = cam.height, cam.width
    c = len(splats[0].payload) if splats else 3
    img = np.zeros((h, w, c))
    acc = np.zeros((h, w))
    order = _sort_order(np.array([s.depth for s in splats])) if splats else []
    ordered = [splats[i] for i in order]
    conics = [s.conic() for s in ordered]
    for py in range(h):
        for px in range(w):
            t = 1.0
            for s, con in zip(ordered, conics):
                du = px - s.mu[0]
                dv = py - s.mu[1]
                q = 0.5 * (con[0] * du * du + con[2] * dv * dv) \
                    + con[1] * du * dv
                a = s.opacity * np.exp(-q)
                if a < ALPHA_CUTOFF:
                    continue
                a = min(a, ALPHA_MAX)
                img[py, px] += s.payload * (a * t)
                acc[py, px] += a * t
                t *= 1.0 - a
    return RenderedImage(img, acc)


# ---------------------------------------------------------------------------
# payload assembly
# ---------------------------------------------------------------------------

def view_dirs_t(x_obs, cam_center):
    """Unit directions Gaussian -> camera as a Tensor (N, 3)."""
    return ad.normalize(cam_center - x_obs, axis=1)


def sh_color_payload(c_s, x_obs, cam_center):
    """Evaluate per-Gaussian SH color toward the camera: (N, 3)."""
    dirs = ad.normalize(x_obs - cam_center, axis=1)
    y = shlight.sh_basis_t(dirs)                    # (N, 16)
    n = c_s.shape[0]
    return ad.matmul(c_s, y.reshape(n, 16, 1)).reshape(n, 3)


def render_t(tape, cam, x_obs, cov_obs, opacity, payloads):
    """Cull, sort and composite; returns the (H, W, C+1) image Tensor.

    payloads: list of (N, k) Tensors concatenated into one compositing
    payload so all channels share identical blending weights.
    """
    z = cam.world_to_cam(x_obs.value)[:, 2]
    keep = np.nonzero(z > NEAR)[0]
    h, w = cam.height, cam.width
    payload = ad.concat(payloads, axis=1)
    if keep.size == 0:
        zero = tape.constant(np.zeros((h, w, payload.shape[1] + 1)))
        drain = x_obs.sum() + cov_obs.sum() + opacity.sum() + payload.sum()
        return zero + 0.0 * drain
    if keep.size < x_obs.shape[0]:
        x_obs = ad.take(x_obs, keep)
        cov_obs = ad.take(cov_obs, keep)
        opacity = ad.take(opacity, keep)
        payload = ad.take(payload, keep)
    mu2d, conic, depth = project_t(x_obs, cov_obs, cam)
    vis = _extent_cull(mu2d.value, conic.value,
                       opacity.value.reshape(-1), w, h)
    order = vis[_sort_order(depth.value[vis])]
    mu2d = ad.take(mu2d, order)
    conic = ad.take(conic, order)
    op = ad.take(opacity.reshape(opacity.shape[0]), order)
    payload = ad.take(payload, order)
    return composite_t(mu2d, conic, op, payload, h, w)
