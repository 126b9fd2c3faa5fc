"""Physically based per-Gaussian shading against the environment probe.

Outgoing radiance is the quadrature sum over all probe texels

    L_o(x, w_o) = sum_i  v(x, w_i) L(w_i) f(w_i, w_o) max(0, w_i . n) dW_i

with f the Disney-style BRDF: Lambert diffuse c_a/pi plus a GGX microfacet
lobe (alpha = gamma^2), Schlick Fresnel at F0 = 0.04 (metallic is pinned to
zero), and height-correlated Smith shadowing. Setting f0 = 0 switches the
specular lobe off entirely, leaving the pure diffuse BRDF.

Every half-vector quantity is computed from dot products only
(n.h = (n.wi + n.wo)/sqrt(2 + 2 wi.wo), wo.h = sqrt((1 + wi.wo)/2)), which
keeps the batched paths free of (N, L, 3) intermediates.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import shlight

F0_DEFAULT = 0.04  # dielectric normal-incidence reflectance


@dataclass
class BRDFParams:
    c_a: np.ndarray            # albedo rgb in [0,1]^3
    gamma: float               # roughness in (0,1)
    f0: float = F0_DEFAULT     # 0 disables the specular lobe
    metallic: float = 0.0      # pinned by construction

    def __post_init__(self):
        self.c_a = np.asarray(self.c_a, dtype=np.float64)
        if self.metallic != 0.0:
            raise ValueError("metallic is fixed at zero and not optimizable")


@dataclass
class ShadePoint:
    x: np.ndarray              # world position
    normal: np.ndarray         # unit outward normal
    w_o: np.ndarray            # unit direction toward the camera
    vis: np.ndarray            # 16 mono SH coefficients


def visibility(v_coeffs, direction):
    """clamp(SH reconstruction, 0, 1); coefficients (..., 16)."""
    return np.clip(shlight.sh_reconstruct(v_coeffs, direction), 0.0, 1.0)


def _smith_term(mu, alpha2):
    return np.sqrt(alpha2 + (1.0 - alpha2) * mu * mu)


def brdf_eval(params, n, w_i, w_o):
    """BRDF value (rgb, per steradian) with broadcasting over (..., 3).

    Zero whenever the surface does not see the light or the camera
    (n.w_i <= 0 or n.w_o <= 0).
    """
    n = np.asarray(n, dtype=np.float64)
    w_i = np.asarray(w_i, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    mu_i = (n * w_i).sum(-1)
    mu_o = (n * w_o).sum(-1)
    live = (mu_i > 0) & (mu_o > 0)

    diffuse = params.c_a / np.pi
    out = np.where(live[..., None], diffuse, 0.0)
    if params.f0 == 0.0:
        return out

    alpha = float(params.gamma) ** 2
    alpha2 = alpha * alpha
    c = (w_i * w_o).sum(-1)
    inv_len_h = 1.0 / np.sqrt(np.maximum(2.0 + 2.0 * c, 1e-12))
    nh = (mu_i + mu_o) * inv_len_h
    oh = np.sqrt(np.maximum((1.0 + c) / 2.0, 0.0))
    d = alpha2 / (np.pi * (nh * nh * (alpha2 - 1.0) + 1.0) ** 2)
    f = params.f0 + (1.0 - params.f0) * (1.0 - oh) ** 5
    denom = 2.0 * (mu_o * _smith_term(mu_i, alpha2)
                   + mu_i * _smith_term(mu_o, alpha2))
    spec = d * f / np.maximum(denom, 1e-12)
    return out + np.where(live, spec, 0.0)[..., None]


def shade(point, params, probe):
    """Outgoing radiance at one ShadePoint under the probe."""
    dirs, omega = probe.directions()
    vis = visibility(point.vis, dirs)
    cos_i = np.maximum(0.0, dirs @ np.asarray(point.normal, dtype=np.float64))
    f = brdf_eval(params, point.normal, dirs, point.w_o)
    return (probe.radiance.reshape(-1, 3) * f
            * (vis * cos_i * omega)[:, None]).sum(axis=0)


def shade_batch(c_a, gamma, vis_coeffs, normal, w_o, probe_flat,
                dirs, omega, f0=F0_DEFAULT):
    """Vectorized shading of N points; all-numpy reference path.

    c_a (N,3), gamma (N,), vis_coeffs (N,16), normal/w_o (N,3),
    probe_flat (L,3), dirs (L,3), omega (L,). Returns (N,3).
    """
    y = shlight.sh_basis(dirs)                       # (L,16)
    vis = np.clip(vis_coeffs @ y.T, 0.0, 1.0)        # (N,L)
    mu_i = np.maximum(0.0, normal @ dirs.T)          # (N,L)
    mu_o = (normal * w_o).sum(1, keepdims=True)      # (N,1)
    base = vis * mu_i * omega                        # (N,L)
    out = (c_a / np.pi) * (base @ probe_flat)
    if f0 == 0.0:
        return np.where(mu_o > 0, out, 0.0)
    alpha2 = gamma[:, None] ** 4
    c = w_o @ dirs.T                                 # wi.wo, (N,L)
    inv_len_h = 1.0 / np.sqrt(np.maximum(2.0 + 2.0 * c, 1e-12))
    nh = (mu_i + mu_o) * inv_len_h
    oh = np.sqrt(np.maximum((1.0 + c) / 2.0, 0.0))
    d = alpha2 / (np.pi * (nh * nh * (alpha2 - 1.0) + 1.0) ** 2)
    f = f0 + (1.0 - f0) * (1.0 - oh) ** 5
    denom = 2.0 * (mu_o * _smith_term(mu_i, alpha2)
                   + mu_i * _smith_term(mu_o, alpha2))
    spec = np.where((mu_i > 0) & (mu_o > 0), d * f / np.maximum(denom, 1e-12),
                    0.0)
    out = out + (base * spec) @ probe_flat
    return np.where(mu_o > 0, out, 0.0)


def shade_t(c_a, gamma, vis_coeffs, normal, w_o, probe_flat, dirs, omega,
            f0=F0_DEFAULT):
    """Tape twin of shade_batch; arguments may be Tensors or arrays.

    The camera-facing test (mu_o > 0) is applied as a constant mask taken
    from forward values: its gradient is zero almost everywhere, and
    freezing it keeps the tape free of branch ops.
    """
    tape = None
    for arg in (c_a, gamma, vis_coeffs, normal, w_o, probe_flat):
        if isinstance(arg, ad.Tensor):
            tape = arg.tape
            break
    if tape is None:
        raise ad.TapeError("shade_t needs at least one Tensor argument")

    def lift(a):
        return a if isinstance(a, ad.Tensor) else \
            tape.constant(np.asarray(a, dtype=np.float64))

    c_a, gamma, vis_coeffs = lift(c_a), lift(gamma), lift(vis_coeffs)
    normal, w_o, probe_flat = lift(normal), lift(w_o), lift(probe_flat)
    y = shlight.sh_basis(np.asarray(dirs))           # constants
    vis = ad.clamp(ad.matmul(vis_coeffs, y.T), 0.0, 1.0)
    mu_i = ad.clamp_min(ad.matmul(normal, np.asarray(dirs).T), 0.0)
    mu_o = (normal * w_o).sum(axis=1, keepdims=True)
    base = vis * mu_i * np.asarray(omega)
    live_o = (mu_o.value > 0).astype(np.float64)
    out = (c_a * (1.0 / np.pi)) * ad.matmul(base, probe_flat)
    if f0 == 0.0:
        return out * live_o
    if len(gamma.shape) == 1:
        gamma = gamma.reshape(gamma.shape[0], 1)
    alpha2 = ad.square(ad.square(gamma))
    c = ad.matmul(w_o, np.asarray(dirs).T)
    inv_len_h = 1.0 / ad.sqrt(ad.clamp_min(2.0 + 2.0 * c, 1e-12))
    nh = (mu_i + mu_o) * inv_len_h
    oh = ad.sqrt(ad.clamp_min((1.0 + c) * 0.5, 0.0))
    one_m_oh = ad.clamp_min(1.0 - oh, 0.0)
    d = alpha2 / ((nh * nh * (alpha2 - 1.0) + 1.0) ** 2 * np.pi)
    fr = f0 + (1.0 - f0) * ad.square(ad.square(one_m_oh)) * one_m_oh
    st_i = ad.sqrt(alpha2 + (1.0 - alpha2) * mu_i * mu_i)
    st_o = ad.sqrt(alpha2 + (1.0 - alpha2) * mu_o * mu_o)
    denom = ad.clamp_min((mu_o * st_i + mu_i * st_o) * 2.0, 1e-12)
    live_i = (mu_i.value > 0).astype(np.float64)
    spec = d * fr / denom * live_i
    out = out + ad.matmul(base * spec, probe_flat)
    return out * live_o
