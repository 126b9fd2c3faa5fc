"""Canonical-space Gaussian avatar.

The avatar stores fixed canonical positions (template vertices) and decodes
every other per-Gaussian attribute from coordinate MLPs:

  geometry  D_g : posenc(x_c) -> opacity, rotation quaternion, scale, normal
  appearance     posenc(x_c) -> c_s (view-dependent SH color, used in stage 1)
                 posenc(x_c) -> c_a albedo, gamma roughness, v visibility SH

The appearance encoder is realized as two parallel MLP trunks over the same
input so the stage-1 freeze (PBR branch untouched) and the stage-2 removal
of c_s are exact parameter-set statements rather than masking tricks.

Raw MLP outputs map through fixed activations chosen so every attribute
satisfies its domain: sigmoid for opacity/albedo/roughness, exp-with-cap
for scales, additive identity fallback + renormalization for quaternions
and normals. With all-zero weights this decodes to o=0.5, r=(1,0,0,0),
s=1 per axis (pre-cap), c_a=(.5,.5,.5), gamma=0.5.
"""

import numpy as np

from . import autodiff as ad
from . import nn

POSENC_OCTAVES = 6
GEO_OUT = 11          # o(1) + quat(4) + scale(3) + normal(3)
CS_OUT = 48           # degree-3 SH coefficients, 16 per RGB channel
PBR_OUT = 20          # albedo(3) + roughness(1) + visibility SH(16)


def covariance(r, s):
    """Sigma = R diag(s^2) R^T for unit quaternion(s) r and scale(s) s.

    Accepts single (4,), (3,) or batches (N,4), (N,3); always symmetric PSD
    by construction.
    """
    R = ad.quat_to_rotmat(r)
    s = np.asarray(s, dtype=np.float64)
    return (R * (s * s)[..., None, :]) @ np.swapaxes(R, -1, -2)


def covariance_t(quat, scale):
    """Tape version: (N,4), (N,3) -> (N,3,3)."""
    R = ad.quat_to_rotmat_t(quat)
    s2 = ad.square(scale).reshape(scale.shape[0], 1, 3)
    return ad.matmul(R * s2, ad.transpose(R, (0, 2, 1)))


class GaussianAvatar:
    """Fixed canonical positions + attribute-decoder parameters."""

    def __init__(self, x_c, params, scale_cap, width=128):
        x_c = np.asarray(x_c, dtype=np.float64)
        if x_c.ndim != 2 or x_c.shape[1] != 3 or x_c.shape[0] < 1:
            raise ValueError(f"x_c must be (N, 3) with N >= 1, got {x_c.shape}")
        if not np.all(np.isfinite(x_c)):
            raise ValueError("x_c contains non-finite coordinates")
        self.x_c = x_c
        self.params = params
        self.scale_cap = float(scale_cap)
        self.width = width
        # encoder input is fixed because canonical positions are not optimized
        self.x_enc = nn.posenc_np(x_c, POSENC_OCTAVES)

    @property
    def n(self):
        return self.x_c.shape[0]

    # ---- construction -----------------------------------------------------

    @classmethod
    def init_from_template(cls, vertices, rng=None, width=128):
        """Build an avatar whose Gaussians sit at the template vertices.

        Decoder weights start near zero with output biases placed so the
        initial avatar is usable: small nearly-isotropic splats, opacity
        0.8, visibility ~0.9, mid-gray colors.
        """
        rng = rng or np.random.default_rng(0)
        v = np.asarray(vertices, dtype=np.float64)
        if v.size == 0:
            raise ValueError("template has no vertices")
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {v.shape}")
        n = v.shape[0]
        diag = np.linalg.norm(v.max(axis=0) - v.min(axis=0)) if n > 1 else 0.0
        scale_cap = 0.1 * max(diag, 1.0)

        if n > 1:
            # mean nearest-neighbor distance sets the initial splat size
            d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
            np.fill_diagonal(d2, np.inf)
            nn_dist = float(np.sqrt(d2.min(axis=1)).mean())
        else:
            nn_dist = 0.05 * max(diag, 1.0)
        s0 = float(np.clip(0.7 * nn_dist, 1e-4, 0.99 * scale_cap))

        in_dim = nn.posenc_dim(3, POSENC_OCTAVES)
        params = {}
        for prefix, out in (("dg", GEO_OUT), ("da_cs", CS_OUT),
                            ("da_pbr", PBR_OUT)):
            params.update(nn.init_mlp(rng, [in_dim, width, width, width, out],
                                      prefix))
            # small last layer: decoded attributes start near the biases
            params[f"{prefix}.w3"] *= 1e-2
        b = params["dg.b3"]
        b[0] = np.log(0.8 / 0.2)        # sigmoid -> opacity 0.8
        b[1] = 1.0                      # quaternion identity component
        b[5:8] = np.log(s0)             # exp -> initial scale
        b[10] = 1.0                     # normal fallback +z
        params["da_pbr.b3"][4] = 0.9 / 0.28209479177387814  # visibility DC ~0.9
        return cls(v, params, scale_cap, width)

    # ---- decoding ---------------------------------------------------------

    def lift(self, tape, prefixes=("dg", "da_cs", "da_pbr")):
        """Tape leaves for the selected parameter groups."""
        return {k: tape.leaf(k, v) for k, v in self.params.items()
                if k.split(".")[0] in prefixes}

    def encode_geometry(self, leaves):
        """Decode (opacity, quaternion, scale, normal) as tape tensors."""
        tape = next(iter(leaves.values())).tape
        x = tape.constant(self.x_enc)
        raw = nn.mlp_apply(leaves, "dg", x)
        o = ad.sigmoid(raw[:, 0:1])
        quat = ad.normalize(raw[:, 1:5] + np.array([[1.0, 0.0, 0.0, 0.0]]),
                            axis=1)
        scale = ad.clamp_max(ad.exp(raw[:, 5:8]), self.scale_cap)
        normal = ad.normalize(raw[:, 8:11] + np.array([[0.0, 0.0, 1.0]]),
                              axis=1)
        return o, quat, scale, normal

    def encode_color_sh(self, leaves):
        """c_s: (N, 3, 16) view-dependent color coefficients."""
        tape = next(iter(leaves.values())).tape
        raw = nn.mlp_apply(leaves, "da_cs", tape.constant(self.x_enc))
        return raw.reshape(self.n, 3, 16)

    def encode_pbr(self, leaves):
        """(c_a albedo, gamma roughness, v visibility coeffs) tape tensors."""
        tape = next(iter(leaves.values())).tape
        raw = nn.mlp_apply(leaves, "da_pbr", tape.constant(self.x_enc))
        c_a = ad.sigmoid(raw[:, 0:3])
        gamma = ad.sigmoid(raw[:, 3:4])
        vis = raw[:, 4:20]
        return c_a, gamma, vis

    def decode_np(self):
        """Decode every attribute to plain arrays (validated finite)."""
        tape = ad.Tape()
        leaves = self.lift(tape)
        o, quat, scale, normal = self.encode_geometry(leaves)
        c_s = self.encode_color_sh(leaves)
        c_a, gamma, vis = self.encode_pbr(leaves)
        out = {"opacity": o.value[:, 0], "quat": quat.value,
               "scale": scale.value, "normal": normal.value,
               "c_s": c_s.value, "c_a": c_a.value,
               "gamma": gamma.value[:, 0], "vis": vis.value}
        for k, arr in out.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"decoded attribute {k} is non-finite")
        return out

    def drop_color_sh(self):
        """Remove the stage-1 view-dependent color branch entirely."""
        self.params = {k: v for k, v in self.params.items()
                       if not k.startswith("da_cs.")}
