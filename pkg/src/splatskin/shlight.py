"""Real spherical harmonics (degrees 0..3) and the lat-long light probe.

Basis convention: real SH without the Condon-Shortley phase, ordered by
(l, m) with index l*(l+1)+m, the layout used throughout graphics. All
constants are the exact normalization factors, so 4*pi*E[Y_i*Y_j] = delta_ij
under uniform sphere sampling.

Probe mapping: theta = acos(z) with row 0 at the +z pole, phi = atan2(y, x)
wrapped to [0, 2*pi). Texel (i, j) covers the band [i, i+1]*pi/rows x
[j, j+1]*2*pi/cols and carries its exact band solid angle
(2*pi/cols) * (cos(theta_top) - cos(theta_bottom)), so the weights sum to
4*pi by telescoping rather than only approximately.
"""

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import imgio

N_SH = 16  # degrees 0..3

# exact normalization constants, index l*(l+1)+m
_C0 = 0.28209479177387814   # 1/(2 sqrt(pi))
_C1 = 0.4886025119029199    # sqrt(3/(4 pi))
_C2 = (1.0925484305920792,  # sqrt(15/(4 pi))    xy, yz, xz
       0.31539156525252005,  # sqrt(5/(16 pi))   (3z^2-1)
       0.5462742152960396)   # sqrt(15/(16 pi))  (x^2-y^2)
_C3 = (0.5900435899266435,   # sqrt(35/(32 pi))  y(3x^2-y^2), x(x^2-3y^2)
       2.890611442640554,    # sqrt(105/(4 pi))  xyz
       0.4570457994644658,   # sqrt(21/(32 pi))  y(5z^2-1), x(5z^2-1)
       0.3731763325901154,   # sqrt(7/(16 pi))   z(5z^2-3)
       1.445305721320277)    # sqrt(105/(16 pi)) z(x^2-y^2)


def sh_basis(direction):
    """Evaluate Y_0..Y_15 at unit directions; accepts (..., 3) -> (..., 16).

    Directions are normalized defensively; an exactly zero vector is an
    error because it has no direction.
    """
    d = np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("sh_basis: zero-length direction")
    d = d / n
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (N_SH,))
    out[..., 0] = _C0
    out[..., 1] = _C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = _C1 * x
    out[..., 4] = _C2[0] * x * y
    out[..., 5] = _C2[0] * y * z
    out[..., 6] = _C2[1] * (3.0 * z * z - 1.0)
    out[..., 7] = _C2[0] * x * z
    out[..., 8] = _C2[2] * (x * x - y * y)
    out[..., 9] = _C3[0] * y * (3.0 * x * x - y * y)
    out[..., 10] = _C3[1] * x * y * z
    out[..., 11] = _C3[2] * y * (5.0 * z * z - 1.0)
    out[..., 12] = _C3[3] * z * (5.0 * z * z - 3.0)
    out[..., 13] = _C3[2] * x * (5.0 * z * z - 1.0)
    out[..., 14] = _C3[4] * z * (x * x - y * y)
    out[..., 15] = _C3[0] * x * (x * x - 3.0 * y * y)
    return out


def sh_basis_t(direction):
    """Tape twin of sh_basis for unit-direction Tensors (N, 3) -> (N, 16).

    Assumes callers pass already-normalized directions; no zero check is
    possible symbolically.
    """
    x = direction[:, 0:1]
    y = direction[:, 1:2]
    z = direction[:, 2:3]
    z2 = z * z
    cols = [
        x * 0.0 + _C0,
        _C1 * y, _C1 * z, _C1 * x,
        _C2[0] * x * y, _C2[0] * y * z,
        _C2[1] * (3.0 * z2 - 1.0),
        _C2[0] * x * z, _C2[2] * (x * x - y * y),
        _C3[0] * y * (3.0 * x * x - y * y),
        _C3[1] * x * y * z,
        _C3[2] * y * (5.0 * z2 - 1.0),
        _C3[3] * z * (5.0 * z2 - 3.0),
        _C3[2] * x * (5.0 * z2 - 1.0),
        _C3[4] * z * (x * x - y * y),
        _C3[0] * x * (x * x - 3.0 * y * y),
    ]
    return ad.concat(cols, axis=1)


def sh_reconstruct(coeffs, direction):
    """Sum_j coeffs_j * Y_j(direction); coeffs (..., 16), broadcastable."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != N_SH:
        raise ValueError(f"expected {N_SH} coefficients, got {coeffs.shape[-1]}")
    return (coeffs * sh_basis(direction)).sum(axis=-1)


# ---------------------------------------------------------------------------
# lat-long probe
# ---------------------------------------------------------------------------

PROBE_ROWS = 32
PROBE_COLS = 64


@functools.lru_cache(maxsize=4)
def probe_directions(rows=PROBE_ROWS, cols=PROBE_COLS):
    """Texel-center unit directions and exact per-texel solid angles.

    Returns (directions (rows*cols, 3), solid_angles (rows*cols,)), row-major
    over the texel grid. Solid angles telescope to exactly 4*pi.
    """
    i = np.arange(rows)
    theta_c = (i + 0.5) * np.pi / rows
    band = (2.0 * np.pi / cols) * (np.cos(i * np.pi / rows)
                                   - np.cos((i + 1) * np.pi / rows))
    phi_c = (np.arange(cols) + 0.5) * 2.0 * np.pi / cols
    st, ct = np.sin(theta_c), np.cos(theta_c)
    dirs = np.empty((rows, cols, 3))
    dirs[..., 0] = st[:, None] * np.cos(phi_c)[None, :]
    dirs[..., 1] = st[:, None] * np.sin(phi_c)[None, :]
    dirs[..., 2] = ct[:, None] * np.ones(cols)[None, :]
    omega = np.broadcast_to(band[:, None], (rows, cols))
    return dirs.reshape(-1, 3), np.ascontiguousarray(omega.reshape(-1))


def probe_texel(direction, rows=PROBE_ROWS, cols=PROBE_COLS):
    """Nearest texel (i, j) for unit directions (..., 3)."""
    d = np.asarray(direction, dtype=np.float64)
    z = np.clip(d[..., 2] / np.linalg.norm(d, axis=-1), -1.0, 1.0)
    theta = np.arccos(z)
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2.0 * np.pi)
    i = np.minimum((theta * rows / np.pi).astype(np.intp), rows - 1)
    j = np.minimum((phi * cols / (2.0 * np.pi)).astype(np.intp), cols - 1)
    return i, j


@dataclass
class EnvLightProbe:
    """Environment light in latitude-longitude format.

    radiance: (rows, cols, 3) linear RGB, non-negative. Acts as a single
    learnable image of incident light; three channels so relit output can
    be colored.
    """

    radiance: np.ndarray

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.radiance.shape != (PROBE_ROWS, PROBE_COLS, 3):
            raise ValueError(
                f"probe must be {PROBE_ROWS}x{PROBE_COLS}x3, "
                f"got {self.radiance.shape}")
        if not np.all(np.isfinite(self.radiance)):
            raise ValueError("probe radiance contains non-finite values")
        if np.any(self.radiance < 0):
            raise ValueError("probe radiance must be non-negative")

    @classmethod
    def constant(cls, rgb):
        rad = np.broadcast_to(np.asarray(rgb, dtype=np.float64),
                              (PROBE_ROWS, PROBE_COLS, 3)).copy()
        return cls(rad)

    def sample(self, direction):
        """Nearest-texel radiance lookup; (..., 3) dirs -> (..., 3) rgb."""
        i, j = probe_texel(direction)
        return self.radiance[i, j]

    def directions(self):
        return probe_directions()

    def save(self, path):
        """PFM image plus a sidecar text header naming the mapping."""
        imgio.write_pfm(path, self.radiance)
        with open(str(path) + ".txt", "w") as f:
            f.write("format = latlong\n")
            f.write(f"rows = {PROBE_ROWS}\n")
            f.write(f"cols = {PROBE_COLS}\n")
            f.write("theta = acos(z); row 0 at +z; centers (i+0.5)*pi/rows\n")
            f.write("phi = atan2(y,x) in [0,2pi); centers (j+0.5)*2pi/cols\n")
            f.write("solid_angle = (2pi/cols)*(cos(theta_top)-cos(theta_bot))\n")

    @classmethod
    def load(cls, path):
        img = imgio.read_pfm(path)
        if img.ndim != 3:
            raise ValueError(f"{path}: probe must be a color PFM")
        return cls(img.astype(np.float64))
