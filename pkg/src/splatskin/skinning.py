"""Pose-sequence-conditioned skinning and LBS deformation.

The skinning weight field sees motion through two attention paths:

  temporal: the pose window (d, J, 3) is reshaped to J joint tokens of
    dimension 3d, passed through single-head self-attention, and queried
    per Gaussian via cross-attention against position features f_x;
  spatial: per-joint difference tokens theta_t - theta_{t-1} go through the
    same attention shape, so only instantaneous motion enters this path.

Both features concatenate into a small head MLP whose softmax gives the
per-Gaussian weights over joints. Because the temporal tokens contain the
whole window, weights react to pose history, not just the current frame;
that history dependence is the property the ablation tests switch off.

Joint transforms come from forward kinematics over a fixed-offset skeleton
and are treated as data (no gradients through FK); everything downstream of
the weights is on the tape.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .avatar import POSENC_OCTAVES, covariance_t

ATT_WIDTH = 64   # single-head attention feature width, both paths
DEFAULT_D = 10   # pose window length


# ---------------------------------------------------------------------------
# poses and kinematics
# ---------------------------------------------------------------------------

@dataclass
class PoseSequence:
    """Axis-angle pose window (d, J, 3), ordered oldest to newest."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"pose window must be (d, J, 3), got {self.data.shape}")
        if self.data.shape[0] < 2:
            raise ValueError("pose window needs d >= 2")
        mag = np.linalg.norm(self.data, axis=2)
        if np.any(mag >= 2.0 * np.pi):
            raise ValueError("axis-angle magnitude must stay below 2*pi")

    @property
    def d(self):
        return self.data.shape[0]

    @property
    def joints(self):
        return self.data.shape[1]

    @property
    def current(self):
        return self.data[-1]

    @property
    def previous(self):
        return self.data[-2]

    @classmethod
    def window(cls, poses, t, d):
        """Window ending at frame t, clamped at the sequence start."""
        poses = np.asarray(poses, dtype=np.float64)
        idx = np.clip(np.arange(t - d + 1, t + 1), 0, len(poses) - 1)
        return cls(poses[idx])


def save_poses(path, poses):
    """One frame per line, J*3 radians; header gives J and frame count."""
    poses = np.asarray(poses, dtype=np.float64)
    t, j, _ = poses.shape
    with open(path, "w") as f:
        f.write(f"{j} {t}\n")
        for frame in poses:
            f.write(" ".join(f"{v:.17g}" for v in frame.reshape(-1)) + "\n")


def load_poses(path):
    with open(path) as f:
        j, t = (int(s) for s in f.readline().split())
        poses = np.loadtxt(f, ndmin=2)
    if poses.shape != (t, j * 3):
        raise ValueError(f"{path}: expected {t} frames of {j} joints")
    return poses.reshape(t, j, 3)


def axis_angle_to_rotmat(aa):
    """Rodrigues formula; accepts (..., 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = aa / np.maximum(theta, 1e-30)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1)
    K = K.reshape(aa.shape[:-1] + (3, 3))
    th = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)


@dataclass
class Skeleton:
    """Chain/tree of joints: parents[k] < k (root -1), offsets from parent."""

    parents: np.ndarray
    offsets: np.ndarray   # (J, 3); root offset is its rest position

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.intp)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)

    @property
    def joints(self):
        return len(self.parents)

    def rest_positions(self):
        pos = np.zeros((self.joints, 3))
        for k in range(self.joints):
            p = self.parents[k]
            pos[k] = self.offsets[k] + (pos[p] if p >= 0 else 0.0)
        return pos

    def mean_bone_length(self):
        lens = np.linalg.norm(self.offsets[1:], axis=1)
        return float(lens.mean()) if len(lens) else 1.0

    def forward_kinematics(self, pose):
        """Joint transforms mapping rest space to posed space.

        pose: (J, 3) axis-angle per joint. Returns (J, 3, 4) matrices
        [R | t] with x_posed = R x_rest + t; identity pose gives [I | 0].
        """
        pose = np.asarray(pose, dtype=np.float64)
        if pose.shape != (self.joints, 3):
            raise ValueError(f"pose must be ({self.joints}, 3), got {pose.shape}")
        rest = self.rest_positions()
        Rw = np.zeros((self.joints, 3, 3))
        ow = np.zeros((self.joints, 3))
        Rloc = axis_angle_to_rotmat(pose)
        for k in range(self.joints):
            p = self.parents[k]
            if p < 0:
                Rw[k] = Rloc[k]
                ow[k] = rest[k]
            else:
                Rw[k] = Rw[p] @ Rloc[k]
                ow[k] = ow[p] + Rw[p] @ (rest[k] - rest[p])
        A = np.zeros((self.joints, 3, 4))
        A[:, :, :3] = Rw
        A[:, :, 3] = ow - np.einsum("kij,kj->ki", Rw, rest)
        for k in range(self.joints):
            if abs(np.linalg.det(Rw[k]) - 1.0) > 1e-9:
                raise ValueError(f"joint {k}: rotation determinant != +1")
        return A


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation
# ---------------------------------------------------------------------------

_MACS = None


@contextlib.contextmanager
def count_macs():
    """Collect matmul MAC counts from the pose trunk; yields a 1-list."""
    global _MACS
    prev, _MACS = _MACS, [0]
    try:
        yield _MACS
    finally:
        _MACS = prev


def _mm(a, b):
    if _MACS is not None:
        sa, sb = a.shape, b.shape
        batch = int(np.prod(sa[:-2])) if len(sa) > 2 else 1
        _MACS[0] += batch * sa[-2] * sa[-1] * sb[-1]
    return ad.matmul(a, b)


def encoder_flops(d, joints=4, width=ATT_WIDTH):
    """Multiply-add count of the pose trunk per skinning update.

    Covers the d-dependent work: temporal token projections (3 * J*(3d)*h),
    spatial difference projections (3 * J*3*h) and both attention blocks
    (2 * J^2 * h each). The per-Gaussian query path is independent of the
    window length and shared across d, so it is excluded; the count is what
    changing d actually costs.
    """
    if d < 2:
        raise ValueError("window length d must be >= 2")
    j, h = joints, width
    return 9 * j * h * d + 9 * j * h + 4 * j * j * h


# ---------------------------------------------------------------------------
# the skinning field
# ---------------------------------------------------------------------------

def _single_head_attention(q, k, v, width):
    scores = _mm(q, ad.transpose(k, (1, 0))) * (1.0 / np.sqrt(width))
    return _mm(ad.softmax(scores, axis=-1), v)


class SkinningField:
    def __init__(self, params, joints, d=DEFAULT_D, width=ATT_WIDTH,
                 offset_cap=0.05):
        self.params = params
        self.joints = joints
        self.d = d
        self.width = width
        self.offset_cap = float(offset_cap)

    @classmethod
    def init(cls, rng, skeleton, d=DEFAULT_D, width=ATT_WIDTH):
        j = skeleton.joints
        pos_dim = nn.posenc_dim(3, POSENC_OCTAVES)
        params = {}
        scale_t = np.sqrt(1.0 / (3 * d))
        scale_s = np.sqrt(1.0 / 3)
        for name, fan_in, sc in (("wq_t", 3 * d, scale_t),
                                 ("wk_t", 3 * d, scale_t),
                                 ("wv_t", 3 * d, scale_t),
                                 ("wq_s", 3, scale_s),
                                 ("wk_s", 3, scale_s),
                                 ("wv_s", 3, scale_s)):
            params[name] = rng.standard_normal((fan_in, width)) * sc
        params.update(nn.init_mlp(rng, [pos_dim, width, width], "fx"))
        params.update(nn.init_mlp(rng, [2 * width, width, j], "head"))
        params.update(nn.init_mlp(rng, [pos_dim + 3 * j, width, 3], "dx"))
        params.update(nn.init_mlp(rng, [pos_dim + 3 * j, width, 4], "dr"))
        # weights start at uniform 1/J and offsets at zero: articulation is
        # carried by LBS alone until the encoders learn corrections
        params["head.w1"] *= 0.0
        params["head.b1"] *= 0.0
        params["dx.w1"] *= 1e-3
        params["dr.w1"] *= 1e-3
        cap = 0.05 * skeleton.mean_bone_length()
        return cls(params, j, d, width, cap)

    def lift(self, tape):
        return {k: tape.leaf(k, v) for k, v in self.params.items()}

    def position_features(self, leaves, x_enc):
        """f_x: (N, width) from the canonical-position MLP."""
        return nn.mlp_apply(leaves, "fx", x_enc)

    def pose_trunk_temporal(self, leaves, theta):
        """Self-attended joint tokens (J, width) from the full window."""
        if theta.shape[0] < 2:
            raise ValueError("pose window needs d >= 2")
        tokens = ad.transpose(theta, (1, 0, 2))           # (J, d, 3)
        tokens = tokens.reshape(self.joints, 3 * theta.shape[0])
        q = _mm(tokens, leaves["wq_t"])
        k = _mm(tokens, leaves["wk_t"])
        v = _mm(tokens, leaves["wv_t"])
        return _single_head_attention(q, k, v, self.width)

    def pose_trunk_spatial(self, leaves, theta_t, theta_prev):
        """Attended difference tokens (J, width); zero motion -> zeros."""
        if theta_t.shape != theta_prev.shape:
            raise ValueError("pose difference needs matching joint counts")
        diff = theta_t - theta_prev                       # (J, 3)
        q = _mm(diff, leaves["wq_s"])
        k = _mm(diff, leaves["wk_s"])
        v = _mm(diff, leaves["wv_s"])
        return _single_head_attention(q, k, v, self.width)

    def _cross_attend(self, f_x, g):
        scores = ad.matmul(f_x, ad.transpose(g, (1, 0))) / np.sqrt(self.width)
        return ad.matmul(ad.softmax(scores, axis=-1), g)

    def temporal_feature(self, leaves, theta, f_x):
        """f_t: per-Gaussian feature attending over the pose window."""
        return self._cross_attend(f_x, self.pose_trunk_temporal(leaves, theta))

    def spatial_feature(self, leaves, theta_t, theta_prev, f_x):
        """f_s: per-Gaussian feature from instantaneous joint motion."""
        return self._cross_attend(
            f_x, self.pose_trunk_spatial(leaves, theta_t, theta_prev))

    def skinning_weights(self, leaves, x_enc, theta):
        """W (N, J): rows on the simplex, conditioned on the whole window.

        theta may be a Tensor (d, J, 3) or an array (lifted to a constant).
        """
        tape = next(iter(leaves.values())).tape
        if not isinstance(theta, ad.Tensor):
            theta = tape.constant(np.asarray(theta, dtype=np.float64))
        if not isinstance(x_enc, ad.Tensor):
            x_enc = tape.constant(x_enc)
        f_x = self.position_features(leaves, x_enc)
        f_t = self.temporal_feature(leaves, theta, f_x)
        f_s = self.spatial_feature(
            leaves, theta[theta.shape[0] - 1], theta[theta.shape[0] - 2], f_x)
        logits = nn.mlp_apply(leaves, "head", ad.concat([f_t, f_s], axis=1))
        if logits.tape.values[logits.idx] is not None and \
                not np.all(np.isfinite(logits.value)):
            raise ad.TapeError("skinning logits are non-finite")
        return ad.softmax(logits, axis=1)

    def nonrigid_offsets(self, leaves, x_enc, theta_t):
        """(dx, dr) bounded pose-dependent corrections.

        dx is squashed through cap*tanh so |dx| <= cap per component with a
        live gradient everywhere (a hard clamp would flatline outside).
        """
        tape = next(iter(leaves.values())).tape
        if not isinstance(x_enc, ad.Tensor):
            x_enc = tape.constant(x_enc)
        n = x_enc.shape[0]
        # theta_t is data (never optimized), tiled as a constant input row
        flat = np.asarray(theta_t, dtype=np.float64).reshape(-1)
        if flat.size != 3 * self.joints:
            raise ValueError(f"theta_t must have {self.joints} joints")
        inp = ad.concat(
            [x_enc, tape.constant(np.broadcast_to(flat, (n, flat.size)).copy())],
            axis=1)
        dx = ad.tanh(nn.mlp_apply(leaves, "dx", inp)) * self.offset_cap
        dr = nn.mlp_apply(leaves, "dr", inp)
        return dx, dr


def blend_transforms(weights, joint_mats):
    """A = sum_k W_k [R_k | t_k], entrywise over (3, 4) matrices.

    weights: (N, J) Tensor; joint_mats: (J, 3, 4) array. Returns
    (A_R (N, 3, 3), A_T (N, 3)).
    """
    joint_mats = np.asarray(joint_mats, dtype=np.float64)
    j = joint_mats.shape[0]
    r_flat = joint_mats[:, :, :3].reshape(j, 9)
    t_part = joint_mats[:, :, 3]
    a_r = ad.matmul(weights, r_flat).reshape(weights.shape[0], 3, 3)
    a_t = ad.matmul(weights, t_part)
    return a_r, a_t


def deform(x_c, quat, normal, scale, a_r, a_t, dx, dr):
    """LBS step: positions, covariance and normals into observation space.

    x' = A_R (x_c + dx) + A_T;   Sigma' = A_R Sigma(r', s) A_R^T;
    n_hat = normalize(A_R n_c);  r' = normalize(r_c + dr).
    The quaternion offset acts in canonical space (before the blend); the
    blended rotation reaches the covariance through the similarity
    transform rather than by multiplying the quaternion 4-vector.
    """
    n = a_r.shape[0]
    r_posed = ad.normalize(quat + dr, axis=1)
    xh = (x_c + dx).reshape(n, 3, 1)
    x_obs = ad.matmul(a_r, xh).reshape(n, 3) + a_t
    cov = covariance_t(r_posed, scale)
    cov_obs = ad.matmul(ad.matmul(a_r, cov), ad.transpose(a_r, (0, 2, 1)))
    nh = ad.matmul(a_r, normal.reshape(n, 3, 1)).reshape(n, 3)
    n_obs = ad.normalize(nh, axis=1)
    return x_obs, r_posed, n_obs, cov_obs
