"""Procedural articulated capture scenes with exactly known ground truth.

A figure is a kinematic chain wrapped in capsule-sampled surface points.
Every attribute the pipeline is supposed to recover exists here in closed
form: skinning weights (smooth distance falloff to the bones), albedo and
roughness (low-frequency positional patterns), full visibility, and an
environment probe. Image ground truth is rendered by this package's own
rasterizer and shading stack, so recovery quality is measurable without any
external assets; the dataset is a pure function of its seed.

Two mechanisms make the data exercise the dynamic parts of the model:

* a wrinkle field: surface offsets along the canonical normals driven by
  three sinusoids of the current joint angles (zero at the rest pose,
  amplitude capped at 5% of the mean bone length), and
* pose-history weight modulation: the effective skinning weights at frame t
  blend the base falloff logits with a spatial pattern scaled by a smooth
  scalar summary of the last few frames, so a model with purely static
  per-point weights cannot reproduce the deformation exactly.
"""

import hashlib
import pathlib
from dataclasses import dataclass

import numpy as np

from . import imgio, kvcfg, pbr, raster, shlight
from .camera import Camera
from .skinning import PoseSequence, Skeleton, save_poses, load_poses

BONE_LEN = 0.5
CAPSULE_RADIUS = 0.12
WRINKLE_FRACTION = 0.05    # cap on wrinkle amplitude, vs mean bone length
WEIGHT_HISTORY = 3         # frames of pose history entering the modulation
DEFAULT_SAMPLES = 500
MANIFEST_VERSION = 1


@dataclass
class ArticulatedFigure:
    skeleton: Skeleton
    x_c: np.ndarray          # (N, 3) canonical surface samples
    normals_c: np.ndarray    # (N, 3) outward capsule normals
    weights: np.ndarray      # (N, J) base skinning weights (rest pose)
    nearest_bone: np.ndarray  # (N,) index of the closest bone per sample
    albedo: np.ndarray       # (N, 3)
    roughness: np.ndarray    # (N,)
    vis_coeffs: np.ndarray   # (N, 16)
    opacity: np.ndarray      # (N,)
    scales: np.ndarray       # (N, 3)
    falloff_logits: np.ndarray   # (N, J) the -(d/tau)^2 base logits
    wrinkle_amp: np.ndarray      # (3,) per-sinusoid amplitude
    wrinkle_freq: np.ndarray     # (3,)
    wrinkle_k: np.ndarray        # (3,) spatial frequency along the chain
    wrinkle_phase: np.ndarray    # (3,) spatial phase
    pose_dirs: np.ndarray        # (J, 3) fixed projection of joint angles
    mod_gain: float              # strength of history weight modulation
    mod_freq: float
    mod_pattern: np.ndarray      # (N, J) spatial modulation pattern
    seed: int

    def pose_scalar(self, theta):
        """Smooth scalar summary of one (J, 3) pose."""
        return float((np.asarray(theta) * self.pose_dirs).sum())

    def wrinkle_offsets(self, theta):
        """(N, 3) surface offsets along canonical normals; zero at rest."""
        s = self.pose_scalar(theta)
        z = self.x_c[:, 2]
        bump = np.zeros(len(self.x_c))
        for a, f, k, p in zip(self.wrinkle_amp, self.wrinkle_freq,
                              self.wrinkle_k, self.wrinkle_phase):
            bump += a * np.sin(f * s) * np.cos(k * z + p)
        return bump[:, None] * self.normals_c

    def effective_weights(self, window):
        """Skinning weights for a clamp-padded pose window (h, J, 3)."""
        window = np.asarray(window, dtype=np.float64)
        h = np.mean([self.pose_scalar(t) for t in window])
        logits = self.falloff_logits \
            + self.mod_gain * np.sin(self.mod_freq * h) * self.mod_pattern
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def deform(self, poses, t):
        """Ground-truth observation-space geometry at frame t.

        Returns (x_obs, n_obs, cov_obs): LBS with history-modulated weights
        applied to the wrinkled canonical points.
        """
        poses = np.asarray(poses, dtype=np.float64)
        window = PoseSequence.window(poses, t, WEIGHT_HISTORY).data
        w = self.effective_weights(window)
        mats = self.skeleton.forward_kinematics(poses[t])
        a_r = np.einsum("nj,jab->nab", w, mats[:, :, :3])
        a_t = w @ mats[:, :, 3]
        x = self.x_c + self.wrinkle_offsets(poses[t])
        x_obs = np.einsum("nab,nb->na", a_r, x) + a_t
        n_obs = np.einsum("nab,nb->na", a_r, self.normals_c)
        n_obs /= np.maximum(np.linalg.norm(n_obs, axis=1, keepdims=True),
                            1e-30)
        cov_c = np.zeros((len(self.x_c), 3, 3))
        idx = np.arange(3)
        cov_c[:, idx, idx] = self.scales ** 2
        cov_obs = np.einsum("nab,nbc,ndc->nad", a_r, cov_c, a_r)
        return x_obs, n_obs, cov_obs

    def checksum(self):
        h = hashlib.sha256()
        for arr in (self.x_c, self.weights, self.albedo, self.roughness,
                    self.mod_pattern, self.wrinkle_amp):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def centroid(self):
        return self.x_c.mean(axis=0)


def _segment_distances(points, joint_pos):
    """(N, J) distance from each point to each joint's bone.

    Joint k owns the segment from joint k to joint k+1; the leaf joint
    owns only its own position.
    """
    n, j = len(points), len(joint_pos)
    d = np.empty((n, j))
    for k in range(j):
        a = joint_pos[k]
        if k + 1 < j:
            b = joint_pos[k + 1]
            ab = b - a
            tt = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
            proj = a + tt[:, None] * ab
        else:
            proj = a[None]
        d[:, k] = np.linalg.norm(points - proj, axis=1)
    return d


def generate_figure(seed, joints=4, samples=DEFAULT_SAMPLES):
    """Capsule-sampled chain figure; every attribute known in closed form."""
    if joints < 2:
        raise ValueError("a figure needs at least 2 joints")
    rng = np.random.default_rng(seed)
    parents = np.arange(-1, joints - 1)
    offsets = np.zeros((joints, 3))
    offsets[1:, 2] = BONE_LEN
    skel = Skeleton(parents, offsets)
    jp = skel.rest_positions()

    segs = joints - 1
    per = samples // segs
    pts, nrm = [], []
    for k in range(segs):
        count = per if k < segs - 1 else samples - per * (segs - 1)
        tt = rng.uniform(0.0, 1.0, size=count)
        phi = rng.uniform(0.0, 2 * np.pi, size=count)
        r = CAPSULE_RADIUS * rng.uniform(0.92, 1.0, size=count)
        base = jp[k] + tt[:, None] * (jp[k + 1] - jp[k])
        radial = np.stack([np.cos(phi), np.sin(phi), np.zeros(count)], axis=1)
        pts.append(base + r[:, None] * radial)
        nrm.append(radial)
    x_c = np.concatenate(pts)
    normals = np.concatenate(nrm)

    d = _segment_distances(x_c, jp)
    tau = 0.35 * BONE_LEN
    logits = -(d / tau) ** 2
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights = e / e.sum(axis=1, keepdims=True)

    z = x_c[:, 2]
    phi = np.arctan2(x_c[:, 1], x_c[:, 0])
    albedo = np.stack([
        0.45 + 0.25 * np.sin(2.0 * np.pi * z / (segs * BONE_LEN)),
        0.40 + 0.25 * np.sin(3.0 * z + 1.3) * np.cos(phi),
        0.40 + 0.25 * np.cos(2.2 * z - 0.7),
    ], axis=1)
    albedo = np.clip(albedo, 0.05, 0.75)
    roughness = np.clip(0.55 + 0.2 * np.sin(2.5 * z + 0.4) * np.sin(phi),
                        0.25, 0.85)
    vis = np.zeros((len(x_c), 16))
    vis[:, 0] = 1.0 / shlight.sh_basis(np.array([[0.0, 0.0, 1.0]]))[0, 0]

    amp_total = WRINKLE_FRACTION * skel.mean_bone_length()
    raw_amp = rng.uniform(0.5, 1.0, size=3)
    wrinkle_amp = raw_amp / raw_amp.sum() * amp_total
    pose_dirs = rng.normal(size=(joints, 3))
    pose_dirs[0] = 0.0                       # root pose is held fixed anyway
    norms = np.linalg.norm(pose_dirs[1:], axis=1, keepdims=True)
    pose_dirs[1:] /= np.maximum(norms, 1e-30)
    mod_pattern = np.cos(rng.uniform(1.0, 3.0, size=joints)[None, :] * z[:, None]
                         + rng.uniform(0, 2 * np.pi, size=joints)[None, :])

    return ArticulatedFigure(
        skeleton=skel, x_c=x_c, normals_c=normals, weights=weights,
        nearest_bone=d.argmin(axis=1), albedo=albedo, roughness=roughness,
        vis_coeffs=vis, opacity=np.full(len(x_c), 0.92),
        scales=np.full((len(x_c), 3), 0.045), falloff_logits=logits,
        wrinkle_amp=wrinkle_amp,
        wrinkle_freq=rng.uniform(0.8, 1.6, size=3),
        wrinkle_k=rng.uniform(2.0, 6.0, size=3),
        wrinkle_phase=rng.uniform(0, 2 * np.pi, size=3),
        pose_dirs=pose_dirs, mod_gain=0.8,
        mod_freq=float(rng.uniform(0.9, 1.4)), mod_pattern=mod_pattern,
        seed=int(seed))


def ring_cameras(figure, count=4, size=64, radius=None, elevation=0.15):
    """Evenly spaced orbit ring aimed at the figure's centroid."""
    target = figure.centroid()
    height = figure.skeleton.mean_bone_length() * (figure.skeleton.joints - 1)
    radius = radius if radius is not None else 2.8 * height + 1.0
    f = 0.62 * size * radius / (height + 2 * CAPSULE_RADIUS)
    cams = []
    for i in range(count):
        az = 2 * np.pi * i / count
        cams.append(Camera.from_orbit(target, radius, az, elevation, f, f,
                                      size, size))
    return cams


def default_probe(seed=0):
    """Smooth colorful environment: ambient floor plus three soft lobes."""
    rng = np.random.default_rng(seed)
    dirs, _ = shlight.probe_directions()
    rad = np.full((dirs.shape[0], 3), 0.25)
    colors = np.array([[0.55, 0.35, 0.15], [0.15, 0.45, 0.40],
                       [0.30, 0.20, 0.55]])
    for c in colors:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        power = rng.choice([2.0, 4.0, 8.0])
        lobe = np.maximum(dirs @ axis, 0.0) ** power
        rad += lobe[:, None] * c
    return shlight.EnvLightProbe(
        rad.reshape(shlight.PROBE_ROWS, shlight.PROBE_COLS, 3))


def random_trajectories(figure, n_frames, rng):
    """Smooth sinusoidal joint trajectories starting at the rest pose."""
    j = figure.skeleton.joints
    poses = np.zeros((n_frames, j, 3))
    t = np.arange(n_frames) / max(n_frames - 1, 1)
    for k in range(1, j):                    # root stays fixed
        for axis in (0, 1):
            amp = rng.uniform(0.25, 0.5)
            freq = rng.integers(1, 4)
            poses[:, k, axis] = amp * np.sin(2 * np.pi * freq * t)
    return poses


@dataclass
class FrameRecord:
    index: int
    t: int
    cam_id: int
    rgb: np.ndarray      # (H, W, 3) float32
    normal: np.ndarray   # (H, W, 3) float32, [0,1]-encoded
    alpha: np.ndarray    # (H, W) float32


@dataclass
class SceneDataset:
    figure: ArticulatedFigure
    cameras: list
    probe: shlight.EnvLightProbe
    poses: np.ndarray        # (T, J, 3)
    frames: list             # FrameRecord, index == t * len(cameras) + cam
    seed: int

    @property
    def n_frames(self):
        return len(self.poses)

    def frame(self, t, cam_id):
        return self.frames[t * len(self.cameras) + cam_id]


def render_gt_frame(figure, poses, t, cam, probe):
    """One ground-truth view: pbr rgb + encoded normals + alpha."""
    x_obs, n_obs, cov_obs = figure.deform(poses, t)
    w_o = cam.center[None] - x_obs
    w_o /= np.maximum(np.linalg.norm(w_o, axis=1, keepdims=True), 1e-30)
    dirs, omega = shlight.probe_directions()
    rgb = pbr.shade_batch(figure.albedo, figure.roughness, figure.vis_coeffs,
                          n_obs, w_o, probe.radiance.reshape(-1, 3),
                          dirs, omega)
    payload = np.concatenate([rgb, n_obs * 0.5 + 0.5], axis=1)
    splats = raster.project_scene(x_obs, cov_obs, figure.opacity, payload,
                                  cam)
    img = raster.rasterize(splats, cam)
    return (img.channels[:, :, :3].astype(np.float32),
            img.channels[:, :, 3:6].astype(np.float32),
            img.alpha.astype(np.float32))


def generate_sequence(figure, n_frames, cameras, probe, seed):
    if len(cameras) < 2:
        raise ValueError("need at least 2 cameras for the capture ring")
    rng = np.random.default_rng(seed)
    poses = random_trajectories(figure, n_frames, rng)
    frames = []
    for t in range(n_frames):
        for cam_id, cam in enumerate(cameras):
            rgb, normal, alpha = render_gt_frame(figure, poses, t, cam,
                                                 probe)
            frames.append(FrameRecord(index=len(frames), t=t, cam_id=cam_id,
                                      rgb=rgb, normal=normal, alpha=alpha))
    return SceneDataset(figure=figure, cameras=cameras, probe=probe,
                        poses=poses, frames=frames, seed=int(seed))


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def export(dataset, out_dir):
    out = pathlib.Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "figure_seed": dataset.figure.seed,
        "joints": dataset.figure.skeleton.joints,
        "samples": len(dataset.figure.x_c),
        # prefixed so the manifest parser never mistakes it for a number
        "figure_checksum": "sha-" + dataset.figure.checksum(),
        "n_frames": dataset.n_frames,
        "n_cameras": len(dataset.cameras),
        "width": dataset.cameras[0].width,
        "height": dataset.cameras[0].height,
    }
    for fr in dataset.frames:
        manifest[f"frame.{fr.index:04d}"] = (fr.t, fr.cam_id)
    kvcfg.dump(out / "manifest.txt", manifest)
    save_poses(out / "poses.txt", dataset.poses)
    with open(out / "cameras.txt", "w") as f:
        f.write(f"{len(dataset.cameras)}\n")
        for cam in dataset.cameras:
            f.write(cam.to_line() + "\n")
    dataset.probe.save(out / "probe.pfm")
    for fr in dataset.frames:
        stem = out / "frames" / f"{fr.index:04d}"
        imgio.write_pfm(f"{stem}_rgb.pfm", fr.rgb)
        imgio.write_pfm(f"{stem}_normal.pfm", fr.normal)
        imgio.write_pfm(f"{stem}_alpha.pfm", fr.alpha)
    return out


def load_cameras(path):
    with open(path) as f:
        count = int(f.readline())
        cams = [Camera.from_line(f.readline()) for _ in range(count)]
    return cams


def import_dataset(in_dir):
    src = pathlib.Path(in_dir)
    manifest_path = src / "manifest.txt"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path}: dataset manifest missing")
    man = kvcfg.load(manifest_path)
    if man.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{manifest_path}: unsupported manifest version "
                         f"{man.get('version')!r}")
    figure = generate_figure(man["figure_seed"], man["joints"],
                             man["samples"])
    if "sha-" + figure.checksum() != man["figure_checksum"]:
        raise ValueError("figure checksum mismatch: dataset was written by "
                         "an incompatible generator")
    poses = load_poses(src / "poses.txt")
    cameras = load_cameras(src / "cameras.txt")
    probe = shlight.EnvLightProbe.load(src / "probe.pfm")
    if len(poses) != man["n_frames"] or len(cameras) != man["n_cameras"]:
        raise ValueError(f"{in_dir}: manifest counts disagree with files")
    frames = []
    n_expected = man["n_frames"] * man["n_cameras"]
    for i in range(n_expected):
        key = f"frame.{i:04d}"
        if key not in man:
            raise ValueError(f"{manifest_path}: missing entry {key}")
        t, cam_id = man[key]
        stem = src / "frames" / f"{i:04d}"
        try:
            rgb = imgio.read_pfm(f"{stem}_rgb.pfm")
            normal = imgio.read_pfm(f"{stem}_normal.pfm")
            alpha = imgio.read_pfm(f"{stem}_alpha.pfm")
        except FileNotFoundError as e:
            raise FileNotFoundError(
                f"dataset frame file missing: {e.filename}") from e
        h, w = man["height"], man["width"]
        if rgb.shape != (h, w, 3) or normal.shape != (h, w, 3) \
                or alpha.shape != (h, w):
            raise ValueError(f"{stem}: frame shapes do not match manifest "
                             f"{h}x{w}")
        frames.append(FrameRecord(index=i, t=t, cam_id=cam_id, rgb=rgb,
                                  normal=normal, alpha=alpha))
    return SceneDataset(figure=figure, cameras=cameras, probe=probe,
                        poses=poses, frames=frames, seed=man["seed"])


def dataset_checksum(in_dir):
    """Stable digest over every file in the dataset directory."""
    src = pathlib.Path(in_dir)
    h = hashlib.sha256()
    for p in sorted(src.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(src).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()
