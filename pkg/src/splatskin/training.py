"""Two-stage avatar optimization and the estimator facade.

Stage 1 fits geometry: the skinning field, non-rigid offsets, the geometry
decoder and the view-dependent SH color head train against RGB + normal
renders while every PBR parameter stays frozen. Stage 2 removes the color
head outright (the parameters are deleted, not masked), unfreezes
albedo/roughness/visibility and the environment probe, and adds the
cross-view contrastive term on a virtual camera resampled every iteration.

The probe is optimized through a softplus pre-image so radiance can never
go negative. Checkpoints capture parameters plus Adam moments and the step
counter, so a resumed run continues exactly where it stopped.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import checkpoint, losses, metrics, pbr, raster, shlight
from .avatar import GaussianAvatar
from .losses import LossWeights
from .skinning import (DEFAULT_D, PoseSequence, Skeleton, SkinningField,
                       blend_transforms, deform)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PROBE_INIT = 0.3        # initial probe radiance (neutral gray)
MODEL_FORMAT = 1        # schema version inside the checkpoint container

_DIRS, _OMEGA = shlight.probe_directions()


def softplus_np(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def softplus_inv(y):
    """Pre-image of softplus for y > 0 (stable near zero)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log1p(-np.exp(-y))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params, grads, moments, lr, b1=ADAM_BETA1, b2=ADAM_BETA2,
              eps=ADAM_EPS):
    """Bias-corrected Adam over a name -> array dict, updated in place.

    `moments` holds first/second moment slots plus the shared step counter
    and is filled lazily. If any gradient is non-finite the entire step is
    skipped (parameters and moments untouched) and the offending names are
    returned; an applied step returns [].
    """
    bad = []
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: "
                             f"{g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            bad.append(name)
    if bad:
        return bad
    moments["t"] = moments.get("t", 0) + 1
    t = moments["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = moments.setdefault(f"m/{name}", np.zeros_like(p))
        v = moments.setdefault(f"v/{name}", np.zeros_like(p))
        m += (1.0 - b1) * (g - m)      # in place: checkpointed arrays stay live
        v += (1.0 - b2) * (g * g - v)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return []


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 1                 # the loop is sequential by design
    stage1_iters: int = 3000
    stage2_iters: int = 3000
    d: int = DEFAULT_D             # pose window length
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    gc_pairs: int = losses.FEATURE_PAIRS   # contrastive pairs per scale

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.stage1_iters <= 0 or self.stage2_iters <= 0:
            raise ValueError("iteration counts must be positive")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if self.d < 2:
            raise ValueError("pose window d must be >= 2")

    def to_mapping(self):
        return {"lr": self.lr, "batch": self.batch,
                "stage1_iters": self.stage1_iters,
                "stage2_iters": self.stage2_iters, "d": self.d,
                "lambda_lpips": self.weights.lpips,
                "lambda_n_rec": self.weights.n_rec,
                "lambda_gs": self.weights.gs,
                "seed": self.seed, "gc_pairs": self.gc_pairs}

    @classmethod
    def from_mapping(cls, m):
        known = {"lr", "batch", "stage1_iters", "stage2_iters", "d",
                 "lambda_lpips", "lambda_n_rec", "lambda_gs", "seed",
                 "gc_pairs"}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        w = LossWeights(lpips=m.get("lambda_lpips", 0.1),
                        n_rec=m.get("lambda_n_rec", 0.05),
                        gs=m.get("lambda_gs", 0.01))
        keep = {k: m[k] for k in
                ("lr", "batch", "stage1_iters", "stage2_iters", "d",
                 "seed", "gc_pairs") if k in m}
        return cls(weights=w, **keep)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class AvatarModel:
    """Everything learnable plus the fixed template and skeleton.

    static_logits, when set, replaces the pose-conditioned skinning field
    with one learnable weight table per Gaussian (the ablation baseline);
    the offset MLPs stay active in both variants so the only difference is
    whether skinning weights can react to motion.
    """

    avatar: GaussianAvatar
    skinning: SkinningField
    skeleton: Skeleton
    probe_raw: np.ndarray          # softplus pre-image, (rows, cols, 3)
    static_logits: np.ndarray = None
    stage: int = 0                 # highest completed training stage

    @classmethod
    def init(cls, vertices, skeleton, d=DEFAULT_D, seed=0, static=False):
        rng = np.random.default_rng(seed)
        avatar = GaussianAvatar.init_from_template(vertices, rng)
        skinning = SkinningField.init(rng, skeleton, d=d)
        raw = np.full((shlight.PROBE_ROWS, shlight.PROBE_COLS, 3),
                      float(softplus_inv(PROBE_INIT)))
        logits = np.zeros((avatar.n, skeleton.joints)) if static else None
        return cls(avatar, skinning, skeleton, raw, logits, 0)

    def probe(self):
        return shlight.EnvLightProbe(softplus_np(self.probe_raw))


def trainable_params(model, stage):
    """Leaf-name -> live array mapping of what the given stage optimizes."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    groups = ("dg", "da_cs") if stage == 1 else ("dg", "da_pbr")
    out = {}
    for k, v in model.avatar.params.items():
        if k.split(".")[0] in groups:
            out[k] = v
    skin_groups = None if model.static_logits is None else ("dx", "dr")
    for k, v in model.skinning.params.items():
        if skin_groups is None or k.split(".")[0] in skin_groups:
            out[k] = v
    if model.static_logits is not None:
        out["static_logits"] = model.static_logits
    if stage == 2:
        out["probe_raw"] = model.probe_raw
    return out


def _lift_skinning(model, tape):
    if model.static_logits is None:
        return model.skinning.lift(tape)
    leaves = {k: tape.leaf(k, v) for k, v in model.skinning.params.items()
              if k.split(".")[0] in ("dx", "dr")}
    leaves["static_logits"] = tape.leaf("static_logits", model.static_logits)
    return leaves


# ---------------------------------------------------------------------------
# forward pipeline
# ---------------------------------------------------------------------------

@dataclass
class _Geometry:
    """Deformed per-Gaussian state shared between renders on one tape."""

    x_obs: object
    n_obs: object
    cov_obs: object
    opacity: object
    c_s: object = None
    pbr_attrs: object = None


def geometry_forward(model, window, leaves_av, leaves_sk):
    """Decode attributes, predict weights/offsets, run LBS."""
    o, quat, scale, normal = model.avatar.encode_geometry(leaves_av)
    if model.static_logits is not None:
        w = ad.softmax(leaves_sk["static_logits"], axis=1)
    else:
        w = model.skinning.skinning_weights(leaves_sk, model.avatar.x_enc,
                                            window.data)
    dx, dr = model.skinning.nonrigid_offsets(leaves_sk, model.avatar.x_enc,
                                             window.current)
    mats = model.skeleton.forward_kinematics(window.current)
    a_r, a_t = blend_transforms(w, mats)
    x_obs, _, n_obs, cov_obs = deform(model.avatar.x_c, quat, normal, scale,
                                      a_r, a_t, dx, dr)
    return _Geometry(x_obs, n_obs, cov_obs, o)


def render_frame_t(model, tape, window, cam, mode, leaves_av, leaves_sk,
                   probe_flat=None, geo=None):
    """Render one frame on the tape; returns ((H, W, 7), geometry).

    Channels are rgb(3) + encoded normal(3) + alpha, matching the ground
    truth layout. `geo` lets a second viewpoint reuse the deformed state.
    """
    if geo is None:
        geo = geometry_forward(model, window, leaves_av, leaves_sk)
    if mode == "sh":
        if geo.c_s is None:
            geo.c_s = model.avatar.encode_color_sh(leaves_av)
        rgb = raster.sh_color_payload(geo.c_s, geo.x_obs, cam.center)
    elif mode == "pbr":
        if probe_flat is None:
            raise ValueError("pbr render needs probe_flat")
        if geo.pbr_attrs is None:
            geo.pbr_attrs = model.avatar.encode_pbr(leaves_av)
        c_a, gamma, vis = geo.pbr_attrs
        w_o = raster.view_dirs_t(geo.x_obs, cam.center)
        rgb = pbr.shade_t(c_a, gamma, vis, geo.n_obs, w_o, probe_flat,
                          _DIRS, _OMEGA)
    elif mode == "albedo":
        # unshaded base color straight from the material head
        if geo.pbr_attrs is None:
            geo.pbr_attrs = model.avatar.encode_pbr(leaves_av)
        rgb = geo.pbr_attrs[0]
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    out = raster.render_t(tape, cam, geo.x_obs, geo.cov_obs, geo.opacity,
                          [rgb, geo.n_obs * 0.5 + 0.5])
    return out, geo


# ---------------------------------------------------------------------------
# data split
# ---------------------------------------------------------------------------

@dataclass
class DataSplit:
    train: list
    novel_pose: list     # training camera, held-out tail of the sequence
    novel_view: list     # every frame of the remaining cameras
    train_cam: int


def split_dataset(dataset, train_cam=0):
    """First 4/5 of the training camera's frames fit the model; the last
    fifth is the novel-pose set and all other cameras are novel views."""
    cut = (dataset.n_frames * 4) // 5
    train, novel_pose, novel_view = [], [], []
    for fr in dataset.frames:
        if fr.cam_id == train_cam:
            (train if fr.t < cut else novel_pose).append(fr)
        else:
            novel_view.append(fr)
    if not train:
        raise ValueError("dataset has no training frames")
    return DataSplit(train, novel_pose, novel_view, train_cam)


# ---------------------------------------------------------------------------
# stage loops
# ---------------------------------------------------------------------------

def _check_window(model, config):
    if config.d != model.skinning.d:
        raise ValueError(f"config pose window d={config.d} does not match "
                         f"the model's d={model.skinning.d}")


def _frame_targets(frame):
    gt = np.asarray(frame.rgb, dtype=np.float64)
    gt_n = np.asarray(frame.normal, dtype=np.float64)
    fg = losses.foreground_mask(np.asarray(frame.alpha, dtype=np.float64))
    return gt, gt_n, fg


def _collect_grads(tape, loss, params):
    grads = ad.backward(tape, loss)
    return {k: grads.get(k, np.zeros_like(v)) for k, v in params.items()}


def train_stage1(dataset, model, config, callback=None, moments=None,
                 start_iter=0):
    """Geometry stage: SH-color reconstruction, PBR branch frozen.

    Returns the per-iteration loss history. `callback(stage, it, loss,
    skipped)` fires every iteration when given. Passing the moments dict
    and start_iter from a checkpoint resumes mid-stage bit-exactly.
    """
    if "da_cs.b3" not in model.avatar.params:
        raise ValueError("stage-1 color head missing (model already "
                         "past stage 2?)")
    _check_window(model, config)
    split = split_dataset(dataset)
    phi = losses.FeatureExtractor(seed=0)
    params = trainable_params(model, 1)
    moments = {} if moments is None else moments
    history = []
    for it in range(start_iter, config.stage1_iters):
        frame = split.train[it % len(split.train)]
        cam = dataset.cameras[frame.cam_id]
        window = PoseSequence.window(dataset.poses, frame.t, config.d)
        gt, gt_n, fg = _frame_targets(frame)
        tape = ad.Tape()
        leaves_av = model.avatar.lift(tape, ("dg", "da_cs"))
        leaves_sk = _lift_skinning(model, tape)
        out, _ = render_frame_t(model, tape, window, cam, "sh",
                                leaves_av, leaves_sk)
        loss = losses.stage1_loss(gt, out[:, :, 0:3], gt_n, out[:, :, 3:6],
                                  fg, config.weights, phi)
        skipped = adam_step(params, _collect_grads(tape, loss, params),
                            moments, config.lr)
        history.append(float(loss.value))
        if callback is not None:
            callback(1, it, history[-1], skipped)
    model.stage = max(model.stage, 1)
    return history


def _gc_term(model, tape, window, cam, cam_v, out, geo, leaves_av,
             leaves_sk, probe_flat, phi, rng, pairs):
    """Cross-view contrastive scalar; 0.0 when no pixel is covisible."""
    cov = losses.covisibility_mask(
        geo.x_obs.value, geo.n_obs.value, geo.cov_obs.value,
        geo.opacity.value.reshape(-1), cam, cam_v)
    out_v, _ = render_frame_t(model, tape, window, cam_v, "pbr",
                              leaves_av, leaves_sk, probe_flat, geo=geo)
    feats_a = phi.features(out[:, :, 0:3])
    feats_b = phi.features(out_v[:, :, 0:3])
    try:
        ys, yps, _ = losses.sample_feature_pairs(feats_a, feats_b, cov.mask,
                                                 pairs, rng)
    except ValueError:
        return 0.0
    return losses.infonce_gc(ys, yps)


def train_stage2(dataset, model, config, callback=None, moments=None,
                 start_iter=0):
    """PBR stage: albedo/roughness/visibility/probe join the geometry.

    The SH color head is removed up front; every iteration adds the
    contrastive term between the training view and a fresh virtual view.
    Virtual-camera and pair draws are seeded per iteration, so a run
    resumed from (moments, start_iter) matches an uninterrupted one.
    """
    if model.stage < 1:
        raise ValueError("stage 2 requires a stage-1 model: run stage 1 "
                         "first")
    _check_window(model, config)
    model.avatar.drop_color_sh()
    split = split_dataset(dataset)
    phi = losses.FeatureExtractor(seed=0)
    params = trainable_params(model, 2)
    moments = {} if moments is None else moments
    history = []
    for it in range(start_iter, config.stage2_iters):
        frame = split.train[it % len(split.train)]
        cam = dataset.cameras[frame.cam_id]
        window = PoseSequence.window(dataset.poses, frame.t, config.d)
        gt, gt_n, fg = _frame_targets(frame)
        tape = ad.Tape()
        leaves_av = model.avatar.lift(tape, ("dg", "da_pbr"))
        leaves_sk = _lift_skinning(model, tape)
        probe_flat = ad.softplus(
            tape.leaf("probe_raw", model.probe_raw)).reshape(-1, 3)
        out, geo = render_frame_t(model, tape, window, cam, "pbr",
                                  leaves_av, leaves_sk, probe_flat)
        rng = np.random.default_rng((config.seed, 2, it))
        cam_v = losses.virtual_camera(cam, rng)
        gc = _gc_term(model, tape, window, cam, cam_v, out, geo, leaves_av,
                      leaves_sk, probe_flat, phi, rng, config.gc_pairs)
        loss = losses.stage2_loss(gt, out[:, :, 0:3], gt_n, out[:, :, 3:6],
                                  gc, fg, config.weights, phi)
        skipped = adam_step(params, _collect_grads(tape, loss, params),
                            moments, config.lr)
        history.append(float(loss.value))
        if callback is not None:
            callback(2, it, history[-1], skipped)
    model.stage = 2
    return history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def render_frame(model, poses, t, cam, probe=None, mode=None):
    """Render (rgb, encoded normal, alpha) arrays with a fitted model.

    `probe` overrides the learned light (relighting); `mode` defaults to
    pbr once the color head is gone, sh otherwise.
    """
    if mode is None:
        mode = "sh" if "da_cs.b3" in model.avatar.params else "pbr"
    tape = ad.Tape()
    prefixes = ("dg", "da_cs") if mode == "sh" else ("dg", "da_pbr")
    leaves_av = model.avatar.lift(tape, prefixes)
    leaves_sk = _lift_skinning(model, tape)
    window = PoseSequence.window(poses, t, model.skinning.d)
    probe_flat = None
    if mode == "pbr":
        rad = (softplus_np(model.probe_raw) if probe is None
               else probe.radiance)
        probe_flat = tape.constant(rad.reshape(-1, 3))
    out, _ = render_frame_t(model, tape, window, cam, mode,
                            leaves_av, leaves_sk, probe_flat)
    v = out.value
    return v[:, :, 0:3], v[:, :, 3:6], v[:, :, 6]


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------

def save_model(path, model, moments=None, iteration=0):
    tensors = {
        "model_format": MODEL_FORMAT,
        "stage": model.stage,
        "iteration": int(iteration),
        "x_c": model.avatar.x_c,
        "scale_cap": model.avatar.scale_cap,
        "width": model.avatar.width,
        "skeleton/parents": model.skeleton.parents.astype(np.int64),
        "skeleton/offsets": model.skeleton.offsets,
        "skin_d": model.skinning.d,
        "skin_width": model.skinning.width,
        "offset_cap": model.skinning.offset_cap,
        "probe_raw": model.probe_raw,
    }
    for k, v in model.avatar.params.items():
        tensors["avatar/" + k] = v
    for k, v in model.skinning.params.items():
        tensors["skin/" + k] = v
    if model.static_logits is not None:
        tensors["static_logits"] = model.static_logits
    for k, v in (moments or {}).items():
        tensors["adam/" + k] = v
    checkpoint.save(path, tensors)


def load_model(path):
    """Returns (model, adam moments, iteration)."""
    data = checkpoint.load(path)
    fmt = int(data.get("model_format", -1))
    if fmt != MODEL_FORMAT:
        raise ValueError(f"{path}: unsupported model format {fmt}")
    av_params = {k[len("avatar/"):]: v for k, v in data.items()
                 if k.startswith("avatar/")}
    sk_params = {k[len("skin/"):]: v for k, v in data.items()
                 if k.startswith("skin/")}
    avatar = GaussianAvatar(data["x_c"], av_params,
                            float(data["scale_cap"]), int(data["width"]))
    skeleton = Skeleton(data["skeleton/parents"], data["skeleton/offsets"])
    skinning = SkinningField(sk_params, skeleton.joints,
                             d=int(data["skin_d"]),
                             width=int(data["skin_width"]),
                             offset_cap=float(data["offset_cap"]))
    model = AvatarModel(avatar, skinning, skeleton, data["probe_raw"],
                        data.get("static_logits"), int(data["stage"]))
    moments = {}
    for k, v in data.items():
        if k.startswith("adam/"):
            key = k[len("adam/"):]
            moments[key] = int(v) if key == "t" else v
    return model, moments, int(data["iteration"])


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

class AvatarReconstructor(BaseEstimator):
    """Scikit-learn style facade over the two-stage trainer.

    fit(dataset) initializes the model from the dataset's template
    (canonical points + skeleton; never the ground-truth weights or
    materials) and runs the requested stages. predict renders frames,
    score reports mean novel-view PSNR.
    """

    def __init__(self, lr=1e-3, stage1_iters=3000, stage2_iters=3000,
                 d=DEFAULT_D, lambda_lpips=0.1, lambda_n_rec=0.05,
                 lambda_gs=0.01, seed=0, gc_pairs=losses.FEATURE_PAIRS,
                 static_weights=False, stage="all"):
        self.lr = lr
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.d = d
        self.lambda_lpips = lambda_lpips
        self.lambda_n_rec = lambda_n_rec
        self.lambda_gs = lambda_gs
        self.seed = seed
        self.gc_pairs = gc_pairs
        self.static_weights = static_weights
        self.stage = stage

    def _config(self):
        return TrainConfig(
            lr=self.lr, stage1_iters=self.stage1_iters,
            stage2_iters=self.stage2_iters, d=self.d,
            weights=LossWeights(lpips=self.lambda_lpips,
                                n_rec=self.lambda_n_rec,
                                gs=self.lambda_gs),
            seed=self.seed, gc_pairs=self.gc_pairs)

    def fit(self, X, y=None, callback=None):
        """X: a SceneDataset (supervision images live inside it)."""
        if self.stage not in ("1", "2", "all", 1, 2):
            raise ValueError(f"stage must be '1', '2' or 'all', got "
                             f"{self.stage!r}")
        cfg = self._config()
        if str(self.stage) == "2":
            if not hasattr(self, "model_"):
                raise NotFittedError("stage 2 alone needs a stage-1 fit "
                                     "first")
        else:
            self.model_ = AvatarModel.init(
                X.figure.x_c, X.figure.skeleton, d=self.d, seed=self.seed,
                static=self.static_weights)
            self.history1_ = train_stage1(X, self.model_, cfg, callback)
        if str(self.stage) in ("2", "all"):
            self.history2_ = train_stage2(X, self.model_, cfg, callback)
        self.dataset_ = X
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict/score")

    def predict(self, X):
        """X: iterable of (t, camera) pairs; camera is an index into the
        fitted dataset's rig or a Camera. Returns (n, H, W, 3) rgb."""
        self._check_fitted()
        out = []
        for t, cam in X:
            if not hasattr(cam, "center"):
                cam = self.dataset_.cameras[int(cam)]
            rgb, _, _ = render_frame(self.model_, self.dataset_.poses,
                                     int(t), cam)
            out.append(rgb)
        return np.stack(out)

    def score(self, X=None, y=None):
        """Mean novel-view PSNR (dB) on X (default: the fitted dataset)."""
        self._check_fitted()
        ds = self.dataset_ if X is None else X
        held_out = split_dataset(ds).novel_view
        vals = []
        for fr in held_out:
            rgb, _, _ = render_frame(self.model_, ds.poses, fr.t,
                                     ds.cameras[fr.cam_id])
            vals.append(metrics.psnr(np.asarray(fr.rgb, dtype=np.float64),
                                     rgb))
        return float(np.mean(vals))
