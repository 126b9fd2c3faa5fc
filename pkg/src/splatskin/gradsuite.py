"""Finite-difference audit of every differentiable path.

Each path check draws a batch of random configurations, rebuilds the
forward computation with one input promoted to the probed leaf, and
compares tape gradients against central differences at a few coordinates.
Configurations are constructed to keep every branch point (alpha cutoff,
visibility clamp, facing masks, scale cap) at a safe margin from the probe
step, because finite differences are meaningless across a discontinuity;
the branch semantics themselves are covered by the forward oracles.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses, nn, pbr, raster, shlight
from .avatar import GaussianAvatar, covariance_t
from .camera import Camera
from .skinning import Skeleton, SkinningField, blend_transforms, deform

TOL = 1e-4
DEFAULT_CONFIGS = 50
_COORDS = 3           # probed coordinates per configuration


def _pick(rng, arr):
    return arr[rng.integers(0, len(arr))]


def _coords(rng, size):
    return list(rng.choice(size, size=min(_COORDS, size), replace=False))


# ---------------------------------------------------------------------------
# path checks; each returns the max relative error over n configurations
# ---------------------------------------------------------------------------

def check_encoders(n, rng):
    """Attribute decoders: geometry, SH color and PBR heads."""
    worst = 0.0
    targets = ["dg.w0", "dg.w3", "dg.b3", "da_cs.w3", "da_cs.w0",
               "da_pbr.w3", "da_pbr.b3"]
    for i in range(n):
        verts = rng.uniform(-0.15, 0.15, (8, 3))
        av = GaussianAvatar.init_from_template(verts, rng)
        params = {k: v + rng.normal(0.0, 0.05, v.shape)
                  for k, v in av.params.items()}
        target = targets[i % len(targets)]
        w_geo = [rng.standard_normal((8, k)) for k in (1, 4, 3, 3)]
        w_cs = rng.standard_normal((8, 3, 16))
        w_pbr = [rng.standard_normal((8, k)) for k in (3, 1, 16)]

        def fn(x):
            tape = x.tape
            leaves = {k: tape.constant(v) for k, v in params.items()}
            leaves[target] = x
            if target.startswith("dg"):
                outs = av.encode_geometry(leaves)
                return sum((o * w).sum() for o, w in zip(outs, w_geo))
            if target.startswith("da_cs"):
                return (av.encode_color_sh(leaves) * w_cs).sum()
            outs = av.encode_pbr(leaves)
            return sum((o * w).sum() for o, w in zip(outs, w_pbr))

        point = params[target]
        worst = max(worst, ad.grad_check(fn, point,
                                         coords=_coords(rng, point.size)))
    return worst


def _chain_skeleton(joints=3):
    parents = np.arange(joints) - 1
    offsets = np.zeros((joints, 3))
    offsets[1:, 2] = 0.5
    return Skeleton(parents, offsets)


def check_skinning(n, rng):
    """Pose-conditioned weight field, including gradients into the window."""
    worst = 0.0
    targets = ["wq_t", "wk_t", "wv_t", "wq_s", "wk_s", "wv_s",
               "fx.w0", "fx.w1", "head.w0", "head.w1", "theta"]
    skel = _chain_skeleton()
    for i in range(n):
        field = SkinningField.init(rng, skel, d=3)
        params = {k: v + rng.normal(0.0, 0.1, v.shape)
                  for k, v in field.params.items()}
        field = SkinningField(params, skel.joints, d=3)
        x_enc = nn.posenc_np(rng.uniform(-0.5, 0.5, (5, 3)), 6)
        theta = rng.uniform(-0.6, 0.6, (3, skel.joints, 3))
        wsum = rng.standard_normal((5, skel.joints))
        target = targets[i % len(targets)]

        def fn(x):
            tape = x.tape
            if target == "theta":
                leaves = {k: tape.constant(v) for k, v in params.items()}
                w = field.skinning_weights(leaves, x_enc, x)
            else:
                leaves = {k: tape.constant(v) for k, v in params.items()}
                leaves[target] = x
                w = field.skinning_weights(leaves, x_enc, theta)
            return (w * wsum).sum()

        point = theta if target == "theta" else params[target]
        worst = max(worst, ad.grad_check(fn, point,
                                         coords=_coords(rng, point.size)))
    return worst


def check_offsets(n, rng):
    """Non-rigid correction MLPs, alone and through the LBS chain."""
    worst = 0.0
    targets = ["dx.w0", "dx.w1", "dx.b1", "dr.w0", "dr.w1"]
    skel = _chain_skeleton()
    for i in range(n):
        field = SkinningField.init(rng, skel, d=3)
        params = {k: v + rng.normal(0.0, 0.1, v.shape)
                  for k, v in field.params.items()}
        field = SkinningField(params, skel.joints, d=3,
                              offset_cap=field.offset_cap)
        pts = rng.uniform(-0.3, 0.3, (4, 3))
        x_enc = nn.posenc_np(pts, 6)
        theta_t = rng.uniform(-0.5, 0.5, (skel.joints, 3))
        target = targets[i % len(targets)]
        through_lbs = i % 2 == 1
        wx = rng.standard_normal((4, 3))
        wr = rng.standard_normal((4, 4))
        wc = rng.standard_normal((4, 3, 3))
        quat0 = rng.standard_normal((4, 4))
        quat0 /= np.linalg.norm(quat0, axis=1, keepdims=True)
        normal0 = rng.standard_normal((4, 3))
        normal0 /= np.linalg.norm(normal0, axis=1, keepdims=True)
        scale0 = rng.uniform(0.1, 0.3, (4, 3))
        wmat = rng.dirichlet(np.ones(skel.joints), size=4)
        mats = skel.forward_kinematics(rng.uniform(-0.4, 0.4,
                                                   (skel.joints, 3)))

        def fn(x):
            tape = x.tape
            leaves = {k: tape.constant(v) for k, v in params.items()}
            leaves[target] = x
            dx, dr = field.nonrigid_offsets(leaves, x_enc, theta_t)
            if not through_lbs:
                return (dx * wx).sum() + (dr * wr).sum()
            a_r, a_t = blend_transforms(tape.constant(wmat), mats)
            x_obs, _, n_obs, cov_obs = deform(
                pts, tape.constant(quat0), tape.constant(normal0),
                tape.constant(scale0), a_r, a_t, dx, dr)
            return ((x_obs * wx).sum() + (cov_obs * wc).sum()
                    + (n_obs * wx).sum())

        point = params[target]
        worst = max(worst, ad.grad_check(fn, point,
                                         coords=_coords(rng, point.size)))
    return worst


def _cone_dirs(rng, count, spread):
    """Unit directions near +z: margin against the facing masks."""
    d = np.tile([0.0, 0.0, 1.0], (count, 1))
    d = d + spread * rng.standard_normal((count, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def check_brdf(n, rng):
    """Microfacet BRDF factors through a few-direction quadrature."""
    worst = 0.0
    targets = ["c_a", "gamma", "normal"]
    for i in range(n):
        npts = 4
        normal = _cone_dirs(rng, npts, 0.25)
        w_o = _cone_dirs(rng, npts, 0.3)
        dirs = _cone_dirs(rng, 6, 0.45)
        omega = rng.uniform(0.1, 1.0, 6)
        probe_flat = rng.uniform(0.2, 1.0, (6, 3))
        c_a = rng.uniform(0.2, 0.8, (npts, 3))
        gamma = rng.uniform(0.25, 0.85, (npts, 1))
        vis = np.zeros((npts, 16))
        vis[:, 0] = 0.5 / shlight.sh_basis(np.array([0.0, 0.0, 1.0]))[0]
        vis += rng.uniform(-0.01, 0.01, (npts, 16))
        target = targets[i % len(targets)]
        wsum = rng.standard_normal((npts, 3))

        def fn(x):
            args = {"c_a": c_a, "gamma": gamma, "normal": normal}
            args[target] = x
            out = pbr.shade_t(args["c_a"], args["gamma"], vis,
                              args["normal"], w_o, probe_flat, dirs, omega)
            return (out * wsum).sum()

        point = {"c_a": c_a, "gamma": gamma, "normal": normal}[target]
        worst = max(worst, ad.grad_check(fn, point,
                                         coords=_coords(rng, point.size)))
    return worst


def check_shade(n, rng):
    """Full-probe shading: gradients into the light, visibility, materials."""
    worst = 0.0
    targets = ["probe", "vis", "c_a", "gamma"]
    dirs, omega = shlight.probe_directions(6, 12)
    dc = shlight.sh_basis(np.array([0.0, 0.0, 1.0]))[0]
    for i in range(n):
        npts = 4
        normal = _cone_dirs(rng, npts, 0.2)
        w_o = _cone_dirs(rng, npts, 0.25)
        c_a = rng.uniform(0.2, 0.8, (npts, 3))
        gamma = rng.uniform(0.25, 0.85, (npts, 1))
        vis = np.zeros((npts, 16))
        vis[:, 0] = 0.5 / dc
        vis += rng.uniform(-0.01, 0.01, (npts, 16))
        probe_flat = rng.uniform(0.1, 1.0, (len(dirs), 3))
        target = targets[i % len(targets)]
        wsum = rng.standard_normal((npts, 3))

        def fn(x):
            args = {"probe": probe_flat, "vis": vis, "c_a": c_a,
                    "gamma": gamma}
            args[target] = x
            out = pbr.shade_t(args["c_a"], args["gamma"], args["vis"],
                              normal, w_o, args["probe"], dirs, omega)
            return (out * wsum).sum()

        point = {"probe": probe_flat, "vis": vis, "c_a": c_a,
                 "gamma": gamma}[target]
        worst = max(worst, ad.grad_check(fn, point,
                                         coords=_coords(rng, point.size)))
    return worst


def _fat_scene(rng, npts=5):
    """In-view Gaussians whose per-pixel alphas stay clear of the cutoff."""
    cam = Camera.from_orbit(np.zeros(3), 4.0,
                            rng.uniform(0, 2 * np.pi),
                            rng.uniform(-0.3, 0.3), 30.0, 30.0, 12, 12)
    mu = rng.uniform(-0.35, 0.35, (npts, 3))
    mu[:, 2] = np.linspace(-0.6, 0.6, npts) + rng.uniform(-0.05, 0.05, npts)
    quat = rng.standard_normal((npts, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    scale = rng.uniform(0.6, 1.0, (npts, 3))
    opacity = rng.uniform(0.3, 0.7, (npts, 1))
    payload = rng.uniform(0.1, 0.9, (npts, 3))
    return cam, mu, quat, scale, opacity, payload


def check_rasterizer(n, rng):
    """Projection + depth-sorted alpha compositing, incl. covariance path."""
    worst = 0.0
    targets = ["mu", "opacity", "payload", "scale", "quat"]
    for i in range(n):
        cam, mu, quat, scale, opacity, payload = _fat_scene(rng)
        target = targets[i % len(targets)]
        wimg = rng.standard_normal((12, 12, 4))

        def fn(x):
            tape = x.tape
            args = {"mu": mu, "quat": quat, "scale": scale,
                    "opacity": opacity, "payload": payload}
            args[target] = x
            lift = {k: (v if isinstance(v, ad.Tensor) else tape.constant(v))
                    for k, v in args.items()}
            cov = covariance_t(lift["quat"], lift["scale"])
            out = raster.render_t(tape, cam, lift["mu"], cov,
                                  lift["opacity"], [lift["payload"]])
            return (out * wimg).sum()

        point = {"mu": mu, "quat": quat, "scale": scale,
                 "opacity": opacity, "payload": payload}[target]
        worst = max(worst, ad.grad_check(fn, point,
                                         coords=_coords(rng, point.size)))
    return worst


def check_losses(n, rng):
    """Every loss: masked L1, perceptual, contrastive, stage composites."""
    worst = 0.0
    phi = losses.FeatureExtractor(seed=0)
    weights = losses.LossWeights()
    targets = ["l1", "perceptual", "infonce", "stage1", "stage2"]
    for i in range(n):
        target = targets[i % len(targets)]
        gt = rng.uniform(0.1, 0.9, (16, 16, 3))
        # offsets >= 0.05 keep smooth-L1 far from its quadratic pocket
        diff = (rng.choice([-1.0, 1.0], gt.shape)
                * rng.uniform(0.05, 0.2, gt.shape))
        pred = gt + diff
        fg = rng.random((16, 16)) < 0.7
        fg[8, 8] = True
        gt_n = rng.uniform(0.1, 0.9, (16, 16, 3))
        pred_n = gt_n + (rng.choice([-1.0, 1.0], gt.shape)
                         * rng.uniform(0.05, 0.2, gt.shape))

        if target == "infonce":
            ys = 0.5 * rng.standard_normal((6, 8))
            yps = 0.5 * rng.standard_normal((6, 8))
            fn = lambda x: losses.infonce_gc(x, yps)       # noqa: E731
            point = ys
        elif target == "l1":
            fn = lambda x: losses.l1_image(gt, x, fg)      # noqa: E731
            point = pred
        elif target == "perceptual":
            fn = lambda x: losses.perceptual(gt, x, phi)   # noqa: E731
            point = pred
        elif target == "stage1":
            nc = pred_n

            def fn(x):
                return losses.stage1_loss(gt, x, gt_n,
                                          x.tape.constant(nc), fg,
                                          weights, phi)
            point = pred
        else:
            gc = 0.5 * float(rng.random()) + 0.1

            def fn(x):
                return losses.stage2_loss(gt, x, gt_n,
                                          x.tape.constant(pred_n), gc,
                                          fg, weights, phi)
            point = pred
        worst = max(worst, ad.grad_check(fn, point,
                                         coords=_coords(rng, point.size)))
    return worst


# ---------------------------------------------------------------------------
# suite driver
# ---------------------------------------------------------------------------

PATHS = {
    "encoders": check_encoders,
    "skinning": check_skinning,
    "offsets": check_offsets,
    "brdf": check_brdf,
    "shade": check_shade,
    "rasterizer": check_rasterizer,
    "losses": check_losses,
}


@dataclass
class PathReport:
    name: str
    configs: int
    max_err: float
    seconds: float

    @property
    def passed(self):
        return self.max_err <= TOL


def run_suite(n_configs=DEFAULT_CONFIGS, seed=0, paths=None):
    """Run the named paths (all by default); returns a PathReport list."""
    if paths is None:
        paths = list(PATHS)
    unknown = [p for p in paths if p not in PATHS]
    if unknown:
        raise ValueError(f"unknown gradient paths: {unknown}")
    order = list(PATHS)
    reports = []
    for name in paths:
        rng = np.random.default_rng((seed, order.index(name)))
        t0 = time.perf_counter()
        err = PATHS[name](n_configs, rng)
        reports.append(PathReport(name, n_configs, err,
                                  time.perf_counter() - t0))
    return reports


def format_reports(reports):
    lines = []
    for r in reports:
        lines.append(f"gradcheck.{r.name}.configs = {r.configs}")
        lines.append(f"gradcheck.{r.name}.max_rel_err = {r.max_err:.3e}")
        lines.append(f"gradcheck.{r.name}.seconds = {r.seconds:.2f}")
    ok = all(r.passed for r in reports)
    lines.append(f"gradcheck.all.status = {'pass' if ok else 'FAIL'}")
    return "\n".join(lines)
