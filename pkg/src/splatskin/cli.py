"""Command-line front end: synth | train | render | relight | eval | gradcheck.

Every command is deterministic given its seed. Seeds and resolved
hyperparameters land in plain-text manifests next to the outputs, so a
run can be reproduced from its directory alone. Reports use one metric
per line, `task.metric.frame = value`.
"""

import pathlib
import sys

import click
import numpy as np

from . import gradsuite, imgio, kvcfg, losses, metrics, shlight, synth
from . import training
from .skinning import load_poses

# dataset shape knobs a synth --config file may override; the defaults are
# the standard benchmark scene used throughout the test suite
SYNTH_DEFAULTS = {"seed": 0, "joints": 4, "frames": 200, "cameras": 4,
                  "size": 48, "samples": 500}


@click.group()
def main():
    """Articulated Gaussian avatar pipeline."""


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _load_dataset(data_dir):
    try:
        return synth.import_dataset(data_dir)
    except FileNotFoundError as e:
        raise click.UsageError(str(e))
    except ValueError as e:
        raise click.ClickException(str(e))


def _load_run_model(run_dir):
    """Newest checkpoint in a training run directory, stage 2 preferred."""
    run = pathlib.Path(run_dir)
    for name in ("stage2.ckpt", "stage1.ckpt"):
        if (run / name).exists():
            model, _, _ = training.load_model(run / name)
            return model
    raise click.UsageError(f"no checkpoint in {run} (expected stage1.ckpt "
                           "or stage2.ckpt from `train`)")


def _pick_camera(dataset, cam_id):
    if not 0 <= cam_id < len(dataset.cameras):
        raise click.UsageError(f"camera {cam_id} not in dataset "
                               f"({len(dataset.cameras)} cameras)")
    return dataset.cameras[cam_id]


def _write_views(out_dir, t, arrays):
    out_dir.mkdir(parents=True, exist_ok=True)
    for tag, img in arrays.items():
        stem = out_dir / f"{t:04d}_{tag}"
        imgio.write_pfm(f"{stem}.pfm", np.asarray(img, dtype=np.float32))
        imgio.write_png_preview(f"{stem}.png", img)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command("synth")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True,
              type=click.Path(file_okay=False, path_type=pathlib.Path))
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False,
                              path_type=pathlib.Path),
              help="key = value overrides for joints/frames/cameras/"
                   "size/samples")
def synth_cmd(seed, out, config_path):
    """Write a synthetic capture (frames, cameras, poses, probe)."""
    shape = dict(SYNTH_DEFAULTS)
    if config_path is not None:
        overrides = kvcfg.load(config_path)
        unknown = set(overrides) - set(shape)
        if unknown:
            raise click.UsageError(
                f"unknown synth config keys: {sorted(unknown)}")
        shape.update(overrides)
    del shape["seed"]  # the flag owns the seed
    figure = synth.generate_figure(seed, joints=shape["joints"],
                                   samples=shape["samples"])
    cams = synth.ring_cameras(figure, count=shape["cameras"],
                              size=shape["size"])
    probe = synth.default_probe(seed)
    ds = synth.generate_sequence(figure, shape["frames"], cams, probe,
                                 seed=seed)
    synth.export(ds, out)
    click.echo(f"synth.dataset.checksum = {synth.dataset_checksum(out)}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@main.command("train")
@click.option("--data", required=True,
              type=click.Path(exists=True, file_okay=False,
                              path_type=pathlib.Path))
@click.option("--out", required=True,
              type=click.Path(file_okay=False, path_type=pathlib.Path))
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False,
                              path_type=pathlib.Path))
@click.option("--seed", default=None, type=int,
              help="overrides the config file seed")
@click.option("--stage", type=click.Choice(["1", "2", "all"]),
              default="all", show_default=True)
@click.option("--static-weights", is_flag=True,
              help="ablation: pose-independent skinning weights (stage 1 "
                   "init only; stage 2 resumes whatever was trained)")
def train_cmd(data, out, config_path, seed, stage, static_weights):
    """Fit the avatar to a dataset, writing stageN.ckpt per stage."""
    mapping = kvcfg.load(config_path) if config_path is not None else {}
    try:
        config = training.TrainConfig.from_mapping(mapping)
    except ValueError as e:
        raise click.UsageError(str(e))
    if seed is not None:
        config.seed = seed
    ds = _load_dataset(data)
    out.mkdir(parents=True, exist_ok=True)

    def run_stage(n, fn, model):
        history = fn(ds, model, config)
        training.save_model(out / f"stage{n}.ckpt", model,
                            iteration=config.stage1_iters if n == 1
                            else config.stage2_iters)
        with open(out / f"loss_stage{n}.txt", "w") as f:
            f.writelines(f"{v!r}\n" for v in history)
        if history:
            click.echo(f"train.stage{n}.final_loss = {history[-1]:.6f}")
        return history

    try:
        if stage in ("1", "all"):
            model = training.AvatarModel.init(
                ds.figure.x_c, ds.figure.skeleton, d=config.d,
                seed=config.seed, static=static_weights)
            run_stage(1, training.train_stage1, model)
        else:
            path = out / "stage1.ckpt"
            if not path.exists():
                raise click.UsageError(f"{path} not found; run --stage 1 "
                                       "first")
            model, _, _ = training.load_model(path)
        if stage in ("2", "all"):
            run_stage(2, training.train_stage2, model)
    except ValueError as e:
        raise click.ClickException(str(e))
    manifest = dict(config.to_mapping())
    manifest.update(stage=stage, static_weights=static_weights,
                    data=str(data))
    kvcfg.dump(out / "config.txt", manifest)


# ---------------------------------------------------------------------------
# render / relight
# ---------------------------------------------------------------------------

def _render_sequence(out, data, pose, camera, probe_path, subdir):
    ds = _load_dataset(data)
    model = _load_run_model(out)
    cam = _pick_camera(ds, camera)
    poses = load_poses(pose) if pose is not None else ds.poses
    probe = None
    mode = None
    if probe_path is not None:
        probe = shlight.EnvLightProbe.load(probe_path)
        mode = "pbr"
    dest = pathlib.Path(out) / subdir
    for t in range(len(poses)):
        rgb, normal, alpha = training.render_frame(model, poses, t, cam,
                                                   probe=probe, mode=mode)
        views = {"rgb": rgb, "normal": normal, "alpha": alpha}
        if probe is None:
            views["albedo"] = training.render_frame(model, poses, t, cam,
                                                    mode="albedo")[0]
        _write_views(dest, t, views)
    click.echo(f"{subdir}.frames = {len(poses)}")
    click.echo(f"{subdir}.dir = {dest}")


@main.command("render")
@click.option("--data", required=True,
              type=click.Path(exists=True, file_okay=False,
                              path_type=pathlib.Path))
@click.option("--out", required=True,
              type=click.Path(exists=True, file_okay=False,
                              path_type=pathlib.Path),
              help="training run directory; images go to OUT/renders")
@click.option("--pose", default=None,
              type=click.Path(exists=True, dir_okay=False,
                              path_type=pathlib.Path),
              help="pose file (defaults to the dataset sequence)")
@click.option("--camera", default=0, show_default=True, type=int)
def render_cmd(data, out, pose, camera):
    """Render rgb / normal / albedo images with a fitted model."""
    _render_sequence(out, data, pose, camera, None, "renders")


@main.command("relight")
@click.option("--data", required=True,
              type=click.Path(exists=True, file_okay=False,
                              path_type=pathlib.Path))
@click.option("--out", required=True,
              type=click.Path(exists=True, file_okay=False,
                              path_type=pathlib.Path))
@click.option("--probe", required=True,
              type=click.Path(exists=True, dir_okay=False,
                              path_type=pathlib.Path),
              help="environment probe .pfm replacing the learned light")
@click.option("--pose", default=None,
              type=click.Path(exists=True, dir_okay=False,
                              path_type=pathlib.Path))
@click.option("--camera", default=0, show_default=True, type=int)
def relight_cmd(data, out, probe, pose, camera):
    """Render under a swapped environment probe."""
    _render_sequence(out, data, pose, camera, probe, "relight")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def frame_metrics(gt, pred, phi):
    """All metrics for one frame; `gt`/`pred` are (rgb, normal, alpha)."""
    g_rgb, g_n, g_a = gt
    p_rgb, p_n, p_a = pred
    union = losses.foreground_mask(g_a) | losses.foreground_mask(p_a)
    return {
        "psnr": metrics.psnr(g_rgb, p_rgb),
        "ssim": metrics.ssim(g_rgb, p_rgb),
        "psnr_n": metrics.psnr(g_n, p_n, mask=union),
        "ssim_n": metrics.ssim(g_n, p_n, mask=union),
        "perceptual-proxy": losses.perceptual(
            np.asarray(g_rgb, dtype=np.float64),
            np.asarray(p_rgb, dtype=np.float64), phi),
    }


def evaluate_task(task, frames, ds, predict, phi, probe=None):
    """MetricReport over FrameRecords; `probe` re-renders the references
    under a swapped light (the relight protocol)."""
    rep = metrics.MetricReport(task=task)
    for fr in frames:
        cam = ds.cameras[fr.cam_id]
        if probe is None:
            gt = (fr.rgb, fr.normal, fr.alpha)
        else:
            gt = synth.render_gt_frame(ds.figure, ds.poses, fr.t, cam, probe)
        rep.add(fr.index, frame_metrics(gt, predict(fr, probe), phi))
    return rep


@main.command("eval")
@click.option("--data", required=True,
              type=click.Path(exists=True, file_okay=False,
                              path_type=pathlib.Path))
@click.option("--out", required=True,
              type=click.Path(exists=True, file_okay=False,
                              path_type=pathlib.Path),
              help="training run directory; metrics.txt is written there")
@click.option("--probe", default=None,
              type=click.Path(exists=True, dir_okay=False,
                              path_type=pathlib.Path),
              help="held-out probe: adds the relight task")
@click.option("--self-check", is_flag=True,
              help="score the ground truth against itself (validates the "
                   "metric plumbing; no checkpoint needed)")
def eval_cmd(data, out, probe, self_check):
    """Score held-out novel-view / novel-pose (and relight) frames."""
    ds = _load_dataset(data)
    split = training.split_dataset(ds)
    phi = losses.FeatureExtractor(seed=0)
    if self_check:
        def predict(fr, pr):
            if pr is None:
                return fr.rgb, fr.normal, fr.alpha
            return synth.render_gt_frame(ds.figure, ds.poses, fr.t,
                                         ds.cameras[fr.cam_id], pr)
    else:
        model = _load_run_model(out)

        def predict(fr, pr):
            mode = "pbr" if pr is not None else None
            return training.render_frame(model, ds.poses, fr.t,
                                         ds.cameras[fr.cam_id],
                                         probe=pr, mode=mode)
    tasks = [("novel_view", split.novel_view, None),
             ("novel_pose", split.novel_pose, None)]
    if probe is not None:
        tasks.append(("relight", split.novel_view,
                      shlight.EnvLightProbe.load(probe)))
    lines = []
    for task, frames, task_probe in tasks:
        if not frames:
            continue
        rep = evaluate_task(task, frames, ds, predict, phi, task_probe)
        lines.extend(rep.lines())
    for ln in lines:
        click.echo(ln)
    with open(pathlib.Path(out) / "metrics.txt", "w") as f:
        f.writelines(ln + "\n" for ln in lines)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

@main.command("gradcheck")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--configs", default=50, show_default=True, type=int)
def gradcheck_cmd(seed, configs):
    """Finite-difference audit of every differentiable path."""
    reports = gradsuite.run_suite(n_configs=configs, seed=seed)
    click.echo(gradsuite.format_reports(reports))
    if not all(r.passed for r in reports):
        sys.exit(1)


if __name__ == "__main__":
    main()
