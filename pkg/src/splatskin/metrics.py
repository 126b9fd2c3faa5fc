"""Image quality metrics and the evaluation report container.

PSNR follows the standard 10 log10(peak^2 / MSE); identical images come
back as +inf, which doubles as the "infinite" flag downstream. SSIM is the
standard windowed form with an 11x11 Gaussian (sigma 1.5), K1 = 0.01,
K2 = 0.03 against a unit dynamic range, evaluated per channel on valid
window positions and averaged.
"""

from dataclasses import dataclass, field

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, peak=1.0, mask=None):
    """10 log10(peak^2 / MSE); `mask` restricts the MSE to chosen pixels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match "
                             f"image {a.shape[:2]}")
        if not mask.any():
            raise ValueError("psnr mask selects no pixels")
        err = err[mask]
    mse = float(err.mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_window():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _windowed(img, w):
    win = np.lib.stride_tricks.sliding_window_view(img, w.shape)
    return (win * w).sum(axis=(-1, -2))


def ssim(a, b, peak=1.0, mask=None):
    """Mean structural similarity; channels averaged, valid windows only.

    With `mask` the per-window SSIM map is averaged over windows whose
    center pixel is masked in, instead of over every valid window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x"
            f"{SSIM_WINDOW} ssim window")
    half = SSIM_WINDOW // 2
    centers = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match "
                             f"image {a.shape[:2]}")
        centers = mask[half:a.shape[0] - half, half:a.shape[1] - half]
        if not centers.any():
            raise ValueError("ssim mask selects no window centers")
    w = _gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _windowed(x, w)
        my = _windowed(y, w)
        vx = _windowed(x * x, w) - mx * mx
        vy = _windowed(y * y, w) - my * my
        vxy = _windowed(x * y, w) - mx * my
        num = (2 * mx * my + c1) * (2 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        smap = num / den
        vals.append(smap[centers].mean() if centers is not None
                    else smap.mean())
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """Per-frame metric table for one evaluation task."""

    task: str                                  # novel_view | novel_pose | relight
    frames: list = field(default_factory=list)  # frame ids, report order
    values: dict = field(default_factory=dict)  # metric name -> list

    def add(self, frame, metrics=None, **kw):
        # mapping form exists for metric names that are not identifiers
        # (e.g. "perceptual-proxy")
        vals = dict(metrics or {})
        vals.update(kw)
        self.frames.append(frame)
        for k, v in vals.items():
            self.values.setdefault(k, []).append(float(v))

    def mean(self, metric):
        v = np.asarray(self.values[metric])
        return float("inf") if np.isinf(v).any() else float(v.mean())

    def lines(self):
        """`task.metric.frame = value` rows plus a mean row per metric."""
        out = []
        for metric in self.values:
            for frame, v in zip(self.frames, self.values[metric]):
                out.append(f"{self.task}.{metric}.{frame:04d} = {_fmt(v)}")
            out.append(f"{self.task}.{metric}.mean = {_fmt(self.mean(metric))}")
        return out


def _fmt(v):
    return "inf" if np.isinf(v) else f"{v:.6f}"
