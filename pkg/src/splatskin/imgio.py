"""Float image I/O.

Rendered frames and the light probe are stored as PFM (portable float map):
linear radiance, float32, little-endian, scanlines bottom-to-top per the
format convention. PNG previews are tonemapped with a plain 1/2.2 gamma.
"""

import numpy as np
from PIL import Image


def write_pfm(path, img):
    """Write (H, W) or (H, W, 3) float data as a little-endian PFM."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM supports (H,W) or (H,W,3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path):
    """Read a PFM file; returns float32 (H, W) or (H, W, 3), top row first."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h * channels), dtype=dtype)
    img = data.reshape(h, w, channels).astype(np.float32)
    img = np.flipud(img)
    return img[:, :, 0] if channels == 1 else img


def write_png_preview(path, img):
    """Tonemapped 8-bit preview of linear radiance (gamma 1/2.2)."""
    img = np.asarray(img, dtype=np.float64)
    srgb = np.clip(img, 0.0, 1.0) ** (1.0 / 2.2)
    u8 = (srgb * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if u8.ndim == 2 else "RGB"
    Image.fromarray(u8, mode=mode).save(path)
