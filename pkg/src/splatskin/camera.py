"""Pinhole cameras.

Convention: x_cam = R @ x_world + t with camera x right, y down, z forward
(points in front of the lens have z > 0). Pixel centers sit at integer
coordinates, u = fx*x/z + cx, v = fy*y/z + cy, u along columns.
World up is +z; look_at keeps the image upright under that convention.
"""

from dataclasses import dataclass, field

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Camera:
    R: np.ndarray              # world-to-camera rotation (rows = cam axes)
    t: np.ndarray              # x_cam = R x + t
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))  # look-at point

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, points):
        return np.asarray(points) @ self.R.T + self.t

    def project(self, points):
        """World points (N, 3) -> pixel coords (N, 2) and camera depth (N,)."""
        pc = self.world_to_cam(points)
        z = pc[:, 2]
        u = self.fx * pc[:, 0] / z + self.cx
        v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("eye and target coincide")
        z = fwd / n
        x = np.cross(z, WORLD_UP)
        nx = np.linalg.norm(x)
        if nx < 1e-9:
            # looking straight up/down; pick an arbitrary horizontal right
            x = np.array([1.0, 0.0, 0.0])
            nx = 1.0
        x = x / nx
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=0)
        if cx is None:
            cx = (width - 1) / 2.0
        if cy is None:
            cy = (height - 1) / 2.0
        return cls(R, -R @ eye, fx, fy, cx, cy, width, height, target)

    @classmethod
    def from_orbit(cls, target, radius, azimuth, elevation, fx, fy, width, height):
        """Camera on a sphere around target; angles in radians, world-z up."""
        target = np.asarray(target, dtype=np.float64)
        eye = target + radius * np.array([
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ])
        return cls.look_at(eye, target, fx, fy, width, height)

    def orbit_params(self):
        """(radius, azimuth, elevation) of the eye relative to the target."""
        rel = self.center - self.target
        radius = np.linalg.norm(rel)
        azimuth = np.arctan2(rel[1], rel[0])
        elevation = np.arcsin(np.clip(rel[2] / max(radius, 1e-12), -1.0, 1.0))
        return radius, azimuth, elevation

    # plain-text serialization for cameras.txt (one camera per line)
    def to_line(self):
        eye = self.center
        vals = [self.fx, self.fy, self.cx, self.cy,
                float(self.width), float(self.height),
                *eye, *self.target]
        return " ".join(f"{v:.17g}" for v in vals)

    @classmethod
    def from_line(cls, line):
        v = [float(s) for s in line.split()]
        if len(v) != 12:
            raise ValueError(f"camera line needs 12 fields, got {len(v)}")
        fx, fy, cx, cy, w, h = v[:6]
        eye, target = np.array(v[6:9]), np.array(v[9:12])
        cam = cls.look_at(eye, target, fx, fy, int(w), int(h))
        cam.cx, cam.cy = cx, cy
        return cam
