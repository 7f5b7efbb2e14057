"""Pinhole camera with OpenCV axis conventions (x right, y down, z forward)."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ParameterError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("image size must be positive")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise ParameterError("camera rotation is not a proper orthonormal matrix")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """World points (N,3) -> (pixel coords (N,2), camera z (N,))."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def pixel_rays(self):
        """Camera-space ray directions with unit z through every pixel center, (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy, np.ones_like(gx)], axis=-1)

    def view_dirs(self):
        """Unit world-space viewing directions (camera -> scene) per pixel, (H, W, 3)."""
        rays = self.pixel_rays() @ self.rotation  # R^T applied to row vectors
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, near=0.01, far=100.0):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(fx, fy, width / 2.0, height / 2.0, width, height, rot, -rot @ eye, near, far)
