"""Pinhole cameras and camera rigs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    """Pinhole camera; +z looks forward, +x right, +y down (pixel rows).

    Pixel ``(row i, col j)`` has its center at image coordinates
    ``(j + 0.5, i + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3 world -> camera
    translation: np.ndarray  # 3
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height, "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), fov_deg: float = 50.0,
                width: int = 128, height: int = 128, near: float = 0.01, far: float = 100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, rot, -rot @ eye, width, height, near, far)


@dataclass
class CameraRig:
    cameras: list
    checking_index: int = 0
    heldout: list = field(default_factory=list)

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("camera rig is empty")
        if not 0 <= self.checking_index < len(self.cameras):
            raise ValueError(f"checking_index {self.checking_index} out of range")

    @property
    def checking(self) -> Camera:
        return self.cameras[self.checking_index]

    def training_indices(self) -> list:
        return [i for i in range(len(self.cameras)) if i != self.checking_index]

    def to_dict(self) -> dict:
        return {
            "cameras": [c.to_dict() for c in self.cameras],
            "checking_index": self.checking_index,
            "heldout": [c.to_dict() for c in self.heldout],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls([Camera.from_dict(c) for c in d["cameras"]], int(d["checking_index"]),
                   [Camera.from_dict(c) for c in d.get("heldout", [])])


def fibonacci_directions(n: int, offset: float = 0.5) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + offset
    z = 1 - 2 * i / n
    r = np.sqrt(np.clip(1 - z * z, 0, None))
    phi = np.pi * (3 - np.sqrt(5)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def orbit_rig(n_cameras: int = 32, n_heldout: int = 8, radius: float = 3.5, fov_deg: float = 50.0,
              resolution: int = 128, checking_index: int = 0) -> CameraRig:
    """Cameras on a sphere looking at the origin.

    Held-out cameras sit on a second, interleaved Fibonacci lattice so none
    of them coincides with a rig camera.
    """

    def make(dirs):
        return [Camera.look_at(radius * d, fov_deg=fov_deg, width=resolution, height=resolution,
                               near=0.05, far=radius * 4) for d in dirs]

    cams = make(fibonacci_directions(n_cameras))
    held = make(fibonacci_directions(n_heldout, offset=0.25)) if n_heldout else []
    return CameraRig(cams, checking_index, held)
