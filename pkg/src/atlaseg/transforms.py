"""Rigid and affine spatial transforms with composition and warping.

Transforms are stored in resampling convention: they map physical points of
the fixed (subject) frame to physical points of the moving (atlas) frame, so
warping evaluates ``moving(T(x))`` on the fixed grid. The two-stage
composition used throughout the pipeline samples the moving image at
``t_rigid(t_affine(x))``, which realizes applying the rigid alignment to the
atlas first and the affine refinement on top of it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume3D, VolumeError


def rotation_from_euler(angles) -> np.ndarray:
    """Rotation matrix R = Rz(c) @ Ry(b) @ Rx(a) from XYZ Euler angles (radians)."""
    a, b, c = [float(x) for x in angles]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


def euler_from_rotation(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_from_euler`; valid away from gimbal lock."""
    b = -np.arcsin(np.clip(rot[2, 0], -1.0, 1.0))
    a = np.arctan2(rot[2, 1], rot[2, 2])
    c = np.arctan2(rot[1, 0], rot[0, 0])
    return float(a), float(b), float(c)


def rotation_derivatives(angles) -> list[np.ndarray]:
    """d R / d angle_k for the XYZ Euler parameterization."""
    a, b, c = [float(x) for x in angles]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])
    dry = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]])
    drz = np.array([[-sc, -cc, 0], [cc, -sc, 0], [0, 0, 0]])
    return [rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx]


@dataclass(frozen=True)
class RigidTransform:
    """6-parameter pose map x -> R(x - c) + c + t."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def matrix(self) -> np.ndarray:
        return rotation_from_euler(self.rotation)

    @property
    def params(self) -> np.ndarray:
        return np.asarray(self.rotation + self.translation, dtype=float)

    @classmethod
    def from_params(cls, params, center) -> "RigidTransform":
        p = np.asarray(params, dtype=float)
        return cls(tuple(p[:3]), tuple(p[3:6]), tuple(float(c) for c in center))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        c = np.asarray(self.center)
        return (pts - c) @ self.matrix.T + c + np.asarray(self.translation)

    def inverse(self) -> "RigidTransform":
        rot = self.matrix.T
        t = -rot @ np.asarray(self.translation)
        return RigidTransform(euler_from_rotation(rot), tuple(t), self.center)


@dataclass(frozen=True)
class AffineTransform:
    """12-parameter map x -> M(x - c) + c + t with det(M) > 0."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=float)
        if mat.shape != (3, 3):
            raise ValueError("affine matrix must be 3x3")
        if np.linalg.det(mat) <= 0:
            raise ValueError("affine matrix must be orientation-preserving (det > 0)")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.matrix).ravel(), np.asarray(self.translation)])

    @classmethod
    def from_params(cls, params, center) -> "AffineTransform":
        p = np.asarray(params, dtype=float)
        return cls(p[:9].reshape(3, 3), tuple(p[9:12]), tuple(float(c) for c in center))

    @classmethod
    def from_rigid(cls, rigid: RigidTransform) -> "AffineTransform":
        return cls(rigid.matrix, rigid.translation, rigid.center)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        c = np.asarray(self.center)
        return (pts - c) @ np.asarray(self.matrix).T + c + np.asarray(self.translation)

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        t = -inv @ np.asarray(self.translation)
        return AffineTransform(inv, tuple(t), self.center)


Transform = RigidTransform | AffineTransform

IDENTITY_RIGID = RigidTransform()


def compose(outer: Transform, inner: Transform) -> AffineTransform:
    """Affine equivalent of x -> outer(inner(x))."""
    mo, to = _linearize(outer)
    mi, ti = _linearize(inner)
    # outer(inner(x)) = mo mi x + mo ti + to
    return AffineTransform(mo @ mi, tuple(mo @ ti + to), (0.0, 0.0, 0.0))


def _linearize(t: Transform) -> tuple[np.ndarray, np.ndarray]:
    """Return (M, b) with t(x) = M x + b."""
    mat = np.asarray(t.matrix, dtype=float)
    c = np.asarray(t.center)
    b = c + np.asarray(t.translation) - mat @ c
    return mat, b


# ---------------------------------------------------------------------------
# Warping


def _require_axis_aligned(volume) -> None:
    if np.max(np.abs(np.asarray(volume.direction) - np.eye(3))) > 1e-5:
        raise VolumeError("warping requires RAS axis-aligned volumes")


def warp(volume, t_rigid: RigidTransform | None, t_affine: AffineTransform | None,
         reference: Volume3D):
    """Resample ``volume`` onto the reference grid through the two-stage transform.

    Sampling point for reference voxel x is ``t_rigid(t_affine(x))``; either
    transform may be None (identity). Images interpolate linearly, labels
    with nearest-neighbor.
    """
    _require_axis_aligned(volume)
    _require_axis_aligned(reference)
    mats = []
    for t in (t_rigid, t_affine):
        if t is not None:
            if isinstance(t, AffineTransform) and np.linalg.det(t.matrix) <= 0:
                raise ValueError("singular affine")
            mats.append(_linearize(t))
    # collapse to a single sampling map: point = rigid(affine(x))
    if len(mats) == 2:
        (mr, br), (ma, ba) = mats
        mat, b = mr @ ma, mr @ ba + br
    elif len(mats) == 1:
        mat, b = mats[0]
    else:
        mat, b = np.eye(3), np.zeros(3)

    shape = reference.shape
    idx = np.indices(shape, dtype=float).reshape(3, -1).T
    world = idx * np.asarray(reference.spacing) + np.asarray(reference.origin)
    sample = world @ mat.T + b
    m_idx = (sample - np.asarray(volume.origin)) / np.asarray(volume.spacing)
    is_label = isinstance(volume, LabelVolume)
    order = 0 if is_label else 1
    out = ndimage.map_coordinates(
        np.asarray(volume.data, dtype=float), m_idx.T, order=order, mode="constant", cval=0.0
    ).reshape(shape)
    if is_label:
        return LabelVolume(out, reference.spacing, reference.origin, reference.direction,
                           vocabulary=volume.vocabulary)
    return Volume3D(out, reference.spacing, reference.origin, reference.direction)


# ---------------------------------------------------------------------------
# Serialization


def transform_to_dict(t: Transform, fixed_id: str = "", moving_id: str = "") -> dict:
    if isinstance(t, RigidTransform):
        return {"type": "rigid", "parameters": list(t.params), "center": list(t.center),
                "fixed_id": fixed_id, "moving_id": moving_id}
    return {"type": "affine", "parameters": list(t.params), "center": list(t.center),
            "fixed_id": fixed_id, "moving_id": moving_id}


def transform_from_dict(d: dict) -> Transform:
    if d["type"] == "rigid":
        return RigidTransform.from_params(d["parameters"], d["center"])
    if d["type"] == "affine":
        return AffineTransform.from_params(d["parameters"], d["center"])
    raise ValueError(f"unknown transform type {d['type']!r}")


def save_transform(t: Transform, path, fixed_id: str = "", moving_id: str = "") -> None:
    Path(path).write_text(json.dumps(transform_to_dict(t, fixed_id, moving_id), indent=1,
                                     sort_keys=True))


def load_transform(path) -> Transform:
    return transform_from_dict(json.loads(Path(path).read_text()))
