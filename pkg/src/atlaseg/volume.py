"""Geometric 3D volumes, file I/O, resampling, masking, and 2D slicing.

Volumes are dense scalar grids with physical geometry (spacing, origin,
direction cosines). Internally everything is kept in canonical RAS axis
order: axis 0 grows to the right, axis 1 to anterior, axis 2 to superior.
Loaders reorder data on the way in so downstream code never deals with
orientation permutations.

Two file formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``), reading qform/sform and the common
  datatypes, writing float32 for images and uint8 for label maps.
* A raw test format: little-endian C-order array in ``<name>.raw`` plus a
  JSON sidecar ``<name>.raw.json`` holding shape/spacing/origin/direction/
  dtype/vocabulary.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import get_slice_grid

ORIENTATIONS = ("axial", "coronal", "sagittal")

# Axis held fixed when slicing a canonical RAS volume.
ORIENTATION_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}

_DIRECTION_TOL = 1e-6


class VolumeError(ValueError):
    """Raised for malformed volumes, headers, or geometry mismatches."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


def _check_geometry(shape, spacing, origin, direction) -> None:
    if len(shape) != 3:
        raise VolumeError(f"expected 3D data, got shape {shape}")
    spacing = np.asarray(spacing, dtype=float)
    if spacing.shape != (3,) or not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
        raise VolumeError(f"invalid spacing {tuple(spacing)}")
    origin = np.asarray(origin, dtype=float)
    if origin.shape != (3,) or not np.all(np.isfinite(origin)):
        raise VolumeError(f"invalid origin {tuple(origin)}")
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (3, 3):
        raise VolumeError("direction must be a 3x3 matrix")
    if np.max(np.abs(direction.T @ direction - np.eye(3))) > _DIRECTION_TOL:
        raise VolumeError("non-orthonormal direction")


@dataclass(frozen=True)
class Volume3D:
    """Scalar 3D grid with physical geometry, immutable after construction."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        _check_geometry(self.data.shape, self.spacing, self.origin, self.direction)
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "direction", _freeze(np.asarray(self.direction, dtype=float)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def index_to_world(self, ijk: np.ndarray) -> np.ndarray:
        """Map (continuous) voxel indices, shape (..., 3), to mm coordinates."""
        ijk = np.asarray(ijk, dtype=float)
        return ijk * np.asarray(self.spacing) @ np.asarray(self.direction).T + np.asarray(self.origin)

    def world_to_index(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        return (xyz - np.asarray(self.origin)) @ np.asarray(self.direction) / np.asarray(self.spacing)

    def center_world(self) -> np.ndarray:
        """Physical coordinates of the grid center."""
        return self.index_to_world((np.asarray(self.shape, dtype=float) - 1.0) / 2.0)

    def same_grid(self, other: "Volume3D | LabelVolume", tol: float = 1e-5) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return replace(self, data=data)


def _smallest_label_dtype(max_id: int):
    if max_id <= np.iinfo(np.uint8).max:
        return np.uint8
    if max_id <= np.iinfo(np.int16).max:
        return np.int16
    return np.int32


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid sharing Volume3D geometry, plus an id -> name vocabulary."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    vocabulary: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        _check_geometry(self.data.shape, self.spacing, self.origin, self.direction)
        data = np.asarray(self.data)
        if np.issubdtype(data.dtype, np.floating):
            if not np.all(data == np.round(data)):
                raise VolumeError("label data must be integer-valued")
            data = np.round(data)
        if data.size and data.min() < 0:
            raise VolumeError("label data must be non-negative")
        max_id = int(data.max()) if data.size else 0
        data = data.astype(_smallest_label_dtype(max_id))
        vocab = {int(k): str(v) for k, v in self.vocabulary.items()}
        present = set(int(v) for v in np.unique(data)) - {0}
        if not vocab:
            vocab = {i: f"label_{i}" for i in sorted(present)}
        missing = present - set(vocab)
        if missing:
            raise VolumeError(f"labels {sorted(missing)} missing from vocabulary")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "direction", _freeze(np.asarray(self.direction, dtype=float)))
        object.__setattr__(self, "vocabulary", vocab)

    shape = Volume3D.shape
    index_to_world = Volume3D.index_to_world
    world_to_index = Volume3D.world_to_index
    center_world = Volume3D.center_world
    same_grid = Volume3D.same_grid

    def binary_mask(self, label_id: int) -> np.ndarray:
        return np.asarray(self.data) == int(label_id)

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return replace(self, data=data)


@dataclass(frozen=True)
class BrainMask:
    """Binary mask on the same grid as the volume it applies to."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(np.asarray(self.data).astype(bool)))


@dataclass(frozen=True)
class Slice2D:
    """One canonical-grid 2D slice extracted from a volume."""

    pixels: np.ndarray
    pixel_spacing: float
    orientation: str
    index: int
    provenance: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise VolumeError(f"slice pixels must be square 2D, got {px.shape}")
        if self.orientation not in ORIENTATIONS:
            raise VolumeError(f"unknown orientation {self.orientation!r}")
        object.__setattr__(self, "pixels", _freeze(px))


# ---------------------------------------------------------------------------
# RAS canonicalization


def canonicalize_ras(data, spacing, origin, direction):
    """Permute/flip axes so the direction matrix is as close to identity as possible.

    Voxel values are preserved; only the index order changes. For
    permutation-type direction matrices (e.g. LPS headers) the result has
    exactly the identity direction.
    """
    direction = np.asarray(direction, dtype=float)
    spacing = np.asarray(spacing, dtype=float)
    origin = np.asarray(origin, dtype=float)

    # Greedy dominant-axis assignment (handles near-ties in oblique headers).
    remaining = {0, 1, 2}
    src_axis = [-1, -1, -1]  # world axis -> data axis
    for _ in range(3):
        best = None
        for w in range(3):
            if src_axis[w] >= 0:
                continue
            for j in remaining:
                mag = abs(direction[w, j])
                if best is None or mag > best[0]:
                    best = (mag, w, j)
        _, w, j = best
        src_axis[w] = j
        remaining.discard(j)

    flips = [direction[w, src_axis[w]] < 0 for w in range(3)]

    new_data = np.transpose(np.asarray(data), axes=src_axis)
    slicer = tuple(slice(None, None, -1) if f else slice(None) for f in flips)
    new_data = new_data[slicer]

    new_spacing = spacing[src_axis]
    new_direction = direction[:, src_axis].copy()
    new_origin = origin.copy()
    for w in range(3):
        if flips[w]:
            j = src_axis[w]
            n = np.asarray(data).shape[j]
            new_origin = new_origin + direction[:, j] * spacing[j] * (n - 1)
            new_direction[:, w] = -new_direction[:, w]
    return new_data, tuple(new_spacing), tuple(new_origin), new_direction


# ---------------------------------------------------------------------------
# NIfTI-1 codec

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.int32): 8,
                np.dtype(np.float32): 16, np.dtype(np.float64): 64}

_HDR_FMT = "<i10s18sihcc8hfffhhhh8ffffhccffffii80s24shh6f4f4f4f16s4s"
assert struct.calcsize(_HDR_FMT) == 348


def _quaternion_to_rotation(b, c, d, qfac):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    rot[:, 2] *= qfac
    return rot


def _rotation_to_quaternion(rot):
    t = np.trace(rot)
    if t > 0:
        a = 0.5 * np.sqrt(1.0 + t)
        b = (rot[2, 1] - rot[1, 2]) / (4 * a)
        c = (rot[0, 2] - rot[2, 0]) / (4 * a)
        d = (rot[1, 0] - rot[0, 1]) / (4 * a)
    else:
        k = int(np.argmax(np.diag(rot)))
        if k == 0:
            s = 2 * np.sqrt(1 + rot[0, 0] - rot[1, 1] - rot[2, 2])
            a = (rot[2, 1] - rot[1, 2]) / s
            b, c, d = 0.25 * s, (rot[0, 1] + rot[1, 0]) / s, (rot[0, 2] + rot[2, 0]) / s
        elif k == 1:
            s = 2 * np.sqrt(1 - rot[0, 0] + rot[1, 1] - rot[2, 2])
            a = (rot[0, 2] - rot[2, 0]) / s
            b, c, d = (rot[0, 1] + rot[1, 0]) / s, 0.25 * s, (rot[1, 2] + rot[2, 1]) / s
        else:
            s = 2 * np.sqrt(1 - rot[0, 0] - rot[1, 1] + rot[2, 2])
            a = (rot[1, 0] - rot[0, 1]) / s
            b, c, d = (rot[0, 2] + rot[2, 0]) / s, (rot[1, 2] + rot[2, 1]) / s, 0.25 * s
    if a < 0:
        a, b, c, d = -a, -b, -c, -d
    return b, c, d


def _read_nifti(path: Path):
    raw = gzip.open(path, "rb").read() if path.name.endswith(".gz") else path.read_bytes()
    if len(raw) < 352:
        raise VolumeError(f"unreadable file {path}: truncated header")
    hdr = struct.unpack(_HDR_FMT, raw[:348])
    sizeof_hdr, magic = hdr[0], hdr[-1]
    if sizeof_hdr != 348 or not magic.startswith(b"n+1"):
        raise VolumeError(f"unreadable file {path}: not single-file NIfTI-1")
    dim = hdr[7:15]
    if dim[0] != 3:
        raise VolumeError(f"expected 3D NIfTI, got dim[0]={dim[0]}")
    shape = tuple(int(d) for d in dim[1:4])
    datatype, bitpix = hdr[19], hdr[20]
    if datatype not in _NIFTI_DTYPES:
        raise VolumeError(f"unsupported datatype code {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    pixdim = hdr[22:30]
    vox_offset = int(hdr[30])
    scl_slope, scl_inter = float(hdr[31]), float(hdr[32])
    qform_code, sform_code = hdr[44], hdr[45]
    quat = hdr[46:52]
    srow = np.array(hdr[52:64], dtype=float).reshape(3, 4)

    if sform_code > 0:
        mat = srow[:, :3]
        origin = srow[:, 3]
        spacing = np.linalg.norm(mat, axis=0)
        if np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
            raise VolumeError("invalid spacing")
        direction = mat / spacing
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        direction = _quaternion_to_rotation(quat[0], quat[1], quat[2], qfac)
        spacing = np.asarray(pixdim[1:4], dtype=float)
        origin = np.asarray(quat[3:6], dtype=float)
    else:
        direction = np.eye(3)
        spacing = np.asarray(pixdim[1:4], dtype=float)
        origin = np.zeros(3)

    count = int(np.prod(shape))
    body = raw[vox_offset:vox_offset + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise VolumeError(f"unreadable file {path}: truncated data")
    data = np.frombuffer(body, dtype=dtype).reshape(shape, order="F")
    if (scl_slope not in (0.0, 1.0)) or scl_inter != 0.0:
        if not np.issubdtype(data.dtype, np.floating):
            raise VolumeError("unsupported datatype: scaled integer data")
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    return data, spacing, origin, direction


def _write_nifti(path: Path, data: np.ndarray, spacing, origin, direction) -> None:
    dtype = np.dtype(data.dtype)
    if dtype not in _NIFTI_CODES:
        raise VolumeError(f"cannot write dtype {dtype} to NIfTI")
    direction = np.asarray(direction, dtype=float)
    spacing = np.asarray(spacing, dtype=float)
    origin = np.asarray(origin, dtype=float)

    qfac = 1.0
    rot = direction.copy()
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] = -rot[:, 2]
    b, c, d = _rotation_to_quaternion(rot)
    srow = (direction * spacing).astype(float)

    hdr = struct.pack(
        _HDR_FMT,
        348, b"", b"", 0, 0, b"\0", b"\0",
        3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1,
        0.0, 0.0, 0.0, 0, _NIFTI_CODES[dtype], dtype.itemsize * 8, 0,
        qfac, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0,
        352.0, 1.0, 0.0, 0, b"\0", b"\0", 0.0, 0.0, 0.0, 0.0, 0, 0,
        b"atlaseg", b"", 1, 1,
        b, c, d, origin[0], origin[1], origin[2],
        srow[0, 0], srow[0, 1], srow[0, 2], origin[0],
        srow[1, 0], srow[1, 1], srow[1, 2], origin[1],
        srow[2, 0], srow[2, 1], srow[2, 2], origin[2],
        b"", b"n+1\0",
    )
    body = hdr + b"\0\0\0\0" + np.asfortranarray(data).tobytes(order="F")
    if path.name.endswith(".gz"):
        # mtime pinned and filename omitted so identical volumes produce identical files
        with open(path, "wb") as raw_f:
            with gzip.GzipFile(filename="", fileobj=raw_f, mode="wb", mtime=0) as f:
                f.write(body)
    else:
        path.write_bytes(body)


# ---------------------------------------------------------------------------
# Raw + JSON sidecar test format


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _read_raw(path: Path):
    meta = json.loads(_sidecar_path(path).read_text())
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    shape = tuple(int(s) for s in meta["shape"])
    data = np.frombuffer(path.read_bytes(), dtype=dtype).reshape(shape)
    vocab = meta.get("vocabulary")
    vocab = {int(k): v for k, v in vocab.items()} if vocab else None
    return data, np.asarray(meta["spacing"], float), np.asarray(meta["origin"], float), \
        np.asarray(meta["direction"], float), vocab


def _write_raw(path: Path, data, spacing, origin, direction, vocabulary=None) -> None:
    meta = {
        "shape": list(data.shape),
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "direction": np.asarray(direction, dtype=float).tolist(),
        "dtype": np.dtype(data.dtype).name,
        "vocabulary": {str(k): v for k, v in vocabulary.items()} if vocabulary else None,
    }
    _sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))
    path.write_bytes(np.ascontiguousarray(data).astype(data.dtype, copy=False).tobytes())


# ---------------------------------------------------------------------------
# Public I/O


def load_volume(path, kind: str = "auto") -> Volume3D | LabelVolume:
    """Load a NIfTI-1 or raw+sidecar volume, canonicalized to RAS axis order.

    ``kind`` is one of ``auto`` (labels iff integer-typed / vocabulary
    present), ``image``, or ``label``.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"file not found: {path}")
    vocab = None
    if path.name.endswith((".nii", ".nii.gz")):
        data, spacing, origin, direction = _read_nifti(path)
        vocab_path = Path(str(path) + ".labels.json")
        if vocab_path.exists():
            vocab = {int(k): v for k, v in json.loads(vocab_path.read_text()).items()}
    elif path.name.endswith(".raw"):
        data, spacing, origin, direction, vocab = _read_raw(path)
    else:
        raise VolumeError(f"unsupported file format: {path}")

    data, spacing, origin, direction = canonicalize_ras(data, spacing, origin, direction)
    is_label = kind == "label" or (
        kind == "auto" and (vocab is not None or np.issubdtype(data.dtype, np.integer))
    )
    if is_label:
        return LabelVolume(data, spacing, origin, direction, vocabulary=vocab or {})
    return Volume3D(data, spacing, origin, direction)


def save_volume(volume: Volume3D | LabelVolume, path) -> None:
    """Write a volume; format chosen by extension (.nii/.nii.gz/.raw)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    is_label = isinstance(volume, LabelVolume)
    data = np.asarray(volume.data)
    if path.name.endswith((".nii", ".nii.gz")):
        if is_label:
            if data.max(initial=0) > 255:
                raise VolumeError("labels above 255 cannot be written as uint8 NIfTI")
            out = data.astype(np.uint8)
        else:
            out = data.astype(np.float32)
        _write_nifti(path, out, volume.spacing, volume.origin, volume.direction)
        if is_label:
            Path(str(path) + ".labels.json").write_text(
                json.dumps({str(k): v for k, v in volume.vocabulary.items()}, sort_keys=True)
            )
    elif path.name.endswith(".raw"):
        _write_raw(path, data, volume.spacing, volume.origin, volume.direction,
                   volume.vocabulary if is_label else None)
    else:
        raise VolumeError(f"unsupported file format: {path}")


# ---------------------------------------------------------------------------
# Resampling and masking


def resample(volume, target_spacing, target_shape, mode: str | None = None):
    """Resample onto a grid of ``target_shape`` voxels at ``target_spacing`` mm.

    The output grid shares the input's direction and is centered on the
    input's center; out-of-field voxels are 0. Images interpolate linearly,
    labels with nearest-neighbor (the only mode allowed for labels).
    """
    is_label = isinstance(volume, LabelVolume)
    if mode is None:
        mode = "nearest" if is_label else "linear"
    if mode not in ("linear", "nearest"):
        raise VolumeError(f"unknown mode {mode!r}")
    if is_label and mode != "nearest":
        raise VolumeError("mode=nearest required for LabelVolume")
    target_spacing = np.asarray(target_spacing, dtype=float)
    target_shape = tuple(int(n) for n in target_shape)
    if np.any(target_spacing <= 0) or any(n <= 0 for n in target_shape):
        raise VolumeError("nonpositive target spacing or shape")

    src_spacing = np.asarray(volume.spacing)
    src_shape = np.asarray(volume.shape)
    # Center alignment; shared direction cancels out of the index mapping.
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in target_shape], indexing="ij")
    coords = [
        (g - (target_shape[a] - 1) / 2.0) * target_spacing[a] / src_spacing[a]
        + (src_shape[a] - 1) / 2.0
        for a, g in enumerate(grids)
    ]
    order = 0 if mode == "nearest" else 1
    out = ndimage.map_coordinates(
        np.asarray(volume.data, dtype=float), coords, order=order, mode="constant", cval=0.0
    )
    center = volume.center_world()
    direction = np.asarray(volume.direction)
    origin = center - direction @ (target_spacing * (np.asarray(target_shape) - 1) / 2.0)
    if is_label:
        return LabelVolume(out, tuple(target_spacing), tuple(origin), direction,
                           vocabulary=volume.vocabulary)
    return Volume3D(out, tuple(target_spacing), tuple(origin), direction)


def apply_mask(volume: Volume3D, mask: BrainMask) -> Volume3D:
    """Zero out voxels outside the mask."""
    if np.asarray(mask.data).shape != volume.shape:
        raise VolumeError(
            f"shape mismatch: volume {volume.shape} vs mask {np.asarray(mask.data).shape}"
        )
    return volume.with_data(np.asarray(volume.data) * np.asarray(mask.data))


# ---------------------------------------------------------------------------
# Multiplanar slicing


def _require_axis_aligned(volume) -> None:
    if np.max(np.abs(np.asarray(volume.direction) - np.eye(3))) > 1e-5:
        raise VolumeError("slicing requires an RAS axis-aligned volume; resample first")


def _inplane_axes(orientation: str) -> tuple[int, int]:
    a = ORIENTATION_AXIS[orientation]
    u, v = [ax for ax in range(3) if ax != a]
    return u, v


def extract_slice(volume, orientation: str, index: int, provenance: str = "") -> Slice2D:
    """Extract one slice, resampled/recentered onto the canonical slice grid."""
    _require_axis_aligned(volume)
    if orientation not in ORIENTATIONS:
        raise VolumeError(f"unknown orientation {orientation!r}")
    grid = get_slice_grid()
    a = ORIENTATION_AXIS[orientation]
    u, v = _inplane_axes(orientation)
    plane = np.take(np.asarray(volume.data, dtype=float), index, axis=a)

    n = grid.size
    sp = grid.pixel_spacing
    s_u, s_v = volume.spacing[u], volume.spacing[v]
    rows = (np.arange(n, dtype=float) - (n - 1) / 2.0) * sp / s_u + (volume.shape[u] - 1) / 2.0
    cols = (np.arange(n, dtype=float) - (n - 1) / 2.0) * sp / s_v + (volume.shape[v] - 1) / 2.0
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    order = 0 if isinstance(volume, LabelVolume) else 1
    pixels = ndimage.map_coordinates(plane, [rr, cc], order=order, mode="constant", cval=0.0)
    return Slice2D(pixels, sp, orientation, int(index), provenance)


def extract_slices(volume, orientation: str, provenance: str = "") -> list[Slice2D]:
    """All slices of a volume along one orientation, ordered by index."""
    a = ORIENTATION_AXIS[orientation]
    return [extract_slice(volume, orientation, k, provenance) for k in range(volume.shape[a])]


def stack_slices(slices: list[Slice2D], reference: Volume3D,
                 binary_threshold: float | None = None) -> Volume3D:
    """Reassemble canonical-grid slices into a volume on the reference grid.

    Values are linearly interpolated in-plane; when ``binary_threshold`` is
    given the interpolated values are binarized at that level (used to lift
    probability slices into binary masks).
    """
    if not slices:
        raise VolumeError("no slices to stack")
    _require_axis_aligned(reference)
    orientation = slices[0].orientation
    if any(s.orientation != orientation for s in slices):
        raise VolumeError("mixed orientations")
    a = ORIENTATION_AXIS[orientation]
    u, v = _inplane_axes(orientation)
    n_a = reference.shape[a]
    by_index = {s.index: s for s in slices}
    missing = [k for k in range(n_a) if k not in by_index]
    if missing:
        raise VolumeError(f"missing slice indices: {missing[:8]}")

    sp = slices[0].pixel_spacing
    n = slices[0].pixels.shape[0]
    s_u, s_v = reference.spacing[u], reference.spacing[v]
    rows = (np.arange(reference.shape[u], dtype=float) - (reference.shape[u] - 1) / 2.0) \
        * s_u / sp + (n - 1) / 2.0
    cols = (np.arange(reference.shape[v], dtype=float) - (reference.shape[v] - 1) / 2.0) \
        * s_v / sp + (n - 1) / 2.0
    rr, cc = np.meshgrid(rows, cols, indexing="ij")

    out = np.zeros(reference.shape, dtype=float)
    index_full = [slice(None)] * 3
    for k in range(n_a):
        plane = ndimage.map_coordinates(
            np.asarray(by_index[k].pixels), [rr, cc], order=1, mode="constant", cval=0.0
        )
        idx = list(index_full)
        idx[a] = k
        out[tuple(idx)] = plane
    if binary_threshold is not None:
        out = (out >= binary_threshold).astype(float)
    return Volume3D(out, reference.spacing, reference.origin, reference.direction)
