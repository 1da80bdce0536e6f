"""Synthetic abdominal phantoms and the PGPV raw volume format.

Phantoms are built from axis-aligned ellipsoids on a constant background
with additive Gaussian noise. Organs flagged as targets are the small
low-contrast structures the segmentation model learns; every other organ
is a distractor. Intensities are in HU-like units until
:func:`normalize_intensity` maps them to [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MAGIC = b"PGPV"
VERSION = 1
DTYPE_IMAGE = 0
DTYPE_MASK = 1
_HEADER = struct.Struct("<4sIB3I3f")

MIN_DIMS = (16, 64, 64)


class PGPVError(ValueError):
    """Raised for malformed or inconsistent PGPV files."""


@dataclass
class Volume:
    """3D scalar field, float32, C-order (z, y, x)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.voxels.shape)


@dataclass
class MaskVolume:
    """Binary labels aligned with a :class:`Volume`, one byte per voxel."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {v.shape}")
        if v.size and not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.voxels = np.ascontiguousarray(v, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.voxels.shape)


@dataclass(frozen=True)
class OrganSpec:
    """One ellipsoidal structure.

    ``center_range`` holds a (lo, hi) pair per axis as fractions of the
    volume extent; ``radii_range`` holds (lo, hi) per axis in voxels.
    """

    center_range: tuple = ((0.5, 0.5), (0.5, 0.5), (0.5, 0.5))
    radii_range: tuple = ((2.0, 2.0), (4.0, 4.0), (3.0, 3.0))
    intensity_offset: tuple = (100.0, 100.0)
    target: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "OrganSpec":
        unknown = set(d) - {"center_range", "radii_range", "intensity_offset", "target"}
        if unknown:
            raise ValueError(f"unknown organ keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("center_range", "radii_range"):
            if key in kw:
                kw[key] = tuple(tuple(float(x) for x in pair) for pair in kw[key])
        if "intensity_offset" in kw:
            kw["intensity_offset"] = tuple(float(x) for x in kw["intensity_offset"])
        return cls(**kw)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (24, 96, 96)
    spacing: tuple = (2.5, 0.8, 0.8)
    background: tuple = (-90.0, -70.0)
    organs: tuple = field(default_factory=tuple)
    max_target_fraction: float = 0.01
    noise_std: float = 12.0
    seed: int = 0

    @property
    def organ_count(self) -> int:
        return len(self.organs)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        allowed = {"dims", "spacing", "background", "organs", "max_target_fraction", "noise_std", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("dims", "spacing", "background"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "organs" in kw:
            kw["organs"] = tuple(OrganSpec.from_dict(o) for o in kw["organs"])
        return cls(**kw)


def default_phantom_spec(seed: int = 0, dims=(24, 96, 96)) -> PhantomSpec:
    """Fat background, three distractor organs and two adrenal-like targets."""
    organs = (
        # liver-like
        OrganSpec(((0.3, 0.7), (0.3, 0.45), (0.15, 0.3)), ((6, 9), (14, 20), (10, 16)), (140.0, 160.0)),
        # kidney-like, bright
        OrganSpec(((0.3, 0.7), (0.6, 0.75), (0.65, 0.8)), ((4, 6), (7, 10), (6, 9)), (220.0, 260.0)),
        # vessel-like, brightest
        OrganSpec(((0.0, 1.0), (0.55, 0.62), (0.48, 0.52)), ((30, 30), (3, 4), (3, 4)), (300.0, 340.0)),
        # left / right targets
        OrganSpec(((0.35, 0.65), (0.42, 0.58), (0.34, 0.42)), ((2, 3), (3, 5), (2, 4)), (100.0, 125.0), target=True),
        OrganSpec(((0.35, 0.65), (0.42, 0.58), (0.58, 0.66)), ((2, 3), (3, 5), (2, 4)), (100.0, 125.0), target=True),
    )
    return PhantomSpec(dims=tuple(dims), organs=organs, seed=seed)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    z, y, x = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (
        ((z - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((x - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _check_spec(spec: PhantomSpec) -> None:
    if len(spec.dims) != 3 or any(int(d) < m for d, m in zip(spec.dims, MIN_DIMS)):
        raise ValueError(f"dims {spec.dims} below minimum {MIN_DIMS}")
    if not 0.0 < spec.max_target_fraction <= 0.01:
        raise ValueError("max_target_fraction must lie in (0, 0.01]")
    if spec.noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    # Lattice points of an ellipsoid stay below the volume of the one
    # inflated by a voxel on every axis.
    worst = 0.0
    for organ in spec.organs:
        if organ.target:
            if min(lo for lo, _ in organ.radii_range) < 1.0:
                raise ValueError("target radii must be >= 1 voxel")
            r = [hi + 1.0 for _, hi in organ.radii_range]
            worst += 4.0 / 3.0 * np.pi * r[0] * r[1] * r[2]
    if worst > spec.max_target_fraction * float(np.prod(spec.dims)):
        raise ValueError(
            f"target fraction bound {spec.max_target_fraction} infeasible for requested radii "
            f"(worst case {worst:.0f} voxels in {int(np.prod(spec.dims))})"
        )


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, MaskVolume]:
    """Render a phantom volume and its target mask.

    Deterministic in ``spec`` (including its seed). Targets are drawn after
    distractors so the mask marks exactly the voxels carrying target
    intensity.
    """
    _check_spec(spec)
    dims = tuple(int(d) for d in spec.dims)
    rng = np.random.default_rng(spec.seed)
    background = rng.uniform(*spec.background)
    vol = np.full(dims, background, dtype=np.float64)
    mask = np.zeros(dims, dtype=bool)

    ordered = [o for o in spec.organs if not o.target] + [o for o in spec.organs if o.target]
    for organ in ordered:
        radii = [rng.uniform(lo, hi) for lo, hi in organ.radii_range]
        center = []
        for axis, (lo, hi) in enumerate(organ.center_range):
            c = rng.uniform(lo, hi) * (dims[axis] - 1)
            if organ.target:
                # keep the whole target inside the volume
                c = float(np.clip(c, radii[axis], dims[axis] - 1 - radii[axis]))
            center.append(c)
        offset = rng.uniform(*organ.intensity_offset)
        inside = _ellipsoid(dims, center, radii)
        if organ.target and not inside.any():
            # radii >= 1 guarantee a lattice point near the center
            inside[tuple(int(round(c)) for c in center)] = True
        vol[inside] = background + offset
        if organ.target:
            mask |= inside

    if spec.noise_std > 0:
        vol += rng.normal(0.0, spec.noise_std, size=dims)

    frac = mask.sum() / mask.size
    if frac > spec.max_target_fraction:
        raise ValueError(f"target fraction {frac:.4f} exceeds bound {spec.max_target_fraction}")
    return Volume(vol.astype(np.float32), spec.spacing), MaskVolume(mask.astype(np.uint8), spec.spacing)


def normalize_intensity(v: Volume, w_min: float = -200.0, w_max: float = 300.0) -> Volume:
    """Clamp to the window and map it affinely onto [-1, 1]."""
    if not w_min < w_max:
        raise ValueError(f"window requires w_min < w_max, got ({w_min}, {w_max})")
    x = np.clip(v.voxels.astype(np.float64), w_min, w_max)
    out = (x - w_min) * (2.0 / (w_max - w_min)) - 1.0
    return Volume(np.clip(out, -1.0, 1.0).astype(np.float32), v.spacing)


def slice_axial(v: Union[Volume, MaskVolume], z: int) -> np.ndarray:
    nz = v.voxels.shape[0]
    if not 0 <= z < nz:
        raise IndexError(f"axial index {z} out of range [0, {nz})")
    view = v.voxels[z]
    view.flags.writeable = False
    return view


def save_volume(v: Union[Volume, MaskVolume], path) -> None:
    if isinstance(v, MaskVolume):
        tag, dtype = DTYPE_MASK, np.dtype("u1")
    elif isinstance(v, Volume):
        tag, dtype = DTYPE_IMAGE, np.dtype("<f4")
    else:
        raise TypeError(f"cannot save {type(v).__name__}")
    if v.voxels.dtype.kind != dtype.kind or v.voxels.itemsize != dtype.itemsize:
        raise PGPVError(f"dtype mismatch: {v.voxels.dtype} for tag {tag}")
    header = _HEADER.pack(MAGIC, VERSION, tag, *v.dims, *v.spacing)
    payload = np.ascontiguousarray(v.voxels, dtype=dtype).tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path) -> Union[Volume, MaskVolume]:
    data = Path(path).read_bytes()
    return _parse_volume(data)


def _parse_volume(data: bytes) -> Union[Volume, MaskVolume]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise PGPVError(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise PGPVError("truncated header")
    magic, version, tag, nz, ny, nx, sz, sy, sx = _HEADER.unpack_from(data)
    if version != VERSION:
        raise PGPVError(f"version mismatch: file {version}, supported {VERSION}")
    if tag == DTYPE_IMAGE:
        dtype = np.dtype("<f4")
    elif tag == DTYPE_MASK:
        dtype = np.dtype("u1")
    else:
        raise PGPVError(f"unknown dtype tag {tag}")
    expected = nz * ny * nx * dtype.itemsize
    payload = data[_HEADER.size:]
    if len(payload) < expected:
        raise PGPVError(f"truncated payload: {len(payload)} bytes, need {expected}")
    if len(payload) > expected:
        raise PGPVError(f"payload size mismatch: {len(payload)} bytes for dims {(nz, ny, nx)}")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).copy()
    spacing = (sz, sy, sx)
    if tag == DTYPE_MASK:
        if voxels.size and voxels.max() > 1:
            raise PGPVError("mask payload is not binary")
        return MaskVolume(voxels, spacing)
    return Volume(voxels.astype(np.float32), spacing)


def target_slices(mask: MaskVolume) -> Sequence[int]:
    """Axial indices that contain at least one target voxel."""
    return [int(z) for z in np.flatnonzero(mask.voxels.reshape(mask.dims[0], -1).any(axis=1))]
