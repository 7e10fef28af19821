"""Grid containers, trilinear sampling and the differential operators.

Arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``; vector fields
put the component first, ``(3, nx, ny, nz)``. Displacements are in voxel
units. All containers are read-only after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError, ShapeError

Dims = tuple[int, int, int]
Spacing = tuple[float, float, float]


def _frozen(arr, shape=None) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, order="C", copy=True)
    if shape is not None and out.shape != shape:
        raise ShapeError(f"expected array of shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """One 3D grayscale frame with voxel spacing in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvalidArgumentError(f"spacing must be three positive lengths, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Dims:
        return self.data.shape

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-voxel displacement ``[phi_x, phi_y, phi_z]`` in voxels."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ShapeError(f"flow data must have shape (3, nx, ny, nz), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("flow contains non-finite displacements")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> Dims:
        return self.data.shape[1:]

    @classmethod
    def zeros(cls, dims: Dims) -> "FlowField":
        return cls(np.zeros((3,) + tuple(dims)))

    @classmethod
    def constant(cls, dims: Dims, vector) -> "FlowField":
        data = np.empty((3,) + tuple(dims))
        data[:] = np.asarray(vector, dtype=np.float64).reshape(3, 1, 1, 1)
        return cls(data)


@dataclass(frozen=True, eq=False)
class VolumeSequence:
    """Reference frame I_0 plus the ordered frames I_1..I_n on one grid."""

    reference: ScalarVolume
    frames: tuple[ScalarVolume, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidArgumentError("a sequence needs at least one frame")
        for idx, f in enumerate(frames):
            if f.dims != self.reference.dims or f.spacing != self.reference.spacing:
                raise ShapeError(
                    f"frame {idx} has dims {f.dims} / spacing {f.spacing}, reference has "
                    f"{self.reference.dims} / {self.reference.spacing}"
                )
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    @property
    def dims(self) -> Dims:
        return self.reference.dims

    @property
    def spacing(self) -> Spacing:
        return self.reference.spacing

    @classmethod
    def from_frames(cls, frames: Sequence[ScalarVolume]) -> "VolumeSequence":
        """Use the first frame as the reference."""
        return cls(frames[0], tuple(frames))

    def window(self, start: int, length: int) -> "VolumeSequence":
        return VolumeSequence(self.reference, self.frames[start:start + length])


@dataclass(frozen=True, eq=False)
class KernelSet:
    """The 21 trainable stencil weights.

    ``grad`` (3, 3): image gradient taps per axis. ``flow_grad`` (3, 2): forward
    difference taps for the flow gradient. ``div`` (3, 2): divergence taps.
    """

    grad: np.ndarray = field(default_factory=lambda: np.tile([-0.5, 0.0, 0.5], (3, 1)))
    flow_grad: np.ndarray = field(default_factory=lambda: np.tile([-1.0, 1.0], (3, 1)))
    div: np.ndarray = field(default_factory=lambda: np.tile([-1.0, 1.0], (3, 1)))

    N_PARAMS = 21

    def __post_init__(self):
        for name, shape in (("grad", (3, 3)), ("flow_grad", (3, 2)), ("div", (3, 2))):
            arr = _frozen(getattr(self, name), shape)
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"kernel weights '{name}' are not finite")
            object.__setattr__(self, name, arr)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.grad.ravel(), self.flow_grad.ravel(), self.div.ravel()])

    @classmethod
    def from_vector(cls, vec) -> "KernelSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (cls.N_PARAMS,):
            raise ShapeError(f"expected {cls.N_PARAMS} kernel weights, got shape {vec.shape}")
        return cls(vec[:9].reshape(3, 3), vec[9:15].reshape(3, 2), vec[15:].reshape(3, 2))

    def __eq__(self, other):
        if not isinstance(other, KernelSet):
            return NotImplemented
        return bool(np.array_equal(self.to_vector(), other.to_vector()))

    __hash__ = None


def _check_dims(*dims):
    first = tuple(dims[0])
    for d in dims[1:]:
        if tuple(d) != first:
            raise ShapeError(f"dimension mismatch: {first} vs {tuple(d)}")


def trilinear_sample(vol, point) -> float:
    """Trilinear interpolation at a continuous voxel coordinate.

    Coordinates outside the grid are clamped to the grid box first.
    ``vol`` may be a ScalarVolume or a bare 3D array.
    """
    data = vol.data if isinstance(vol, ScalarVolume) else np.ascontiguousarray(vol, dtype=np.float64)
    px, py, pz = (float(c) for c in point)
    if not (math.isfinite(px) and math.isfinite(py) and math.isfinite(pz)):
        raise InvalidArgumentError(f"sample point must be finite, got {point}")
    return float(_kernels.sample_point(data, px, py, pz))


def warp(vol: ScalarVolume, flow: FlowField) -> ScalarVolume:
    """Backward warp: ``out(x) = vol(x + flow(x))``."""
    _check_dims(vol.dims, flow.dims)
    out = _kernels.warp_fields(vol.data[np.newaxis], flow.data)[0]
    return ScalarVolume(out, vol.spacing)


def warp_array(fields: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Warp a stack of raw fields ``(m, nx, ny, nz)`` by a raw flow array."""
    return _kernels.warp_fields(np.ascontiguousarray(fields, dtype=np.float64),
                                np.ascontiguousarray(flow, dtype=np.float64))


def gradient(vol: ScalarVolume, kernels: KernelSet | None = None) -> np.ndarray:
    """Image gradient ``(3, nx, ny, nz)`` from the 3-tap ``kernels.grad`` stencils.

    With the initial kernels this is the central difference in the interior
    and a half one-sided difference on the faces (replicate-edge padding).
    """
    if min(vol.dims) < 3:
        raise ShapeError(f"gradient needs at least 3 voxels per axis, got {vol.dims}")
    kernels = kernels or KernelSet()
    return _kernels.central_gradient(vol.data, kernels.grad)


def flow_gradient(component: np.ndarray, kernels: KernelSet | None = None) -> np.ndarray:
    """Forward-difference gradient of one scalar grid using ``kernels.flow_grad``."""
    kernels = kernels or KernelSet()
    return _kernels.forward_gradient(np.ascontiguousarray(component, dtype=np.float64), kernels.flow_grad)


def divergence(field: np.ndarray, kernels: KernelSet | None = None) -> np.ndarray:
    """Divergence of a dual field ``(3, nx, ny, nz)`` using ``kernels.div``.

    Boundary convention: the first slice contributes ``+p`` and the last
    slice ``-p`` of the previous entry, so that with the initial kernels
    this is the negative adjoint of the forward difference.
    """
    field = np.ascontiguousarray(field, dtype=np.float64)
    if field.ndim != 4 or field.shape[0] != 3:
        raise ShapeError(f"dual field must have shape (3, nx, ny, nz), got {field.shape}")
    kernels = kernels or KernelSet()
    return _kernels.divergence(field, kernels.div)


def compose_flow(first: FlowField, second: FlowField) -> FlowField:
    """``first(x) + second(x + first(x))``: follow ``first``, then ``second``."""
    _check_dims(first.dims, second.dims)
    return FlowField(first.data + _kernels.warp_fields(second.data, first.data))


# Intensity range the solver works in; it sets the balance between the
# lambda-weighted data term and the total-variation term.
INTENSITY_SCALE = 60.0


def normalize_intensities(volumes: Sequence[ScalarVolume], scale: float = INTENSITY_SCALE) -> list[ScalarVolume]:
    """Joint min-max rescale of a group of frames to ``[0, scale]``.

    A constant group maps to all zeros.
    """
    lo = min(float(v.data.min()) for v in volumes)
    hi = max(float(v.data.max()) for v in volumes)
    span = hi - lo
    if span <= 0.0:
        return [v.with_data(np.zeros(v.dims)) for v in volumes]
    return [v.with_data((v.data - lo) * (scale / span)) for v in volumes]
