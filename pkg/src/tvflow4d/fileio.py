"""Binary volume/flow/kernel files and CSV reports.

Volume file (``F4DV``) and flow file (``F4DF``) share a 36-byte
little-endian header::

    magic    4s   b"F4DV" or b"F4DF"
    version  u32  1
    nx ny nz u32 x3
    count    u32  frames (volume) or fields (flow)
    spacing  f32 x3, mm

followed by float32 little-endian samples, x fastest. A flow field is
stored as three planes, all phi_x then all phi_y then all phi_z.

Kernel file (``F4DK``): magic, version u32 = 1, count u32 = 21, then 21
float64 little-endian weights in the order grad, flow_grad, div (row-major,
axis then tap).
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, InvalidArgumentError, LengthError
from .volume import FlowField, KernelSet, ScalarVolume, VolumeSequence

VERSION = 1
VOLUME_MAGIC = b"F4DV"
FLOW_MAGIC = b"F4DF"
KERNEL_MAGIC = b"F4DK"
HEADER = struct.Struct("<4sIIIIIfff")
KERNEL_HEADER = struct.Struct("<4sII")
MAX_SAMPLES = 1 << 31


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic, dims, count, spacing, planes: Iterable[np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(HEADER.pack(magic, VERSION, *dims, count, *spacing))
    for plane in planes:
        buf.write(np.asarray(plane, dtype="<f4").ravel(order="F").tobytes())
    return buf.getvalue()


def _read_checked(path, magic, what):
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise LengthError(f"{path}: {len(head)} bytes is shorter than the {HEADER.size}-byte header",
                              expected=HEADER.size, actual=len(head))
        mg, version, nx, ny, nz, count, sx, sy, sz = HEADER.unpack(head)
        if mg != magic:
            raise FormatError(f"{path}: bad magic {mg!r}, expected {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}, expected {VERSION}")
        if min(nx, ny, nz, count) == 0:
            raise FormatError(f"{path}: header has a zero extent ({nx}, {ny}, {nz}) x {count}")
        spacing = (sx, sy, sz)
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise FormatError(f"{path}: spacing {spacing} is not positive")
        n_samples = nx * ny * nz * count * what
        if n_samples > MAX_SAMPLES:
            raise FormatError(f"{path}: header claims {n_samples} samples, above the {MAX_SAMPLES} cap")
        expected = n_samples * 4
        actual = os.fstat(fh.fileno()).st_size - HEADER.size
        if actual != expected:
            raise LengthError(f"{path}: payload holds {actual} bytes, header implies {expected}",
                              expected=expected, actual=actual)
        raw = fh.read(expected)
    if len(raw) != expected:
        raise LengthError(f"{path}: payload holds {len(raw)} bytes, header implies {expected}",
                          expected=expected, actual=len(raw))
    data = np.frombuffer(raw, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise DataError(f"{path}: non-finite sample at payload index {bad[0]}", index=int(bad[0]))
    data = data.astype(np.float64).reshape(count * what, nz, ny, nx).transpose(0, 3, 2, 1)
    return data, (nx, ny, nz), tuple(float(s) for s in spacing)


def write_volumes(volumes: Sequence[ScalarVolume], path) -> None:
    if not volumes:
        raise InvalidArgumentError("nothing to write")
    first = volumes[0]
    for v in volumes[1:]:
        if v.dims != first.dims or v.spacing != first.spacing:
            raise InvalidArgumentError("all volumes in one file must share dims and spacing")
    atomic_write_bytes(path, _pack(VOLUME_MAGIC, first.dims, len(volumes), first.spacing,
                                   (v.data for v in volumes)))


def read_volumes(path) -> list[ScalarVolume]:
    data, _, spacing = _read_checked(path, VOLUME_MAGIC, 1)
    return [ScalarVolume(d, spacing) for d in data]


def write_volume_file(seq: VolumeSequence, path) -> None:
    """Store the frames of ``seq``; the reference must be its first frame."""
    if not np.array_equal(seq.reference.data, seq.frames[0].data):
        raise InvalidArgumentError("volume files store the reference as frame 0; "
                                   "the sequence reference differs from its first frame")
    write_volumes(seq.frames, path)


def read_volume_file(path) -> VolumeSequence:
    return VolumeSequence.from_frames(read_volumes(path))


def write_flow_file(flows: Sequence[FlowField], path, spacing=(1.0, 1.0, 1.0)) -> None:
    if not flows:
        raise InvalidArgumentError("nothing to write")
    dims = flows[0].dims
    if any(f.dims != dims for f in flows):
        raise InvalidArgumentError("all flows in one file must share dims")
    planes = (f.data[c] for f in flows for c in range(3))
    atomic_write_bytes(path, _pack(FLOW_MAGIC, dims, len(flows), spacing, planes))


def read_flow_file(path) -> tuple[list[FlowField], tuple[float, float, float]]:
    data, dims, spacing = _read_checked(path, FLOW_MAGIC, 3)
    flows = [FlowField(data[3 * i:3 * i + 3]) for i in range(data.shape[0] // 3)]
    return flows, spacing


def write_kernel_file(kernels: KernelSet, path) -> None:
    vec = kernels.to_vector()
    payload = KERNEL_HEADER.pack(KERNEL_MAGIC, VERSION, vec.size) + vec.astype("<f8").tobytes()
    atomic_write_bytes(path, payload)


def read_kernel_file(path) -> KernelSet:
    raw = Path(path).read_bytes()
    if len(raw) < KERNEL_HEADER.size:
        raise LengthError(f"{path}: {len(raw)} bytes is shorter than the kernel header",
                          expected=KERNEL_HEADER.size, actual=len(raw))
    magic, version, count = KERNEL_HEADER.unpack_from(raw)
    if magic != KERNEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {KERNEL_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    if count != KernelSet.N_PARAMS:
        raise FormatError(f"{path}: kernel file holds {count} weights, expected {KernelSet.N_PARAMS}")
    expected = count * 8
    actual = len(raw) - KERNEL_HEADER.size
    if actual != expected:
        raise LengthError(f"{path}: payload holds {actual} bytes, header implies {expected}",
                          expected=expected, actual=actual)
    vec = np.frombuffer(raw, dtype="<f8", offset=KERNEL_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        raise DataError(f"{path}: non-finite weight at index {bad[0]}", index=int(bad[0]))
    return KernelSet.from_vector(vec.copy())


def read_mask(path, dims=None) -> list[np.ndarray]:
    """Masks are volume files; any non-zero sample is inside."""
    masks = [v.data != 0 for v in read_volumes(path)]
    if dims is not None and masks[0].shape != tuple(dims):
        raise FormatError(f"{path}: mask dims {masks[0].shape} do not match {tuple(dims)}")
    return masks


def write_mask(masks: Sequence[np.ndarray], path, spacing=(1.0, 1.0, 1.0)) -> None:
    write_volumes([ScalarVolume(np.asarray(m, dtype=np.float64), spacing) for m in masks], path)


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "%.9g" % value
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_bytes(path, buf.getvalue().encode())


METRIC_COLUMNS = ("dataset", "frame", "mask_voxels", "mse_mean_mm", "mse_std_mm",
                  "epe_mean_vox", "epe_std_vox")
