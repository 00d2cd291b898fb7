"""
Binary file formats.

All multi-byte fields are little-endian.

VOLB  ``"VOLB" u8 version u8 dtype(0=f32, 1=u8) 3*u32 dims(D,H,W) 3*f32 spacing`` + data, x fastest.
IMGF  ``"IMGF" u8 version 2*u32 dims(rows, cols) f32 pixel_spacing`` + f32 row-major data.
CKPT  ``"CKPT" u8 version u32 count`` then per tensor ``u32 len, utf-8 name, u32 rank,
      rank*u32 dims`` + f32 data. Architecture and config echo live in the
      ``<name>.ckpt.json`` sidecar.
PGM   binary ``P5`` with maxval 65535 (big-endian samples, as the format requires).
"""

import json
import struct
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from ..errors import FormatError, TruncatedFileError, UnsupportedVersionError
from ..imaging.volumes import DRRImage, MaskVolume, VoxelVolume

FORMAT_VERSION = 1

PathLike = Union[str, Path]

_VOLB_HEADER = struct.Struct("<4sBB3I3f")
_IMGF_HEADER = struct.Struct("<4sB2If")
_CKPT_HEADER = struct.Struct("<4sBI")
_U32 = struct.Struct("<I")


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, label: str):
        self.data = data
        self.offset = 0
        self.label = label

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedFileError(
                f"{self.label}: expected {size} bytes of {what}, only {len(self.data) - self.offset} left",
                offset=self.offset,
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> tuple:
        return layout.unpack(self.take(layout.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype).copy()

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{self.label}: {len(self.data) - self.offset} trailing bytes", offset=self.offset)


def _check_magic_version(magic: bytes, version: int, expected: bytes, label: str) -> None:
    if magic != expected:
        raise FormatError(f"{label}: bad magic {magic!r}, expected {expected!r}", offset=0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{label}: unsupported version {version}", offset=4)


def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# -------------------------------------------------------------------- VOLB


def encode_volb(volume: Union[VoxelVolume, MaskVolume]) -> bytes:
    if isinstance(volume, MaskVolume):
        dtype_code, payload = 1, volume.values.astype("<u1")
    else:
        dtype_code, payload = 0, volume.values.astype("<f4")
    header = _VOLB_HEADER.pack(b"VOLB", FORMAT_VERSION, dtype_code, *volume.dims, *volume.spacing)
    return header + np.ascontiguousarray(payload).tobytes()


def decode_volb(data: bytes) -> Union[VoxelVolume, MaskVolume]:
    reader = _Reader(data, "VOLB")
    magic, version, dtype_code, d, h, w, sz, sy, sx = reader.unpack(_VOLB_HEADER, "header")
    _check_magic_version(magic, version, b"VOLB", "VOLB")
    if dtype_code not in (0, 1):
        raise FormatError(f"VOLB: unknown dtype code {dtype_code}", offset=5)
    spacing = (float(sz), float(sy), float(sx))
    if dtype_code == 0:
        values = reader.array("<f4", d * h * w, "voxel data").reshape(d, h, w)
        reader.finish()
        return VoxelVolume(values.astype(np.float32), spacing)
    values = reader.array("<u1", d * h * w, "mask data").reshape(d, h, w)
    reader.finish()
    return MaskVolume(values, spacing)


def write_volb(path: PathLike, volume: Union[VoxelVolume, MaskVolume]) -> Path:
    path = Path(path)
    path.write_bytes(encode_volb(volume))
    return path


def read_volb(path: PathLike) -> Union[VoxelVolume, MaskVolume]:
    return decode_volb(_read_bytes(path))


# -------------------------------------------------------------------- IMGF


def encode_imgf(image: DRRImage) -> bytes:
    header = _IMGF_HEADER.pack(b"IMGF", FORMAT_VERSION, *image.dims, image.pixel_spacing)
    return header + np.ascontiguousarray(image.values.astype("<f4")).tobytes()


def decode_imgf(data: bytes) -> DRRImage:
    reader = _Reader(data, "IMGF")
    magic, version, rows, cols, pixel = reader.unpack(_IMGF_HEADER, "header")
    _check_magic_version(magic, version, b"IMGF", "IMGF")
    values = reader.array("<f4", rows * cols, "pixel data").reshape(rows, cols)
    reader.finish()
    return DRRImage(values.astype(np.float32), pixel_spacing=float(pixel))


def write_imgf(path: PathLike, image: DRRImage) -> Path:
    path = Path(path)
    path.write_bytes(encode_imgf(image))
    return path


def read_imgf(path: PathLike) -> DRRImage:
    return decode_imgf(_read_bytes(path))


# -------------------------------------------------------------------- CKPT


def encode_ckpt(tensors: dict[str, np.ndarray]) -> bytes:
    """Tensors in the given (architecture) order."""
    parts = [_CKPT_HEADER.pack(b"CKPT", FORMAT_VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array.astype("<f4")).tobytes())
    return b"".join(parts)


def decode_ckpt(data: bytes) -> dict[str, np.ndarray]:
    reader = _Reader(data, "CKPT")
    magic, version, count = reader.unpack(_CKPT_HEADER, "header")
    _check_magic_version(magic, version, b"CKPT", "CKPT")
    tensors: dict[str, np.ndarray] = {}
    for index in range(count):
        (length,) = reader.unpack(_U32, f"name length of tensor {index}")
        start = reader.offset
        try:
            name = reader.take(length, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"CKPT: tensor {index} name is not UTF-8 ({e.reason})", offset=start) from e
        (rank,) = reader.unpack(_U32, f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"dims of {name}"))
        values = reader.array("<f4", int(np.prod(dims, dtype=np.int64)), f"data of {name}")
        tensors[name] = values.reshape(dims).astype(np.float32)
    reader.finish()
    return tensors


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path: PathLike, tensors: dict[str, np.ndarray], meta: Optional[dict[str, Any]] = None) -> Path:
    """Write the CKPT binary and, when ``meta`` is given, its JSON sidecar."""
    path = Path(path)
    path.write_bytes(encode_ckpt(tensors))
    if meta is not None:
        with open(sidecar_path(path), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    return path


def load_checkpoint(path: PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """
    Read a checkpoint and its sidecar.

    Returns:
        (tensors, meta); meta is empty when no sidecar exists.
    """
    tensors = decode_ckpt(_read_bytes(path))
    meta: dict[str, Any] = {}
    side = sidecar_path(path)
    if side.exists():
        with open(side, "r", encoding="utf-8") as f:
            meta = json.load(f)
    return tensors, meta


# --------------------------------------------------------------------- PGM


def encode_pgm16(values: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> bytes:
    """Linearly map ``[lo, hi]`` (default data range) to 16-bit grey."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise FormatError(f"PGM needs a 2D array, got shape {values.shape}")
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    scaled = np.zeros_like(values) if hi <= lo else (np.clip(values, lo, hi) - lo) / (hi - lo)
    grey = np.rint(scaled * 65535).astype(">u2")
    rows, cols = values.shape
    return f"P5\n{cols} {rows}\n65535\n".encode("ascii") + grey.tobytes()


def write_pgm16(path: PathLike, values: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_pgm16(values, lo, hi))
    return path
