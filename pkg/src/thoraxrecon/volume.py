"""Volume, mask and 2D image value types plus MetaImage I/O.

Axis convention
---------------
Arrays are indexed ``[z, y, x]`` (z slowest, x fastest).  ``spacing`` and
``origin`` tuples follow the same ``(z, y, x)`` order as the array axes.
MetaImage headers list per-axis values x-first, so the reader and writer
reverse them.  ``origin`` is the world position (mm) of the center of voxel
``[0, 0, 0]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Volume",
    "Mask",
    "ImageGrid2D",
    "MetaImageError",
    "MissingFileError",
    "MalformedHeaderError",
    "UnsupportedElementTypeError",
    "DataSizeMismatchError",
    "load_volume",
    "save_volume",
    "load_mask",
    "save_mask",
    "load_image",
    "save_image",
    "save_pgm",
    "read_pgm",
    "resample_trilinear",
    "hu_to_attenuation",
    "attenuation_to_hu",
    "MU_WATER",
    "CANONICAL_SPACING",
]

MU_WATER = 0.02  # 1/mm
CANONICAL_SPACING = (1.6, 1.6, 1.6)

_MET_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}


def _as_triple(values, name):
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    return out


def _frozen(arr):
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, order="C", copy=True)
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar 3D grid (HU or attenuation) with physical geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float] = CANONICAL_SPACING
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with all dims >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> np.ndarray:
        """Physical size (mm) of the grid along (z, y, x)."""
        return np.asarray(self.dims, dtype=float) * np.asarray(self.spacing)

    @property
    def center(self) -> np.ndarray:
        """World position of the grid center, ordered (z, y, x)."""
        return np.asarray(self.origin) + 0.5 * (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing, self.origin)

    def mask(self, data) -> "Mask":
        return Mask(data, self.spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, Volume) or isinstance(other, Mask) != isinstance(self, Mask):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Mask(Volume):
    """Binary 3D grid sharing a Volume's geometry."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.bool_:
            if not np.all((data == 0) | (data == 1)):
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(bool)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"mask data must be 3D with all dims >= 1, got shape {data.shape}")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    def with_data(self, data) -> "Mask":
        return Mask(data, self.spacing, self.origin)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    @property
    def volume_ml(self) -> float:
        return self.count * self.voxel_volume_mm3 / 1000.0

    @classmethod
    def empty_like(cls, ref: Volume) -> "Mask":
        return cls(np.zeros(ref.dims, dtype=bool), ref.spacing, ref.origin)


@dataclass(frozen=True, eq=False)
class ImageGrid2D:
    """2D detector image; ``spacing`` is (row_mm, col_mm)."""

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"image data must be 2D with all dims >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image data contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 2 or min(spacing) <= 0:
            raise ValueError(f"image spacing must be two positive values, got {spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, ImageGrid2D):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


# --------------------------------------------------------------------------
# MetaImage I/O


class MetaImageError(Exception):
    """Base class for MetaImage read failures."""

    def __init__(self, path, field_name, message):
        self.path = str(path)
        self.field = field_name
        super().__init__(f"{path}: {field_name}: {message}")


class MissingFileError(MetaImageError, FileNotFoundError):
    pass


class MalformedHeaderError(MetaImageError):
    pass


class UnsupportedElementTypeError(MetaImageError):
    pass


class DataSizeMismatchError(MetaImageError):
    pass


def _parse_header(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "header", "file not found")
    header = {}
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise MalformedHeaderError(path, f"line {lineno}", f"expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
            if key == "ElementDataFile":
                break
    return header


def _floats(header, key, n, path, default=None):
    if key not in header:
        if default is not None:
            return default
        raise MalformedHeaderError(path, key, "missing")
    try:
        vals = [float(v) for v in header[key].split()]
    except ValueError:
        raise MalformedHeaderError(path, key, f"non-numeric value {header[key]!r}") from None
    if len(vals) != n:
        raise MalformedHeaderError(path, key, f"expected {n} values, got {len(vals)}")
    return vals


def _read_metaimage(path, ndims):
    path = Path(path)
    header = _parse_header(path)
    if header.get("ObjectType", "Image") != "Image":
        raise MalformedHeaderError(path, "ObjectType", f"expected Image, got {header['ObjectType']!r}")
    try:
        nd = int(header.get("NDims", ""))
    except ValueError:
        raise MalformedHeaderError(path, "NDims", f"invalid value {header.get('NDims')!r}") from None
    if nd != ndims:
        raise MalformedHeaderError(path, "NDims", f"expected {ndims}, got {nd}")
    dim_vals = _floats(header, "DimSize", ndims, path)
    if any(d < 1 or d != int(d) for d in dim_vals):
        raise MalformedHeaderError(path, "DimSize", f"invalid sizes {header['DimSize']!r}")
    dims_xyz = [int(d) for d in dim_vals]
    spacing_xyz = _floats(header, "ElementSpacing", ndims, path, default=[1.0] * ndims)
    if any(s <= 0 for s in spacing_xyz):
        raise MalformedHeaderError(path, "ElementSpacing", "spacing must be positive")
    offset_xyz = _floats(header, "Offset", ndims, path, default=[0.0] * ndims)
    etype = header.get("ElementType")
    if etype is None:
        raise MalformedHeaderError(path, "ElementType", "missing")
    if etype not in _MET_TYPES:
        raise UnsupportedElementTypeError(path, "ElementType", f"unsupported type {etype!r}")
    dtype = _MET_TYPES[etype]
    msb = header.get("ElementByteOrderMSB", header.get("BinaryDataByteOrderMSB", "False"))
    if msb.lower() == "true":
        dtype = dtype.newbyteorder(">")
    datafile = header.get("ElementDataFile")
    if datafile is None:
        raise MalformedHeaderError(path, "ElementDataFile", "missing")
    if datafile == "LOCAL":
        raise MalformedHeaderError(path, "ElementDataFile", "inline data is not supported")
    rawpath = path.parent / datafile
    if not rawpath.is_file():
        raise MissingFileError(rawpath, "ElementDataFile", "raw data file not found")
    raw = np.fromfile(rawpath, dtype=np.uint8)
    expected = int(np.prod(dims_xyz))
    if raw.size != expected * dtype.itemsize:
        raise DataSizeMismatchError(
            path, "DimSize",
            f"raw file holds {raw.size / dtype.itemsize:g} elements, header requires {expected}",
        )
    data = raw.view(dtype).reshape(dims_xyz[::-1]).astype(np.float64)
    return data, tuple(spacing_xyz[::-1]), tuple(offset_xyz[::-1])


def _element_type(data):
    if np.all(data == np.round(data)) and data.min(initial=0) >= -32768 and data.max(initial=0) <= 32767:
        return "MET_SHORT"
    if np.array_equal(data.astype(np.float32).astype(np.float64), data):
        return "MET_FLOAT"
    return "MET_DOUBLE"


def _write_metaimage(path, data, spacing, origin, element_type=None):
    path = Path(path)
    if path.suffix.lower() != ".mhd":
        path = path.with_suffix(".mhd")
    etype = element_type or _element_type(data)
    rawpath = path.with_suffix(".raw")
    nd = data.ndim
    fmt = lambda vals: " ".join(repr(float(v)) for v in vals)  # noqa: E731
    lines = [
        "ObjectType = Image",
        f"NDims = {nd}",
        "DimSize = " + " ".join(str(n) for n in data.shape[::-1]),
        "ElementSpacing = " + fmt(spacing[::-1]),
        "Offset = " + fmt(origin[::-1]),
        f"ElementType = {etype}",
        "ElementByteOrderMSB = False",
        f"ElementDataFile = {rawpath.name}",
    ]
    raw = np.ascontiguousarray(data, dtype=_MET_TYPES[etype])
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    raw.tofile(rawpath)
    return path


def load_volume(path) -> Volume:
    """Read a 3D MetaImage (``.mhd`` + ``.raw``) into a Volume."""
    data, spacing, origin = _read_metaimage(path, 3)
    return Volume(data, spacing, origin)


def save_volume(v: Volume, path, element_type: str | None = None) -> Path:
    """Write ``v`` as a MetaImage pair and return the header path.

    The element type defaults to the narrowest of MET_SHORT, MET_FLOAT and
    MET_DOUBLE that stores the data exactly, so a reload is bit-identical.
    """
    if element_type is not None and element_type not in _MET_TYPES:
        raise ValueError(f"unsupported element type {element_type!r}")
    return _write_metaimage(path, v.data, v.spacing, v.origin, element_type)


def load_mask(path) -> Mask:
    data, spacing, origin = _read_metaimage(path, 3)
    if not np.all((data == 0) | (data == 1)):
        raise MalformedHeaderError(path, "ElementDataFile", "mask contains values other than 0 and 1")
    return Mask(data.astype(bool), spacing, origin)


def save_mask(m: Mask, path) -> Path:
    return _write_metaimage(path, m.data.astype(np.int16), m.spacing, m.origin, "MET_SHORT")


def load_image(path) -> ImageGrid2D:
    data, spacing, _ = _read_metaimage(path, 2)
    return ImageGrid2D(data, spacing)


def save_image(img: ImageGrid2D, path) -> Path:
    return _write_metaimage(path, img.data, img.spacing, (0.0, 0.0), "MET_FLOAT")


def save_pgm(img: ImageGrid2D, path) -> Path:
    """Write a 16-bit binary PGM; [0, 1] maps linearly onto [0, 65535]."""
    path = Path(path)
    scaled = np.rint(np.clip(img.data, 0.0, 1.0) * 65535.0).astype(">u2")
    rows, cols = img.dims
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(blob[pos:], dtype=dtype, count=rows * cols).reshape(rows, cols)


# --------------------------------------------------------------------------
# Resampling and unit conversion


def resample_trilinear(v: Volume, target_dims) -> Volume:
    """Resample onto ``target_dims`` voxels spanning the same physical extent.

    Output spacing is ``extent / target_dims`` per axis and the output grid is
    placed so its outer edges coincide with the input's.  Each output voxel is
    the trilinear interpolation of the input at its world position, with
    edge replication inside the input extent (nothing lies outside it).
    """
    target = tuple(int(n) for n in target_dims)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target_dims must be three integers >= 1, got {target_dims}")
    if target == v.dims:
        return v
    spacing_in = np.asarray(v.spacing)
    spacing_out = v.extent / np.asarray(target)
    corner = np.asarray(v.origin) - 0.5 * spacing_in
    origin_out = corner + 0.5 * spacing_out
    src = v.data
    out = src
    # separable: interpolate one axis at a time
    for axis in range(3):
        n_in, n_out = src.shape[axis], target[axis]
        world = origin_out[axis] + spacing_out[axis] * np.arange(n_out)
        idx = (world - v.origin[axis]) / spacing_in[axis]
        idx = np.clip(idx, 0.0, n_in - 1)
        lo = np.floor(idx).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = idx - lo
        shape = [1, 1, 1]
        shape[axis] = n_out
        frac = frac.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1.0 - frac) + np.take(out, hi, axis=axis) * frac
    return Volume(out, tuple(spacing_out), tuple(origin_out))


def hu_to_attenuation(v: Volume, mu_water: float = MU_WATER) -> Volume:
    """Linear attenuation (1/mm): ``mu_water * (1 + HU/1000)``, clamped at 0."""
    if mu_water <= 0:
        raise ValueError("mu_water must be positive")
    mu = mu_water * (1.0 + v.data / 1000.0)
    return v.with_data(np.maximum(mu, 0.0))


def attenuation_to_hu(v: Volume, mu_water: float = MU_WATER) -> Volume:
    if mu_water <= 0:
        raise ValueError("mu_water must be positive")
    return v.with_data(1000.0 * (v.data / mu_water - 1.0))


def ensure_writable_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"{path} is not writable")
    return path
