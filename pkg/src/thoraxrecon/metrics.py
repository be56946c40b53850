"""Image similarity, mask overlap, surface distance and correlation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Mask, Volume

__all__ = [
    "UndefinedMetricError",
    "MetricsReport",
    "QuantReport",
    "cosine_similarity",
    "psnr",
    "ssim",
    "SSIMParams",
    "dice",
    "jaccard",
    "surface_voxels",
    "surface_distances",
    "pearson",
    "quantify",
    "DEFAULT_DATA_RANGE",
]

DEFAULT_DATA_RANGE = 4095.0  # HU window [-1024, 3071]


class UndefinedMetricError(ValueError):
    """The metric has no value for these inputs (e.g. zero norm, empty mask)."""


def _arrays(a, b):
    x = a.data if isinstance(a, Volume) else np.asarray(a)
    y = b.data if isinstance(b, Volume) else np.asarray(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def cosine_similarity(a, b) -> float:
    x, y = _arrays(a, b)
    x = x.astype(np.float64).ravel()
    y = y.astype(np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise UndefinedMetricError("cosine similarity of a zero-norm volume")
    if np.array_equal(x, y):
        return 1.0
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def psnr(a, b, data_range: float = DEFAULT_DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    x, y = _arrays(a, b)
    mse = np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


@dataclass(frozen=True)
class SSIMParams:
    window: int = 7
    data_range: float = DEFAULT_DATA_RANGE
    k1: float = 0.01
    k2: float = 0.03


def ssim(a, b, params: SSIMParams = SSIMParams()) -> float:
    """Mean structural similarity over all fully contained cubic windows.

    Local statistics use uniform weights and population (1/N) moments.
    """
    x, y = _arrays(a, b)
    w = int(params.window)
    if w < 1 or min(x.shape) < w:
        raise ValueError(f"volume of shape {x.shape} is smaller than the {w}^3 window")
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2

    def box_mean(f):
        # summed-area table gives every valid window sum exactly once
        s = np.pad(f, ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
        t = (
            s[w:, w:, w:] - s[:-w, w:, w:] - s[w:, :-w, w:] - s[w:, w:, :-w]
            + s[:-w, :-w, w:] + s[:-w, w:, :-w] + s[w:, :-w, :-w] - s[:-w, :-w, :-w]
        )
        return t / w**3

    # subtract global means first to keep the moment differences well conditioned
    x0 = x - x.mean()
    y0 = y - y.mean()
    mx, my = box_mean(x0), box_mean(y0)
    vx = box_mean(x0 * x0) - mx * mx
    vy = box_mean(y0 * y0) - my * my
    cov = box_mean(x0 * y0) - mx * my
    mx = mx + x.mean()
    my = my + y.mean()
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def _masks(a, b):
    x, y = _arrays(a, b)
    return x.astype(bool), y.astype(bool)


def dice(a, b) -> float:
    """Dice overlap; 1.0 when both masks are empty."""
    x, y = _masks(a, b)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / total


def jaccard(a, b) -> float:
    x, y = _masks(a, b)
    union = int(np.count_nonzero(x | y))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(x & y)) / union


def surface_voxels(m) -> np.ndarray:
    """Foreground voxels with a face neighbour in the background or off-grid."""
    x = m.data if isinstance(m, Volume) else np.asarray(m, dtype=bool)
    interior = ndimage.binary_erosion(x, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return x & ~interior


def _directed(src, dst, spacing):
    # distance from every voxel to the nearest dst surface voxel
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def _nearest_rank(values, q):
    v = np.sort(values)
    rank = max(int(math.ceil(q / 100.0 * v.size)), 1)
    return float(v[rank - 1])


def surface_distances(a: Mask, b: Mask, spacing=None) -> tuple[float, float]:
    """(HD95, ASD) in mm between the surfaces of two non-empty masks.

    HD95 is the larger of the two directed nearest-rank 95th percentiles;
    ASD is the mean of the two directed mean distances.
    """
    x, y = _masks(a, b)
    if spacing is None:
        spacing = a.spacing if isinstance(a, Volume) else (1.0, 1.0, 1.0)
    if not x.any() or not y.any():
        raise UndefinedMetricError("surface distance with an empty mask")
    sa, sb = surface_voxels(x), surface_voxels(y)
    dab = _directed(sa, sb, spacing)
    dba = _directed(sb, sa, spacing)
    hd95 = max(_nearest_rank(dab, 95), _nearest_rank(dba, 95))
    asd = 0.5 * (float(dab.mean()) + float(dba.mean()))
    return hd95, asd


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pearson needs at least two samples")
    # second centering pass removes the rounding left in the first mean
    dx = x - x.mean()
    dx -= dx.mean()
    dy = y - y.mean()
    dy -= dy.mean()
    sx = math.sqrt(float(np.dot(dx, dx)))
    sy = math.sqrt(float(np.dot(dy, dy)))
    if sx == 0 or sy == 0 or sx < 1e-14 * max(1.0, np.abs(x).max()) or sy < 1e-14 * max(1.0, np.abs(y).max()):
        raise UndefinedMetricError("pearson correlation of a constant series")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


@dataclass
class StructureMetrics:
    dice: float | None = None
    jaccard: float | None = None
    hd95: float | None = None
    asd: float | None = None


@dataclass
class MetricsReport:
    cs: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    structures: dict = field(default_factory=dict)
    reasons: dict = field(default_factory=dict)


@dataclass(frozen=True)
class QuantReport:
    right_lung_ml: float
    left_lung_ml: float
    air_ml: float
    occupancy: float

    def __post_init__(self):
        if min(self.right_lung_ml, self.left_lung_ml, self.air_ml) < 0:
            raise ValueError("volumes must be >= 0")
        if not 0.0 <= self.occupancy <= 1.0:
            raise ValueError("occupancy must lie in [0, 1]")

    @classmethod
    def from_volumes(cls, right_lung_ml, left_lung_ml, air_ml) -> "QuantReport":
        denom = air_ml + right_lung_ml + left_lung_ml
        occ = air_ml / denom if denom > 0 and air_ml > 0 else 0.0
        return cls(float(right_lung_ml), float(left_lung_ml), float(air_ml), float(occ))

    def to_dict(self):
        return {
            "right_lung_ml": self.right_lung_ml,
            "left_lung_ml": self.left_lung_ml,
            "air_ml": self.air_ml,
            "occupancy": self.occupancy,
        }


def quantify(seg) -> QuantReport:
    """Lung and air volumes (ml) and the air share of the pleural cavity.

    Lung volumes count parenchyma only (pneumothorax voxels removed), so the
    cavity is ``air + right + left`` without double counting.
    """
    air = seg.pneumothorax.data
    vox_ml = seg.pneumothorax.voxel_volume_mm3 / 1000.0
    right = np.count_nonzero(seg.right_lung.data & ~air) * vox_ml
    left = np.count_nonzero(seg.left_lung.data & ~air) * vox_ml
    return QuantReport.from_volumes(right, left, np.count_nonzero(air) * vox_ml)
