"""Binary 3D morphology, region growing and component filtering."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import Mask

__all__ = [
    "connectivity_structure",
    "ball",
    "dilate",
    "erode",
    "morph_close_3d",
    "region_grow",
    "label_components",
    "measure_components",
]

_RANK = {6: 1, 18: 2, 26: 3}


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


def ball(radius: int) -> np.ndarray:
    """Discrete sphere ``{o : |o|^2 <= radius^2}`` in voxel units."""
    r = int(radius)
    g = np.arange(-r, r + 1)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    return zz**2 + yy**2 + xx**2 <= r * r


def _dilate_array(a, r):
    # Euclidean distance to the set, compared on squared integers
    if not a.any():
        return np.zeros_like(a)
    d2 = ndimage.distance_transform_edt(~a, return_distances=True) ** 2
    return d2 <= r * r + 1e-6


def _erode_array(a, r):
    if a.all():
        return a.copy()
    d2 = ndimage.distance_transform_edt(a, return_distances=True) ** 2
    return d2 > r * r + 1e-6


def dilate(m: Mask, radius: int) -> Mask:
    return m.with_data(_dilate_array(m.data, int(radius)))


def erode(m: Mask, radius: int) -> Mask:
    """Erosion treating voxels outside the grid as foreground."""
    r = int(radius)
    padded = np.pad(m.data, r, constant_values=True)
    core = _erode_array(padded, r)
    return m.with_data(core[r:-r, r:-r, r:-r] if r else core)


def morph_close_3d(m: Mask, radius: int) -> Mask:
    """Closing (dilation then erosion) with a spherical structuring element.

    The grid is zero-padded by ``radius`` first so the result is extensive
    and idempotent right up to the volume boundary.
    """
    r = int(radius)
    if r < 0:
        raise ValueError("radius must be >= 0")
    if r == 0 or not m.data.any():
        return m
    padded = np.pad(m.data, r, constant_values=False)
    closed = _erode_array(_dilate_array(padded, r), r)
    return m.with_data(closed[r:-r, r:-r, r:-r])


def region_grow(m: Mask, seed, connectivity: int = 6) -> Mask:
    """Connected component of voxels sharing the seed's value."""
    seed = tuple(int(i) for i in seed)
    if len(seed) != 3 or any(i < 0 or i >= n for i, n in zip(seed, m.dims)):
        raise IndexError(f"seed {seed} outside grid {m.dims}")
    same = m.data == m.data[seed]
    labels, _ = ndimage.label(same, structure=connectivity_structure(connectivity))
    return m.with_data(labels == labels[seed])


def label_components(m: Mask, connectivity: int = 26):
    """Label array and per-label voxel counts (index 0 is background)."""
    labels, n = ndimage.label(m.data, structure=connectivity_structure(connectivity))
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    return labels, counts


def measure_components(m: Mask, connectivity: int = 26, v_t: float = 10.0) -> Mask:
    """Keep components whose physical volume strictly exceeds ``v_t`` ml."""
    if v_t < 0:
        raise ValueError("v_t must be >= 0")
    labels, counts = label_components(m, connectivity)
    ml = counts * m.voxel_volume_mm3 / 1000.0
    keep = ml > v_t
    keep[0] = False
    return m.with_data(keep[labels])
