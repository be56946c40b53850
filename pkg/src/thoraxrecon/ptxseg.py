"""Zero-shot pneumothorax segmentation.

Lung masks from any external segmenter are merged by union and closed; the
body is recovered by flooding the background from two opposite grid
corners; the pneumothorax is the air (below ``air_hu``) inside lungs and
body, closed and filtered by a minimum component volume.

Threshold senses used at each step:

* body:        ``HU >= t_b``
* candidate:   ``HU <  t_p`` inside lungs and body
* air:         ``HU <  air_hu``
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .morphology import label_components, measure_components, morph_close_3d, region_grow
from .volume import Mask, Volume

__all__ = [
    "SegParams",
    "SegResult",
    "SegmentationError",
    "CornerSeedError",
    "threshold",
    "ensemble_lungs",
    "body_mask",
    "classical_lung_segment",
    "split_lungs",
    "run_ptx_seg",
]


class SegmentationError(ValueError):
    pass


class CornerSeedError(SegmentationError):
    """A grid corner lies inside the coarse body mask."""


@dataclass(frozen=True)
class SegParams:
    t_b: float = -400.0
    t_p: float = -500.0
    air_hu: float = -950.0
    k_l: int = 2
    k_b: int = 6
    k_p: int = 2
    grow_connectivity: int = 6
    label_connectivity: int = 26
    v_t: float = 10.0

    def __post_init__(self):
        for name in ("k_l", "k_b", "k_p"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        if self.v_t < 0:
            raise ValueError("v_t must be >= 0")
        if not self.air_hu < self.t_b:
            raise ValueError("air_hu must be below t_b")
        for name in ("grow_connectivity", "label_connectivity"):
            if getattr(self, name) not in (6, 18, 26):
                raise ValueError(f"{name} must be 6, 18 or 26")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SegResult:
    lungs: Mask
    body: Mask
    pneumothorax: Mask
    right_lung: Mask
    left_lung: Mask

    def items(self):
        return (
            ("lungs", self.lungs),
            ("body", self.body),
            ("pneumothorax", self.pneumothorax),
            ("right_lung", self.right_lung),
            ("left_lung", self.left_lung),
        )


def threshold(v: Volume, t: float, sense: str = "above_or_equal") -> Mask:
    if sense == "above_or_equal":
        return v.mask(v.data >= t)
    if sense == "below":
        return v.mask(v.data < t)
    raise ValueError(f"sense must be 'below' or 'above_or_equal', got {sense!r}")


def ensemble_lungs(masks, k_l: int = 2) -> Mask:
    """Voxelwise union of lung masks followed by a closing of radius ``k_l``."""
    masks = list(masks)
    if not masks:
        raise SegmentationError("at least one lung mask is required")
    ref = masks[0]
    union = np.zeros(ref.dims, dtype=bool)
    for m in masks:
        if not m.same_geometry(ref):
            raise SegmentationError("lung masks do not share one geometry")
        union |= m.data
    return morph_close_3d(ref.with_data(union), k_l)


def body_mask(ct: Volume, params: SegParams = SegParams()) -> Mask:
    coarse = morph_close_3d(threshold(ct, params.t_b, "above_or_equal"), params.k_b)
    corners = [(0, 0, 0), tuple(n - 1 for n in ct.dims)]
    outside = np.zeros(ct.dims, dtype=bool)
    for seed in corners:
        if coarse.data[seed]:
            raise CornerSeedError(f"corner voxel {seed} lies inside the coarse body mask")
        outside |= region_grow(coarse, seed, params.grow_connectivity).data
    return ct.mask(~outside)


def classical_lung_segment(ct: Volume, params: SegParams = SegParams(), body: Mask | None = None) -> Mask:
    """Intensity-only lung and air-space proposal.

    Low-attenuation voxels inside the body, largest two components, closed
    with ``k_l``.  Used when no external lung masks are supplied.
    """
    if body is None:
        body = body_mask(ct, params)
    low = ct.mask((ct.data < params.t_b) & body.data)
    labels, counts = label_components(low, params.label_connectivity)
    if counts.size <= 1:
        return low
    order = np.argsort(-counts[1:], kind="stable")[:2] + 1
    return morph_close_3d(low.with_data(np.isin(labels, order)), params.k_l)


def split_lungs(lungs: Mask, connectivity: int = 26) -> tuple[Mask, Mask]:
    """Split into (right, left).  Patient right is the smaller x index."""
    if lungs.count == 0:
        return Mask.empty_like(lungs), Mask.empty_like(lungs)
    labels, counts = label_components(lungs, connectivity)
    x = np.arange(lungs.dims[2])
    if counts.size - 1 >= 2:
        xsum = np.bincount(labels.ravel(), weights=np.broadcast_to(x, lungs.dims).ravel(), minlength=counts.size)
        cx = xsum[1:] / counts[1:]
        a, b = np.argsort(-counts[1:], kind="stable")[:2]
        boundary = 0.5 * (cx[a] + cx[b])
        # smaller components follow whichever side of the midpoint holds their centroid
        right_labels = np.flatnonzero(cx < boundary) + 1
        if cx[a] == cx[b]:
            right_labels = np.array([a + 1])
        right = np.isin(labels, right_labels) & lungs.data
    else:
        cx = np.nonzero(lungs.data)[2].mean()
        right = lungs.data & (x[None, None, :] < cx)
    return lungs.with_data(right), lungs.with_data(lungs.data & ~right)


def run_ptx_seg(ct: Volume, lung_masks=None, params: SegParams = SegParams()) -> SegResult:
    """Segment lungs, body and pneumothorax air from a CT in HU."""
    body = body_mask(ct, params)
    if lung_masks:
        for m in lung_masks:
            if not m.same_geometry(ct):
                raise SegmentationError("lung mask geometry differs from the CT")
        lungs = ensemble_lungs(lung_masks, params.k_l)
    else:
        lungs = classical_lung_segment(ct, params, body)

    candidate = lungs.data & body.data & (ct.data < params.t_p)
    air = ct.data < params.air_hu
    closed = morph_close_3d(ct.mask(candidate & air), params.k_p).data
    # closing may reach non-air or out-of-body voxels; re-restrict before sizing
    refined = ct.mask(closed & air & body.data)
    pneumothorax = measure_components(refined, params.label_connectivity, params.v_t)

    right, left = split_lungs(lungs, params.label_connectivity)
    return SegResult(lungs=lungs, body=body, pneumothorax=pneumothorax, right_lung=right, left_lung=left)
