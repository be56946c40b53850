"""Synthetic chest phantoms with analytic ground truth.

All geometric parameters are in millimetres and ordered (z, y, x) like the
array axes.  The grid is centered on the world origin.  The right lung sits
at negative x (smaller x index, patient right).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from .volume import Volume

__all__ = [
    "PhantomSpec",
    "Phantom",
    "make_chest_phantom",
    "two_ellipsoid_phantom",
    "ellipsoid_cap_volume",
    "ellipsoid_surface_area",
]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (112, 112, 112)
    spacing: tuple[float, float, float] = (1.6, 1.6, 1.6)
    body_semi_axes: tuple[float, float, float] = (80.0, 62.0, 80.0)
    body_hu: float = 0.0
    air_hu: float = -1000.0
    lung_semi_axes: tuple[float, float, float] = (55.0, 38.0, 26.0)
    lung_offset_x: float = 36.0
    lung_hu: float = -800.0
    cap_ml: float = 0.0
    cap_hu: float = -1000.0
    pocket_ml: float = 0.0
    pocket_hu: float = -1000.0
    decoy_ml: float = 0.0
    decoy_hu: float = -940.0
    noise_hu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        for name in ("spacing", "body_semi_axes", "lung_semi_axes"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ValueError("dims and spacing must be positive")
        if min(self.cap_ml, self.pocket_ml, self.decoy_ml, self.noise_hu) < 0:
            raise ValueError("volumes and noise level must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Phantom:
    ct: Volume
    masks: dict = field(default_factory=dict)
    analytic_ml: dict = field(default_factory=dict)


def ellipsoid_cap_volume(semi_axes, height: float) -> float:
    """Volume (mm^3) of the slab of an ellipsoid within ``height`` of its +z pole."""
    c, b, a = semi_axes
    h = min(max(height, 0.0), 2 * c)
    return math.pi * a * b * h * h * (3 * c - h) / (3 * c * c)


def ellipsoid_surface_area(semi_axes) -> float:
    # Knud Thomsen's approximation, relative error < 1.1%
    a, b, c = semi_axes
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def _grid(dims, spacing):
    axes = [(np.arange(n) - 0.5 * (n - 1)) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(grid, center, semi_axes):
    z, y, x = grid
    return (
        ((z - center[0]) / semi_axes[0]) ** 2
        + ((y - center[1]) / semi_axes[1]) ** 2
        + ((x - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def _sphere_radius(ml):
    return (3.0 * ml * 1000.0 / (4.0 * math.pi)) ** (1.0 / 3.0)


def make_chest_phantom(spec: PhantomSpec = PhantomSpec()) -> Phantom:
    """Body ellipsoid in air holding two lung ellipsoids.

    Optional features: an apical air cap of ``cap_ml`` cut from the right
    lung by a plane normal to z, a spherical ``pocket_ml`` air pocket in the
    left lung, and a spherical ``decoy_ml`` region at ``decoy_hu`` in the
    left lung.
    """
    grid = _grid(spec.dims, spec.spacing)
    z = grid[0]
    body = _ellipsoid(grid, (0.0, 0.0, 0.0), spec.body_semi_axes)
    lz, ly, lx = spec.lung_semi_axes
    right_c = (0.0, 0.0, -spec.lung_offset_x)
    left_c = (0.0, 0.0, spec.lung_offset_x)
    right = _ellipsoid(grid, right_c, spec.lung_semi_axes) & body
    left = _ellipsoid(grid, left_c, spec.lung_semi_axes) & body

    data = np.full(spec.dims, spec.air_hu)
    data[body] = spec.body_hu
    data[right | left] = spec.lung_hu

    lung_ml = 4.0 / 3.0 * math.pi * lz * ly * lx / 1000.0
    cap = np.zeros(spec.dims, dtype=bool)
    cap_ml = 0.0
    if spec.cap_ml > 0:
        target = spec.cap_ml * 1000.0
        if target >= 4.0 / 3.0 * math.pi * lz * ly * lx:
            raise ValueError("cap volume exceeds lung volume")
        h = brentq(lambda t: ellipsoid_cap_volume(spec.lung_semi_axes, t) - target, 0.0, 2 * lz, xtol=1e-12)
        cap = right & (z - right_c[0] > lz - h)
        cap_ml = spec.cap_ml
        data[cap] = spec.cap_hu

    pocket = np.zeros(spec.dims, dtype=bool)
    if spec.pocket_ml > 0:
        r = _sphere_radius(spec.pocket_ml)
        pc = (0.35 * lz, 0.0, spec.lung_offset_x)
        pocket = _ellipsoid(grid, pc, (r, r, r)) & left
        data[pocket] = spec.pocket_hu

    decoy = np.zeros(spec.dims, dtype=bool)
    if spec.decoy_ml > 0:
        r = _sphere_radius(spec.decoy_ml)
        dc = (-0.35 * lz, 0.0, spec.lung_offset_x)
        decoy = _ellipsoid(grid, dc, (r, r, r)) & left & ~pocket
        data[decoy] = spec.decoy_hu

    if spec.noise_hu > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_hu, size=spec.dims)

    origin = tuple(-0.5 * (n - 1) * s for n, s in zip(spec.dims, spec.spacing))
    ct = Volume(data, spec.spacing, origin)
    air = cap | (pocket if spec.pocket_hu < -950 else np.zeros_like(pocket))
    masks = {
        "body": ct.mask(body),
        "lungs": ct.mask(right | left),
        "right_lung": ct.mask(right & ~cap),
        "left_lung": ct.mask(left & ~air),
        "air": ct.mask(air),
        "decoy": ct.mask(decoy),
    }
    analytic = {
        "right_lung_ml": lung_ml - cap_ml,
        "left_lung_ml": lung_ml - (spec.pocket_ml if spec.pocket_hu < -950 else 0.0),
        "air_ml": cap_ml + (spec.pocket_ml if spec.pocket_hu < -950 else 0.0),
        "cap_ml": cap_ml,
        "pocket_ml": spec.pocket_ml,
        "decoy_ml": spec.decoy_ml,
        "lung_ellipsoid_ml": lung_ml,
    }
    return Phantom(ct=ct, masks=masks, analytic_ml=analytic)


def two_ellipsoid_phantom(n: int = 32, spacing: float = 1.0, mu: tuple[float, float] = (0.02, 0.015)) -> Volume:
    """Attenuation phantom (1/mm): two overlapping ellipsoids, additive values."""
    dims = (n, n, n)
    grid = _grid(dims, (spacing,) * 3)
    half = 0.5 * n * spacing
    outer = _ellipsoid(grid, (0.0, 0.0, -0.12 * half), (0.7 * half, 0.55 * half, 0.5 * half))
    inner = _ellipsoid(grid, (0.1 * half, 0.05 * half, 0.3 * half), (0.35 * half, 0.3 * half, 0.35 * half))
    data = mu[0] * outer + mu[1] * inner
    origin = tuple(-0.5 * (n - 1) * spacing for _ in range(3))
    return Volume(data, (spacing,) * 3, origin)
