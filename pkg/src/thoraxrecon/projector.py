"""Posed DRR projection of a volume onto a flat detector, and its adjoint.

Geometry conventions
--------------------
World coordinates are millimetres, written ``(x, y, z)`` in pose vectors.
With the identity pose the beam travels along ``+y`` (posterior to
anterior), detector columns run along ``+x`` and detector rows along
``+z``.  The isocenter is the center of the volume grid.

A :class:`ViewPose` moves the *volume*: a point ``p`` of the unposed volume
lands at ``R (p - c) + c + t``, with ``c`` the isocenter and
``R = Rz(rz) @ Ry(ry) @ Rx(rx)`` (intrinsic z, y', x'' order).

Every detector pixel casts one ray.  Samples are spaced ``ray_step`` apart
and centered on the ray's closest approach to the isocenter; the pixel
value is ``ray_step * sum(trilinear(mu, sample))``.  Samples falling
outside the grid contribute zero.  :func:`backproject` scatters detector
values over the very same samples and weights, so it is the exact
transpose of :func:`project`.

Forward projection splits rays into fixed-size chunks that may run on
several threads; each pixel is summed sequentially, so results do not
depend on the thread count.  Back-projection runs serially.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .volume import MU_WATER, ImageGrid2D, Volume, hu_to_attenuation

__all__ = [
    "ProjectionGeometry",
    "ViewPose",
    "PerturbationSpec",
    "GeometryError",
    "RayBundle",
    "rotation_matrix",
    "standard_views",
    "sample_perturbed_pose",
    "orbit_poses",
    "ray_bundle",
    "project",
    "backproject",
    "drr_simulate",
    "normalize_image",
    "set_num_threads",
    "get_num_threads",
]

CHUNK_RAYS = 1024
_NUM_THREADS = 1


def set_num_threads(n: int) -> None:
    """Set the worker count used by :func:`project`; output is unaffected."""
    global _NUM_THREADS
    if int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _NUM_THREADS = int(n)


def get_num_threads() -> int:
    return _NUM_THREADS


class GeometryError(ValueError):
    """Raised for degenerate projection geometry."""


@dataclass(frozen=True)
class ProjectionGeometry:
    """Detector and source description.

    ``detector_pixel_spacing`` and ``ray_step`` may be left as ``None``; they
    are then derived from the volume by :meth:`resolve` (full volume extent
    inside the detector with 5% margin; half the smallest voxel spacing).
    """

    mode: str = "cone_beam"
    detector_dims: tuple[int, int] = (224, 224)
    detector_pixel_spacing: tuple[float, float] | None = None
    source_to_isocenter: float = 600.0
    source_to_detector: float = 1100.0
    ray_step: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "detector_dims", tuple(int(n) for n in self.detector_dims))
        if self.detector_pixel_spacing is not None:
            object.__setattr__(
                self, "detector_pixel_spacing", tuple(float(s) for s in self.detector_pixel_spacing)
            )
        self.validate()

    def validate(self):
        if self.mode not in ("parallel", "cone_beam"):
            raise GeometryError(f"mode must be 'parallel' or 'cone_beam', got {self.mode!r}")
        if len(self.detector_dims) != 2 or min(self.detector_dims) < 1:
            raise GeometryError(f"detector_dims must be two integers >= 1, got {self.detector_dims}")
        if self.detector_pixel_spacing is not None:
            sp = self.detector_pixel_spacing
            if len(sp) != 2 or not all(math.isfinite(s) and s > 0 for s in sp):
                raise GeometryError(f"detector_pixel_spacing must be positive, got {sp}")
        if self.ray_step is not None and not (math.isfinite(self.ray_step) and self.ray_step > 0):
            raise GeometryError(f"ray_step must be positive, got {self.ray_step}")
        if self.mode == "cone_beam" and not (0 < self.source_to_isocenter < self.source_to_detector):
            raise GeometryError(
                "cone_beam requires 0 < source_to_isocenter < source_to_detector, got "
                f"{self.source_to_isocenter}, {self.source_to_detector}"
            )

    def resolve(self, dims, spacing) -> "ProjectionGeometry":
        """Fill in defaults that depend on the volume grid."""
        step = self.ray_step
        if step is None:
            step = 0.5 * min(spacing)
        px = self.detector_pixel_spacing
        if px is None:
            diameter = float(np.linalg.norm(np.asarray(dims) * np.asarray(spacing)))
            mag = 1.0
            if self.mode == "cone_beam":
                near = self.source_to_isocenter - 0.5 * diameter
                if near <= 0:
                    raise GeometryError("volume reaches the source; increase source_to_isocenter")
                mag = self.source_to_detector / near
            px = tuple(1.05 * diameter * mag / n for n in self.detector_dims)
        return replace(self, detector_pixel_spacing=px, ray_step=step)


@dataclass(frozen=True)
class ViewPose:
    """Rigid volume motion: rotation (rx, ry, rz) rad, translation (tx, ty, tz) mm."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotation)
        tr = tuple(float(a) for a in self.translation)
        if len(rot) != 3 or len(tr) != 3:
            raise ValueError("rotation and translation need 3 components each")
        if not all(math.isfinite(a) for a in rot + tr):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    def as_list(self) -> list[float]:
        return list(self.rotation) + list(self.translation)


@dataclass(frozen=True)
class PerturbationSpec:
    rotation_range: tuple[float, float, float] = (math.radians(5.0),) * 3
    translation_range: tuple[float, float, float] = (10.0, 10.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        rr = tuple(float(a) for a in np.broadcast_to(self.rotation_range, 3))
        tr = tuple(float(a) for a in np.broadcast_to(self.translation_range, 3))
        if min(rr + tr) < 0:
            raise ValueError("perturbation ranges must be >= 0")
        object.__setattr__(self, "rotation_range", rr)
        object.__setattr__(self, "translation_range", tr)
        object.__setattr__(self, "seed", int(self.seed) & (2**64 - 1))


def _snap(m):
    # exact zeros/ones for quarter-turn rotations keep axis-aligned rays axis-aligned
    r = np.round(m)
    return np.where(np.abs(m - r) < 1e-14, r, m)


def rotation_matrix(pose: ViewPose) -> np.ndarray:
    rx, ry, rz = pose.rotation
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return _snap(_snap(Rz @ Ry) @ _snap(Rx))


def standard_views() -> tuple[ViewPose, ViewPose, ViewPose]:
    """Posteroanterior, lateral and axial poses.

    PA keeps the beam along y (anterior-posterior), LA turns the volume a
    quarter turn about the vertical z axis so the beam runs along x, and AX
    tips it a quarter turn about x so the beam runs along z.
    """
    half = math.pi / 2
    return (
        ViewPose((0.0, 0.0, 0.0)),
        ViewPose((0.0, 0.0, half)),
        ViewPose((half, 0.0, 0.0)),
    )


def orbit_poses(n_views: int, arc: float = math.pi, axis: str = "z") -> list[ViewPose]:
    """``n_views`` poses evenly spaced over ``arc`` radians about one axis."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    slot = "xyz".index(axis)
    poses = []
    for i in range(n_views):
        rot = [0.0, 0.0, 0.0]
        rot[slot] = arc * i / n_views
        poses.append(ViewPose(tuple(rot)))
    return poses


def sample_perturbed_pose(base: ViewPose, spec: PerturbationSpec, draw_index: int) -> ViewPose:
    """Jitter ``base`` by uniform offsets in ``±range`` per component.

    Offsets come from the Philox-4x64 counter-based generator keyed by
    ``spec.seed`` with the counter's second word set to ``draw_index``; the
    six raw 64-bit outputs become uniforms in [0, 1) via their top 53 bits.
    The result is a pure function of (seed, draw_index).
    """
    bitgen = np.random.Philox(counter=[0, int(draw_index) & (2**64 - 1), 0, 0], key=spec.seed)
    raw = bitgen.random_raw(6)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
    offsets = (2.0 * u - 1.0) * np.array(spec.rotation_range + spec.translation_range)
    rot = tuple(b + (o if r > 0 else 0.0) for b, o, r in zip(base.rotation, offsets[:3], spec.rotation_range))
    tr = tuple(b + (o if r > 0 else 0.0) for b, o, r in zip(base.translation, offsets[3:], spec.translation_range))
    return ViewPose(rot, tr)


@dataclass(frozen=True)
class RayBundle:
    """Sample-point description of every detector ray in voxel-index space."""

    starts: np.ndarray  # (n_rays, 3) index coords (z, y, x) of sample k = 0
    steps: np.ndarray  # (n_rays, 3) index-space increment per sample
    k0: np.ndarray  # first sample index that can touch the grid
    k1: np.ndarray  # one past the last such sample
    ray_step: float
    detector_dims: tuple[int, int]
    detector_pixel_spacing: tuple[float, float]
    volume_dims: tuple[int, int, int]

    @property
    def n_samples(self) -> int:
        return int(np.sum(self.k1 - self.k0))


def ray_bundle(geometry: ProjectionGeometry, pose: ViewPose, dims, spacing, origin) -> RayBundle:
    """Compute ray sample layout for one view of a grid."""
    geometry.validate()
    dims = tuple(int(n) for n in dims)
    g = geometry.resolve(dims, spacing)
    spacing_xyz = np.asarray(spacing, dtype=float)[::-1]
    origin_xyz = np.asarray(origin, dtype=float)[::-1]
    dims_xyz = np.asarray(dims, dtype=float)[::-1]
    center = origin_xyz + 0.5 * (dims_xyz - 1) * spacing_xyz

    rows, cols = g.detector_dims
    pr, pc = g.detector_pixel_spacing
    v = (np.arange(rows) - 0.5 * (rows - 1)) * pr
    u = (np.arange(cols) - 0.5 * (cols - 1)) * pc
    vv, uu = np.meshgrid(v, u, indexing="ij")
    uu = uu.ravel()
    vv = vv.ravel()
    n_rays = uu.size

    e_u = np.array([1.0, 0.0, 0.0])
    e_b = np.array([0.0, 1.0, 0.0])
    e_v = np.array([0.0, 0.0, 1.0])
    if g.mode == "parallel":
        base = center + uu[:, None] * e_u + vv[:, None] * e_v
        direction = np.broadcast_to(e_b, (n_rays, 3))
        t_mid = np.zeros(n_rays)
    else:
        source = center - g.source_to_isocenter * e_b
        pix = center + (g.source_to_detector - g.source_to_isocenter) * e_b + uu[:, None] * e_u + vv[:, None] * e_v
        direction = pix - source
        direction = direction / np.linalg.norm(direction, axis=1, keepdims=True)
        base = np.broadcast_to(source, (n_rays, 3))
        t_mid = direction @ (center - source)

    translation = np.asarray(pose.translation)
    radius = 0.5 * float(np.linalg.norm(dims_xyz * spacing_xyz)) + float(np.linalg.norm(translation))
    h = float(g.ray_step)
    n = int(math.ceil(2.0 * radius / h)) + 1
    t0 = t_mid - 0.5 * (n - 1) * h

    R = rotation_matrix(pose)
    first = base + t0[:, None] * direction
    # world -> unposed volume frame -> continuous voxel index
    start_xyz = ((first - center - translation) @ R + center - origin_xyz) / spacing_xyz
    step_xyz = (h * direction) @ R / spacing_xyz
    starts = np.ascontiguousarray(start_xyz[:, ::-1])
    steps = np.ascontiguousarray(step_xyz[:, ::-1])

    k0, k1 = _clip_to_grid(starts, steps, np.asarray(dims, dtype=float), n)
    return RayBundle(starts, steps, k0, k1, h, g.detector_dims, g.detector_pixel_spacing, dims)


def _clip_to_grid(starts, steps, dims, n):
    """Conservative sample-index range whose trilinear support meets the grid."""
    lo = np.zeros(starts.shape[0])
    hi = np.full(starts.shape[0], float(n))
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            s, d = starts[:, a], steps[:, a]
            flat = np.abs(d) < 1e-12
            ta = (-1.0 - s) / d
            tb = (dims[a] - s) / d
            amin = np.where(flat, -np.inf, np.minimum(ta, tb))
            amax = np.where(flat, np.inf, np.maximum(ta, tb))
            outside = flat & ((s <= -1.0) | (s >= dims[a]))
            amin = np.where(outside, np.inf, amin)
            lo = np.maximum(lo, amin)
            hi = np.minimum(hi, amax)
    k0 = np.clip(np.floor(lo) - 1, 0, n).astype(np.int64)
    k1 = np.clip(np.ceil(hi) + 2, 0, n).astype(np.int64)
    k1 = np.maximum(k1, k0)
    return k0, k1


def _forward(data, bundle: RayBundle) -> np.ndarray:
    vol = np.ascontiguousarray(data, dtype=np.float64)
    n_rays = bundle.starts.shape[0]
    out = np.empty(n_rays)

    def run(lo):
        hi = min(lo + CHUNK_RAYS, n_rays)
        _kernels.forward_rays(vol, bundle.starts[lo:hi], bundle.steps[lo:hi], bundle.k0[lo:hi], bundle.k1[lo:hi], out[lo:hi])

    chunks = range(0, n_rays, CHUNK_RAYS)
    if _NUM_THREADS > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=_NUM_THREADS) as pool:
            list(pool.map(run, chunks))
    else:
        for lo in chunks:
            run(lo)
    out *= bundle.ray_step
    return out.reshape(bundle.detector_dims)


def _adjoint(values, bundle: RayBundle) -> np.ndarray:
    vals = np.ascontiguousarray(values, dtype=np.float64).ravel() * bundle.ray_step
    out = np.zeros(bundle.volume_dims)
    _kernels.adjoint_rays(vals, bundle.starts, bundle.steps, bundle.k0, bundle.k1, out)
    return out


def project(v: Volume, g: ProjectionGeometry, pose: ViewPose = ViewPose()) -> ImageGrid2D:
    """Line integrals of ``v`` (attenuation, 1/mm) along every detector ray."""
    bundle = ray_bundle(g, pose, v.dims, v.spacing, v.origin)
    return ImageGrid2D(_forward(v.data, bundle), bundle.detector_pixel_spacing)


def backproject(img: ImageGrid2D, g: ProjectionGeometry, pose: ViewPose, target_dims, target_spacing, target_origin) -> Volume:
    """Transpose of :func:`project` for the same geometry, pose and grid."""
    g.validate()
    if tuple(img.dims) != tuple(g.detector_dims):
        raise ValueError(f"image dims {img.dims} do not match detector dims {g.detector_dims}")
    bundle = ray_bundle(g, pose, target_dims, target_spacing, target_origin)
    return Volume(_adjoint(img.data, bundle), target_spacing, target_origin)


def normalize_image(data: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros with a warning."""
    lo, hi = float(np.min(data)), float(np.max(data))
    if hi - lo <= 0.0:
        warnings.warn("constant DRR image; normalized output set to zero", RuntimeWarning, stacklevel=2)
        return np.zeros_like(data, dtype=np.float64)
    return (data - lo) / (hi - lo)


def drr_simulate(ct: Volume, g: ProjectionGeometry, radiographic: bool = False, mu_water: float = MU_WATER) -> tuple[ImageGrid2D, ImageGrid2D]:
    """Posteroanterior and lateral DRRs of a CT in HU, each scaled to [0, 1].

    With ``radiographic=True`` the transmitted intensity ``exp(-integral)``
    is normalized instead of the raw line integral.
    """
    mu = hu_to_attenuation(ct, mu_water)
    pa_pose, la_pose, _ = standard_views()
    images = []
    for pose in (pa_pose, la_pose):
        img = project(mu, g, pose)
        data = np.exp(-img.data) if radiographic else img.data
        images.append(ImageGrid2D(normalize_image(data), img.spacing))
    return images[0], images[1]
