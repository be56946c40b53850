"""Volume and projection losses, their gradients, and a descent baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .projector import (
    ProjectionGeometry,
    _adjoint,
    _forward,
    project,
    ray_bundle,
    standard_views,
)
from .volume import MU_WATER, Volume, hu_to_attenuation

__all__ = [
    "recon_loss",
    "drr_loss",
    "Objective",
    "OptSettings",
    "DivergenceError",
    "objective_gradient",
    "estimate_lipschitz",
    "reconstruct_iterative",
    "relative_error",
]

log = logging.getLogger(__name__)

NORMS = ("l2", "l1_smooth", "l1")


def recon_loss(v: Volume, y: Volume) -> float:
    """Per-voxel mean squared difference."""
    if v.dims != y.dims:
        raise ValueError(f"dimension mismatch: {v.dims} vs {y.dims}")
    return float(np.mean((v.data - y.data) ** 2))


def drr_loss(v: Volume, y: Volume, g: ProjectionGeometry, poses=None, mu_water: float = MU_WATER) -> float:
    """Mean absolute projection difference averaged over views.

    Both volumes are in HU and are converted to attenuation first.  With the
    default ``poses`` the three orthogonal standard views are used.
    """
    if v.dims != y.dims:
        raise ValueError(f"dimension mismatch: {v.dims} vs {y.dims}")
    poses = list(standard_views() if poses is None else poses)
    mv, my = hu_to_attenuation(v, mu_water), hu_to_attenuation(y, mu_water)
    total = 0.0
    for pose in poses:
        total += float(np.mean(np.abs(project(mv, g, pose).data - project(my, g, pose).data)))
    return total / len(poses)


def _penalty(r, norm, delta):
    if norm == "l2":
        return r * r, 2.0 * r
    if norm == "l1":
        return np.abs(r), np.sign(r)
    a = np.abs(r)
    quad = a <= delta
    value = np.where(quad, r * r / (2.0 * delta), a - 0.5 * delta)
    deriv = np.where(quad, r / delta, np.sign(r))
    return value, deriv


@dataclass
class Objective:
    """Projection-domain data term plus an optional volume-domain term.

    ``value = mean_views(mean_pixels(phi(P v - b))) + lambda_re * mean((v - y)^2)``
    with ``phi`` the squared residual (``l2``), the Huber function of width
    ``delta`` (``l1_smooth``) or the absolute residual (``l1``, sign
    subgradient).  Volumes are in attenuation units; the data term is linear
    in ``v`` before ``phi``.
    """

    references: list  # [(ImageGrid2D, ViewPose), ...]
    geometry: ProjectionGeometry
    norm: str = "l2"
    delta: float = 1e-3
    volume_reference: Volume | None = None
    lambda_re: float = 0.0
    _bundles: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.references = list(self.references)
        if not self.references:
            raise ValueError("objective needs at least one view")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.norm == "l1_smooth" and not self.delta > 0:
            raise ValueError("delta must be positive for l1_smooth")
        if self.lambda_re < 0:
            raise ValueError("lambda_re must be >= 0")
        self.geometry.validate()

    @classmethod
    def from_volume(cls, reference: Volume, geometry: ProjectionGeometry, poses, **kwargs) -> "Objective":
        refs = [(project(reference, geometry, p), p) for p in poses]
        return cls(refs, geometry, **kwargs)

    def bundles(self, v: Volume):
        key = (v.dims, v.spacing, v.origin)
        if key not in self._bundles:
            self._bundles = {
                key: [ray_bundle(self.geometry, pose, v.dims, v.spacing, v.origin) for _, pose in self.references]
            }
        return self._bundles[key]

    def evaluate(self, v: Volume, gradient: bool = True):
        """Return ``(value, grad_array or None)``."""
        bundles = self.bundles(v)
        n_views = len(self.references)
        value = 0.0
        grad = np.zeros(v.dims) if gradient else None
        for (img, _), bundle in zip(self.references, bundles):
            if img.dims != bundle.detector_dims:
                raise ValueError("reference image dims differ from the detector")
            r = _forward(v.data, bundle) - img.data
            phi, dphi = _penalty(r, self.norm, self.delta)
            value += float(np.mean(phi)) / n_views
            if gradient:
                grad += _adjoint(dphi / (r.size * n_views), bundle)
        if self.volume_reference is not None and self.lambda_re > 0:
            diff = v.data - self.volume_reference.data
            value += self.lambda_re * float(np.mean(diff * diff))
            if gradient:
                grad += self.lambda_re * 2.0 * diff / diff.size
        return value, grad

    def curvature(self) -> float:
        """Upper bound on the second derivative of ``phi``."""
        return {"l2": 2.0, "l1_smooth": 1.0 / self.delta, "l1": 1.0 / self.delta}[self.norm]


def objective_gradient(v: Volume, obj: Objective) -> tuple[float, Volume]:
    value, grad = obj.evaluate(v, gradient=True)
    return value, v.with_data(grad)


def estimate_lipschitz(obj: Objective, like: Volume, iterations: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of the gradient's Lipschitz constant."""
    bundles = obj.bundles(like)
    n_views = len(bundles)
    c = obj.curvature()
    x = np.random.default_rng(seed).random(like.dims)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iterations):
        y = np.zeros(like.dims)
        for b in bundles:
            n_pix = b.detector_dims[0] * b.detector_dims[1]
            y += _adjoint(_forward(x, b), b) * (c / (n_pix * n_views))
        if obj.volume_reference is not None and obj.lambda_re > 0:
            y += obj.lambda_re * 2.0 * x / x.size
        lam = float(np.linalg.norm(y))
        if lam == 0:
            return 0.0
        x = y / lam
    return lam * 1.05


class DivergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class OptSettings:
    """``step=None`` picks ``step_scale / L`` from a power-iteration estimate."""

    step: float | None = None
    step_scale: float = 1.0
    iterations: int = 200
    clamp_nonnegative: bool = True
    tolerance: float = 0.0
    log_every: int = 0
    max_halvings: int = 60

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")


def reconstruct_iterative(obj: Objective, init: Volume, settings: OptSettings = OptSettings()):
    """Projected gradient descent with step halving.

    Returns ``(volume, trace)`` where ``trace`` is a list of
    ``(iteration, objective, step)`` tuples starting at iteration 0.  A step
    that would raise the objective is halved until it does not, so the
    trace never increases.
    """
    x = np.array(init.data, dtype=np.float64)
    if settings.clamp_nonnegative:
        x = np.maximum(x, 0.0)
    v = init.with_data(x)
    f, g = obj.evaluate(v)
    trace = [(0, f, 0.0)]
    if not math.isfinite(f):
        raise DivergenceError("initial objective is not finite", trace)
    step = settings.step
    if step is None:
        lip = estimate_lipschitz(obj, v)
        step = settings.step_scale / lip if lip > 0 else 1.0
    for it in range(1, settings.iterations + 1):
        halvings = 0
        while True:
            cand = x - step * g
            if settings.clamp_nonnegative:
                np.maximum(cand, 0.0, out=cand)
            fc, gc = obj.evaluate(init.with_data(cand))
            if not math.isfinite(fc):
                if halvings >= settings.max_halvings:
                    raise DivergenceError(f"objective became non-finite at iteration {it}", trace)
            elif fc <= f:
                break
            step *= 0.5
            halvings += 1
            if halvings > settings.max_halvings:
                log.info("no descent after %d halvings; stopping at iteration %d", halvings, it)
                return init.with_data(x), trace
        decrease = (f - fc) / f if f > 0 else 0.0
        x, f, g = cand, fc, gc
        trace.append((it, f, step))
        if settings.log_every and it % settings.log_every == 0:
            log.info("iteration %d objective %.6g step %.3g", it, f, step)
        if f == 0.0 or decrease < settings.tolerance:
            break
    return init.with_data(x), trace


def relative_error(v: Volume, ref: Volume) -> float:
    denom = np.linalg.norm(ref.data)
    if denom == 0:
        raise ValueError("reference volume has zero norm")
    return float(np.linalg.norm(v.data - ref.data) / denom)
