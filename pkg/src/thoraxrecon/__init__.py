"""DRR projection, iterative reconstruction, pneumothorax segmentation and
evaluation metrics for chest CT volumes."""

from .volume import (
    ImageGrid2D,
    Mask,
    Volume,
    hu_to_attenuation,
    load_volume,
    resample_trilinear,
    save_volume,
)
from .projector import (
    PerturbationSpec,
    ProjectionGeometry,
    ViewPose,
    backproject,
    drr_simulate,
    project,
    sample_perturbed_pose,
    standard_views,
)
from .ptxseg import SegParams, SegResult, run_ptx_seg
from .metrics import QuantReport, quantify
from .recon import Objective, OptSettings, drr_loss, objective_gradient, recon_loss, reconstruct_iterative

__version__ = "0.1.0"

__all__ = [
    "ImageGrid2D",
    "Mask",
    "Volume",
    "hu_to_attenuation",
    "load_volume",
    "resample_trilinear",
    "save_volume",
    "PerturbationSpec",
    "ProjectionGeometry",
    "ViewPose",
    "backproject",
    "drr_simulate",
    "project",
    "sample_perturbed_pose",
    "standard_views",
    "SegParams",
    "SegResult",
    "run_ptx_seg",
    "QuantReport",
    "quantify",
    "Objective",
    "OptSettings",
    "drr_loss",
    "objective_gradient",
    "recon_loss",
    "reconstruct_iterative",
]
