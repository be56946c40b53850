"""Command-line front end.

Subcommands: phantom, drr, segment, quantify, reconstruct, evaluate,
compare-cohort.  Every command takes the same flags (``--config``,
``--set``, ``--output-dir``, ``--case-id``, ``--threads``, ``--seed``) and
writes JSON reports carrying ``schema_version``.

Exit codes: 0 success, 1 unexpected failure, 2 bad config or missing input,
3 degenerate data (e.g. a scan whose corners lie inside the body),
4 reconstruction diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import metrics, plotting
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config
from .phantom import make_chest_phantom, two_ellipsoid_phantom
from .projector import (
    ViewPose,
    drr_simulate,
    orbit_poses,
    sample_perturbed_pose,
    set_num_threads,
    standard_views,
)
from .ptxseg import SegmentationError, SegResult, run_ptx_seg
from .recon import DivergenceError, Objective, reconstruct_iterative, relative_error
from .volume import (
    MetaImageError,
    Volume,
    attenuation_to_hu,
    hu_to_attenuation,
    load_image,
    load_mask,
    load_volume,
    save_image,
    save_mask,
    save_pgm,
    save_volume,
)

log = logging.getLogger("thoraxrecon")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
MASK_NAMES = ("lungs", "body", "pneumothorax", "right_lung", "left_lung")


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def write_json(path, doc):
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _require(path, what):
    if not path:
        raise InputError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg):
    return {"schema_version": SCHEMA_VERSION, "case_id": cfg.case_id}


def _load_masks_dir(directory, names):
    d = _require(directory, "mask directory")
    out = {}
    for name in names:
        out[name] = load_mask(_require(d / f"{name}.mhd", f"mask {name}"))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_phantom(cfg: RunConfig):
    out = _outdir(cfg)
    if cfg.phantom_kind == "two_ellipsoid":
        n = int(cfg.phantom_dims[0])
        vol = two_ellipsoid_phantom(n, float(cfg.phantom_spacing[0]))
        save_volume(vol, out / "phantom.mhd")
        doc = _header(cfg) | {"kind": "two_ellipsoid", "units": "attenuation", "masks": {}, "analytic_ml": {}}
        write_json(out / "phantom.json", doc)
        if cfg.figures:
            plotting.plot_slices(vol, out / "phantom.png", window=(0.0, float(vol.data.max()) or 1.0))
        return doc
    spec = cfg.phantom_spec()
    ph = make_chest_phantom(spec)
    save_volume(ph.ct, out / "phantom.mhd")
    mask_dir = out / "masks"
    mask_dir.mkdir(exist_ok=True)
    voxel_ml = {}
    for name, m in ph.masks.items():
        save_mask(m, mask_dir / f"{name}.mhd")
        voxel_ml[name] = m.volume_ml
    doc = _header(cfg) | {
        "kind": "chest",
        "units": "hu",
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.to_dict().items()},
        "analytic_ml": ph.analytic_ml,
        "voxelized_ml": voxel_ml,
        "masks": {name: f"masks/{name}.mhd" for name in ph.masks},
    }
    write_json(out / "phantom.json", doc)
    if cfg.figures:
        plotting.plot_slices(ph.ct, out / "phantom.png", masks={"air": ph.masks["air"], "lungs": ph.masks["lungs"]})
    return doc


def cmd_drr(cfg: RunConfig):
    src = _require(cfg.input, "input volume")
    ct = load_volume(src)
    g = cfg.geometry()
    pa, la = drr_simulate(ct, g, radiographic=cfg.radiographic, mu_water=cfg.mu_water)
    out = _outdir(cfg)
    for name, img in (("pa", pa), ("la", la)):
        save_pgm(img, out / f"{name}.pgm")
        save_image(img, out / f"{name}.mhd")
    resolved = g.resolve(ct.dims, ct.spacing)
    pa_pose, la_pose, _ = standard_views()
    doc = _header(cfg) | {
        "input": str(src),
        "geometry": {
            "mode": resolved.mode,
            "detector_dims": list(resolved.detector_dims),
            "detector_pixel_spacing": list(resolved.detector_pixel_spacing),
            "source_to_isocenter": resolved.source_to_isocenter,
            "source_to_detector": resolved.source_to_detector,
            "ray_step": resolved.ray_step,
        },
        "poses": {"pa": pa_pose.as_list(), "la": la_pose.as_list()},
        "radiographic": cfg.radiographic,
        "mu_water": cfg.mu_water,
        "images": {"pa": ["pa.pgm", "pa.mhd"], "la": ["la.pgm", "la.mhd"]},
    }
    write_json(out / "geometry.json", doc)
    if cfg.figures:
        plotting.plot_drr(pa, la, out / "drr.png")
    return doc


def _segment_volume(cfg, ct, lung_masks=()):
    return run_ptx_seg(ct, list(lung_masks), cfg.seg_params())


def cmd_segment(cfg: RunConfig):
    src = _require(cfg.input, "input volume")
    lung_paths = [_require(p, "lung mask") for p in cfg.lung_masks]
    ct = load_volume(src)
    seg = _segment_volume(cfg, ct, [load_mask(p) for p in lung_paths])
    out = _outdir(cfg)
    masks = {}
    for name, m in seg.items():
        save_mask(m, out / f"{name}.mhd")
        masks[name] = {"file": f"{name}.mhd", "voxels": m.count, "volume_ml": m.volume_ml}
    q = metrics.quantify(seg)
    doc = _header(cfg) | {
        "input": str(src),
        "lung_source": "ensemble" if lung_paths else "classical",
        "params": cfg.seg_params().to_dict(),
        "masks": masks,
        "quant": q.to_dict(),
    }
    write_json(out / "segment.json", doc)
    if cfg.figures:
        plotting.plot_slices(ct, out / "segment.png", masks={"pneumothorax": seg.pneumothorax, "lungs": seg.lungs, "body": seg.body})
    return doc


def _seg_from_dir(directory):
    m = _load_masks_dir(directory, MASK_NAMES)
    return SegResult(lungs=m["lungs"], body=m["body"], pneumothorax=m["pneumothorax"], right_lung=m["right_lung"], left_lung=m["left_lung"])


def cmd_quantify(cfg: RunConfig):
    if cfg.segmentation_dir:
        seg = _seg_from_dir(cfg.segmentation_dir)
    else:
        seg = _segment_volume(cfg, load_volume(_require(cfg.input, "input volume or segmentation_dir")))
    q = metrics.quantify(seg)
    doc = _header(cfg) | q.to_dict()
    write_json(_outdir(cfg) / "quantify.json", doc)
    return doc


def _structure_masks(cfg, volume, masks_dir):
    if masks_dir:
        seg = _seg_from_dir(masks_dir)
    else:
        seg = _segment_volume(cfg, volume)
    air = seg.pneumothorax.data
    return {
        "right_lung": seg.right_lung.with_data(seg.right_lung.data & ~air),
        "left_lung": seg.left_lung.with_data(seg.left_lung.data & ~air),
        "air": seg.pneumothorax,
    }


def evaluate_volumes(cfg: RunConfig, ref: Volume, cand: Volume, ref_masks, cand_masks):
    report = {"cs": None, "psnr": None, "ssim": None, "structures": {}, "reasons": {}}
    reasons = report["reasons"]
    try:
        report["cs"] = metrics.cosine_similarity(ref, cand)
    except metrics.UndefinedMetricError as exc:
        reasons["cs"] = str(exc)
    p = metrics.psnr(ref, cand, cfg.data_range)
    if math.isinf(p):
        reasons["psnr"] = "infinite"
    else:
        report["psnr"] = p
    try:
        report["ssim"] = metrics.ssim(ref, cand, metrics.SSIMParams(window=cfg.ssim_window, data_range=cfg.data_range))
    except ValueError as exc:
        reasons["ssim"] = str(exc)
    for name in ref_masks:
        a, b = ref_masks[name], cand_masks[name]
        entry = {"dice": metrics.dice(a, b), "jaccard": metrics.jaccard(a, b), "hd95": None, "asd": None}
        try:
            entry["hd95"], entry["asd"] = metrics.surface_distances(a, b)
        except metrics.UndefinedMetricError as exc:
            reasons[f"{name}.hd95"] = reasons[f"{name}.asd"] = str(exc)
        report["structures"][name] = entry
    return report


def cmd_evaluate(cfg: RunConfig):
    ref = load_volume(_require(cfg.reference, "reference volume"))
    cand = load_volume(_require(cfg.candidate, "candidate volume"))
    if not ref.same_geometry(cand):
        raise InputError("reference and candidate geometries differ")
    ref_masks = _structure_masks(cfg, ref, cfg.reference_masks_dir)
    cand_masks = _structure_masks(cfg, cand, cfg.candidate_masks_dir)
    doc = _header(cfg) | evaluate_volumes(cfg, ref, cand, ref_masks, cand_masks)
    out = _outdir(cfg)
    write_json(out / "evaluate.json", doc)
    if cfg.figures:
        plotting.plot_comparison(ref, cand, out / "evaluate.png")
    return doc


_QUANT_KEYS = ("right_lung_ml", "left_lung_ml", "air_ml", "occupancy")
COHORT_PAIRS = (("RLCC", "right_lung_ml"), ("LLCC", "left_lung_ml"), ("ARCC", "air_ml"), ("OCC", "occupancy"))


def _load_report(item, base, case_id):
    if isinstance(item, str):
        p = _require(base / item if not Path(item).is_absolute() else item, "quantify report")
        item = json.loads(Path(p).read_text())
    if not isinstance(item, dict) or any(k not in item for k in _QUANT_KEYS):
        raise InputError(f"cohort record {case_id}: report lacks {', '.join(_QUANT_KEYS)}")
    if "case_id" in item and item["case_id"] != case_id:
        raise InputError(f"cohort record {case_id}: paired report has case_id {item['case_id']!r}")
    return {k: float(item[k]) for k in _QUANT_KEYS}


def load_cohort(path):
    p = _require(path, "cohort file")
    try:
        doc = json.loads(Path(p).read_text())
        records = doc["records"] if isinstance(doc, dict) else doc
        out = []
        for rec in records:
            cid = str(rec["case_id"])
            out.append((cid, _load_report(rec["reference"], Path(p).parent, cid), _load_report(rec["candidate"], Path(p).parent, cid)))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"malformed cohort file {p}: {exc!r}") from None
    if len(out) < 2:
        raise InputError("compare-cohort needs at least two records")
    return out


def compare_cohort(records):
    """Pearson coefficients between reference and candidate series."""
    result, reasons = {}, {}
    for name, key in COHORT_PAIRS:
        xs = [r[1][key] for r in records]
        ys = [r[2][key] for r in records]
        try:
            result[name] = metrics.pearson(xs, ys)
        except metrics.UndefinedMetricError as exc:
            result[name] = None
            reasons[name] = str(exc)
    return result, reasons


def cmd_compare_cohort(cfg: RunConfig):
    records = load_cohort(cfg.cohort)
    coeffs, reasons = compare_cohort(records)
    doc = _header(cfg) | coeffs | {"n_cases": len(records), "reasons": reasons}
    out = _outdir(cfg)
    write_json(out / "cohort.json", doc)
    if cfg.figures:
        plotting.plot_cohort([r[1] for r in records], [r[2] for r in records], coeffs, out / "cohort.png")
    return doc


def _recon_problem(cfg: RunConfig):
    g = cfg.geometry()
    reference = None
    if cfg.projections_manifest:
        mp = _require(cfg.projections_manifest, "projections manifest")
        manifest = json.loads(Path(mp).read_text())
        refs = []
        for entry in manifest["images"]:
            img = load_image(_require(Path(mp).parent / entry["image"], "projection image"))
            pose = entry.get("pose", [0, 0, 0, 0, 0, 0])
            refs.append((img, ViewPose(tuple(pose[:3]), tuple(pose[3:]))))
        dims = tuple(manifest.get("target_dims") or cfg.target_dims or ())
        spacing = tuple(manifest.get("target_spacing") or cfg.target_spacing or (1.0, 1.0, 1.0))
        if len(dims) != 3:
            raise ConfigError("target_dims required when reconstructing from a manifest")
        origin = tuple(manifest.get("target_origin") or [-0.5 * (n - 1) * s for n, s in zip(dims, spacing)])
        grid = Volume(np.zeros(dims), spacing, origin)
        if not refs:
            raise ConfigError("projections manifest lists no images")
        obj = Objective(refs, g, norm=cfg.norm, delta=cfg.delta)
    else:
        reference = load_volume(_require(cfg.reference or cfg.input, "reference volume or projections_manifest"))
        if cfg.input_units == "hu":
            reference = hu_to_attenuation(reference, cfg.mu_water)
        if cfg.view_set == "standard":
            poses = list(standard_views())
        else:
            poses = orbit_poses(cfg.n_views, math.radians(cfg.arc_degrees), cfg.orbit_axis)
        if cfg.perturb:
            spec = cfg.perturbation()
            poses = [sample_perturbed_pose(p, spec, i) for i, p in enumerate(poses)]
        vol_ref = reference if cfg.lambda_re > 0 else None
        obj = Objective.from_volume(reference, g, poses, norm=cfg.norm, delta=cfg.delta, volume_reference=vol_ref, lambda_re=cfg.lambda_re)
        grid = reference.with_data(np.zeros(reference.dims))
    return obj, grid, reference


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective", "step"])
        for it, f, step in trace:
            w.writerow([it, repr(float(f)), repr(float(step))])


def cmd_reconstruct(cfg: RunConfig):
    obj, grid, reference = _recon_problem(cfg)
    out = _outdir(cfg)
    try:
        result, trace = reconstruct_iterative(obj, grid, cfg.opt_settings())
    except DivergenceError as exc:
        _write_trace(out / "trace.csv", exc.trace)
        raise
    _write_trace(out / "trace.csv", trace)
    saved = attenuation_to_hu(result, cfg.mu_water) if cfg.input_units == "hu" and reference is not None else result
    save_volume(saved, out / "reconstruction.mhd")
    doc = _header(cfg) | {
        "n_views": len(obj.references),
        "iterations_run": trace[-1][0],
        "initial_objective": trace[0][1],
        "final_objective": trace[-1][1],
        "relative_error": relative_error(result, reference) if reference is not None else None,
        "units": cfg.input_units,
        "outputs": {"volume": "reconstruction.mhd", "trace": "trace.csv"},
    }
    write_json(out / "reconstruct.json", doc)
    if cfg.figures:
        plotting.plot_trace(trace, out / "trace.png")
    return doc


COMMANDS = {
    "phantom": cmd_phantom,
    "drr": cmd_drr,
    "segment": cmd_segment,
    "quantify": cmd_quantify,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "compare-cohort": cmd_compare_cohort,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--output-dir")
    common.add_argument("--case-id")
    common.add_argument("--threads", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--input", help="shortcut for --set input=PATH")
    common.add_argument("--reference", help="shortcut for --set reference=PATH")
    common.add_argument("--candidate", help="shortcut for --set candidate=PATH")
    common.add_argument("--no-figures", action="store_true", help="skip PNG report figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="thoraxrecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    extra = {
        "output_dir": args.output_dir,
        "case_id": args.case_id,
        "threads": args.threads,
        "seed": args.seed,
        "input": args.input,
        "reference": args.reference,
        "candidate": args.candidate,
    }
    if args.no_figures:
        extra["figures"] = False
    try:
        cfg = load_config(args.config, args.overrides, extra)
        set_num_threads(cfg.threads)
        doc = COMMANDS[args.command](cfg)
    except (ConfigError, InputError, MetaImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SegmentationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.command in ("quantify", "evaluate", "compare-cohort"):
        print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
