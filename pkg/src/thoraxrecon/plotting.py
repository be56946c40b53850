"""Report figures written next to the CLI's JSON/CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "image.interpolation": "nearest",
    "savefig.dpi": 120,
}

# fixed metadata keeps PNG bytes identical between runs
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_slices(volume, path, masks=None, title=None, window=(-1000.0, 400.0)):
    """Central axial, coronal and sagittal slices, with optional mask contours."""
    data = volume.data
    cz, cy, cx = (n // 2 for n in data.shape)
    cuts = [("axial", np.s_[cz, :, :]), ("coronal", np.s_[:, cy, :]), ("sagittal", np.s_[:, :, cx])]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        for ax, (name, sl) in zip(axes, cuts):
            ax.imshow(data[sl], cmap="gray", vmin=window[0], vmax=window[1], origin="lower")
            for (label, m), color in zip((masks or {}).items(), ("tab:red", "tab:cyan", "tab:orange", "tab:green", "tab:purple")):
                plane = m.data[sl]
                if plane.any() and not plane.all():
                    ax.contour(plane.astype(float), levels=[0.5], colors=color, linewidths=0.8)
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_drr(pa, la, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.4))
        for ax, img, name in zip(axes, (pa, la), ("PA", "lateral")):
            ax.imshow(img.data, cmap="gray", vmin=0.0, vmax=1.0, origin="lower")
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        return _save(fig, path)


def plot_trace(trace, path):
    it = [t[0] for t in trace]
    obj = [t[1] for t in trace]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        positive = [o for o in obj if o > 0]
        ax.plot(it, obj, lw=1.2, color="k")
        if positive and len(positive) == len(obj):
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("objective")
        fig.tight_layout()
        return _save(fig, path)


def plot_cohort(reference, candidate, coefficients, path):
    """Scatter of candidate vs reference for each cohort quantity."""
    panels = [
        ("right_lung_ml", "RLCC", "right lung (ml)"),
        ("left_lung_ml", "LLCC", "left lung (ml)"),
        ("air_ml", "ARCC", "air region (ml)"),
        ("occupancy", "OCC", "occupancy"),
    ]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(6.0, 5.6))
        for ax, (key, cc_name, label) in zip(axes.ravel(), panels):
            x = np.array([r[key] for r in reference])
            y = np.array([r[key] for r in candidate])
            ax.plot(x, y, "o", ms=3, color="k")
            lo = float(min(x.min(), y.min()))
            hi = float(max(x.max(), y.max()))
            ax.plot([lo, hi], [lo, hi], lw=0.6, color="0.6")
            cc = coefficients.get(cc_name)
            ax.set_title(f"{cc_name} = {cc:.3f}" if cc is not None else f"{cc_name} undefined")
            ax.set_xlabel(f"reference {label}")
            ax.set_ylabel(f"candidate {label}")
        fig.tight_layout()
        return _save(fig, path)


def plot_comparison(reference, candidate, path, window=(-1000.0, 400.0)):
    """Central axial slice of reference, candidate and their difference."""
    cz = reference.dims[0] // 2
    ref, cand = reference.data[cz], candidate.data[cz]
    diff = cand - ref
    span = float(np.abs(diff).max()) or 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        panels = [
            (ref, "reference", "gray", window),
            (cand, "candidate", "gray", window),
            (diff, "candidate - reference", "RdBu_r", (-span, span)),
        ]
        for ax, (img, name, cmap, (lo, hi)) in zip(axes, panels):
            ax.imshow(img, cmap=cmap, vmin=lo, vmax=hi, origin="lower")
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        return _save(fig, path)
