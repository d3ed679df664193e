"""Evaluation: ROI errors, per-pair win rates, dense flow and its divergence,
and the figures built from them."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import ndimage, stats  # noqa: E402

ROI_NAMES = ("whole", "hippocampus", "ventricles")


def _arr(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def roi_mse(pred, truth, mask=None) -> float:
    """Mean squared error over the voxels where ``mask`` is true (all voxels
    when ``mask`` is None)."""
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if mask is None:
        return float(np.mean((p - t) ** 2))
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    if m.shape != p.shape:
        raise ValueError(f"mask shape {m.shape} != volume shape {p.shape}")
    if not m.any():
        raise ValueError("empty ROI mask")
    return float(np.mean((p[m] - t[m]) ** 2))


# --------------------------------------------------------------------------
# reports


@dataclass
class MseReport:
    rows: list = field(default_factory=list)  # (pair_id, method, roi, mse)

    def add(self, pair_id: str, method: str, roi: str, value: float) -> None:
        self.rows.append((pair_id, method, roi, float(value)))

    @property
    def methods(self) -> list[str]:
        return sorted({r[1] for r in self.rows})

    @property
    def rois(self) -> list[str]:
        return sorted({r[2] for r in self.rows})

    def table(self) -> dict:
        """{roi: {pair_id: {method: mse}}}"""
        out: dict = defaultdict(lambda: defaultdict(dict))
        for pid, method, roi, v in self.rows:
            out[roi][pid][method] = v
        return out

    def values(self, method: str, roi: str) -> np.ndarray:
        return np.array([v for _, m, r, v in self.rows if m == method and r == roi])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair_id", "method", "roi", "mse"])
            for pid, m, r, v in self.rows:
                w.writerow([pid, m, r, repr(v)])

    @classmethod
    def read_csv(cls, path) -> "MseReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.add(row["pair_id"], row["method"], row["roi"], float(row["mse"]))
        return rep

    def summary(self) -> dict:
        wr = win_rates(self.rows)
        out = {"n_pairs": len({r[0] for r in self.rows}), "win_rates": wr, "median_mse": {}, "bimodality": {}}
        for roi in self.rois:
            out["median_mse"][roi] = {m: float(np.median(self.values(m, roi))) for m in self.methods}
            out["bimodality"][roi] = {m: bimodality_coefficient(np.log10(np.maximum(self.values(m, roi), 1e-12)))
                                      for m in self.methods}
        return out

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


def bimodality_coefficient(x) -> float | None:
    """Sarle's bimodality coefficient; values above ~0.555 hint at more than
    one mode.  None when fewer than 4 values."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return None
    g = stats.skew(x, bias=False)
    k = stats.kurtosis(x, bias=False)
    return float((g**2 + 1) / (k + 3 * (n - 1) ** 2 / ((n - 2) * (n - 3))))


def win_rates(rows) -> dict:
    """Per-ROI fraction of pairs on which each method has the lowest MSE.

    ``strict`` counts only unique minima (so fractions sum to <= 1);
    ``with_ties`` also credits every method tied at the minimum.
    """
    rows = rows.rows if isinstance(rows, MseReport) else list(rows)
    if not rows:
        raise ValueError("no report rows")
    methods = sorted({r[1] for r in rows})
    table: dict = defaultdict(lambda: defaultdict(dict))
    for pid, m, roi, v in rows:
        table[roi][pid][m] = v
    strict, ties = {}, {}
    for roi, pairs in table.items():
        s = dict.fromkeys(methods, 0)
        t = dict.fromkeys(methods, 0)
        for pid, scores in pairs.items():
            missing = [m for m in methods if m not in scores]
            if missing:
                raise ValueError(f"pair {pid} ROI {roi} has no MSE for {missing}")
            best = min(scores.values())
            winners = [m for m, v in scores.items() if v == best]
            for m in winners:
                t[m] += 1
            if len(winners) == 1:
                s[winners[0]] += 1
        n = len(pairs)
        strict[roi] = {m: s[m] / n for m in methods}
        ties[roi] = {m: t[m] / n for m in methods}
    return {"strict": strict, "with_ties": ties}


# --------------------------------------------------------------------------
# flow


@dataclass
class FlowField:
    """(3, X, Y, Z) displacement in voxels per unit time."""

    u: np.ndarray
    energy_history: list = field(default_factory=list)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[0] != 3:
            raise ValueError("flow must have shape (3, X, Y, Z)")


_NEIGHBOUR_MEAN = np.zeros((3, 3, 3))
for _ax in range(3):
    for _d in (0, 2):
        _idx = [1, 1, 1]
        _idx[_ax] = _d
        _NEIGHBOUR_MEAN[tuple(_idx)] = 1.0 / 6.0


def _hs_energy(grads, it, u, alpha) -> float:
    data = (sum(g * c for g, c in zip(grads, u)) + it) ** 2
    smooth = 0.0
    for c in u:
        for ax in range(3):
            smooth += np.sum(np.diff(c, axis=ax) ** 2)
    return float(data.sum() + alpha**2 / 6.0 * smooth)


def optical_flow(v1, v2, alpha: float = 1.0, iters: int = 200, track_energy: bool = False) -> FlowField:
    """Horn-Schunck flow from ``v1`` to ``v2`` in 3D.

    Jacobi sweeps of u <- u_avg - grad(I) (grad(I).u_avg + I_t) / (alpha^2 + |grad(I)|^2)
    with u_avg the 6-neighbour mean.  Spatial derivatives are taken on the
    average of both frames.
    """
    a, b = _arr(v1), _arr(v2)
    if a.shape != b.shape:
        raise ValueError("volumes must have the same shape")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    grads = np.gradient(0.5 * (a + b))
    it = b - a
    denom = alpha**2 + sum(g**2 for g in grads)
    u = np.zeros((3, *a.shape))
    history = [_hs_energy(grads, it, u, alpha)] if track_energy else []
    for _ in range(iters):
        avg = np.stack([ndimage.convolve(c, _NEIGHBOUR_MEAN, mode="nearest") for c in u])
        resid = (sum(g * c for g, c in zip(grads, avg)) + it) / denom
        u = np.stack([avg[k] - grads[k] * resid for k in range(3)])
        if track_energy:
            history.append(_hs_energy(grads, it, u, alpha))
    return FlowField(u, history)


def divergence(flow) -> np.ndarray:
    """Sum of d u_k / d x_k; central differences inside, one-sided at the edges."""
    u = flow.u if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    return sum(np.gradient(u[k], axis=k, edge_order=1) for k in range(3))


def gradient_energy(flow) -> float:
    u = flow.u if isinstance(flow, FlowField) else np.asarray(flow)
    return float(sum(np.sum(np.gradient(u[k], axis=ax) ** 2) for k in range(3) for ax in range(3)))


# --------------------------------------------------------------------------
# figures


def overlay_rgb(base_slice, div_slice, vmax: float | None = None, threshold: float = 0.1,
                max_alpha: float = 0.85) -> np.ndarray:
    """Grayscale anatomy with divergence blended on top: positive (expansion)
    blue, negative (contraction) red, opacity ramping up from 0 at
    ``threshold * vmax`` so near-zero values stay transparent."""
    base = np.asarray(base_slice, dtype=np.float64)
    div = np.asarray(div_slice, dtype=np.float64)
    if base.shape != div.shape or base.ndim != 2:
        raise ValueError("base and divergence slices must be matching 2D arrays")
    lo, hi = float(base.min()), float(base.max())
    gray = (base - lo) / (hi - lo) if hi > lo else np.zeros_like(base)
    if vmax is None:
        vmax = float(np.max(np.abs(div)))
    rgb = np.repeat(gray[..., None], 3, axis=2)
    if vmax <= 0:
        return rgb
    thr = threshold * vmax
    alpha = np.clip((np.abs(div) - thr) / max(vmax - thr, 1e-300), 0.0, 1.0) * max_alpha
    color = np.zeros_like(rgb)
    color[div > 0] = (0.0, 0.0, 1.0)
    color[div < 0] = (1.0, 0.0, 0.0)
    return (1 - alpha[..., None]) * rgb + alpha[..., None] * color


def render_overlay(base_slice, div_slice, out_path, vmax: float | None = None, threshold: float = 0.1) -> np.ndarray:
    """Write the overlay to a PNG (one image pixel per voxel); returns the RGB array."""
    rgb = overlay_rgb(base_slice, div_slice, vmax, threshold)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        plt.imsave(out_path, np.clip(rgb, 0, 1).transpose(1, 0, 2)[::-1])
    except OSError as exc:
        raise OSError(f"cannot write overlay to {out_path}: {exc}") from exc
    return rgb


def overlay_strip(base_slices, div_slices, out_path, titles=None, vmax: float | None = None) -> None:
    """Row of overlays sharing one symmetric colour limit."""
    if vmax is None:
        vmax = max(float(np.max(np.abs(d))) for d in div_slices) or 1.0
    n = len(base_slices)
    fig, axes = plt.subplots(1, n, figsize=(1.8 * n, 2.0), squeeze=False)
    for i, (b, d) in enumerate(zip(base_slices, div_slices)):
        ax = axes[0, i]
        ax.imshow(np.clip(overlay_rgb(b, d, vmax), 0, 1).transpose(1, 0, 2), origin="lower")
        ax.set_axis_off()
        if titles:
            ax.set_title(titles[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def mse_distribution_plot(report: MseReport, out_path, floor: float = 1e-8) -> dict:
    """Per-ROI box plots of MSE on a log axis.  Returns the plotted medians
    and y-limits so callers can check what was drawn."""
    if not report.rows:
        raise ValueError("empty report")
    rois = [r for r in ROI_NAMES if r in report.rois] + [r for r in report.rois if r not in ROI_NAMES]
    methods = report.methods
    fig, axes = plt.subplots(1, len(rois), figsize=(3.2 * len(rois), 3.2), squeeze=False)
    medians, ylims = {}, {}
    for ax, roi in zip(axes[0], rois):
        data = [np.maximum(report.values(m, roi), floor) for m in methods]
        bp = ax.boxplot(data, showfliers=True)
        ax.set_yscale("log")
        lo = min(float(d.min()) for d in data)
        hi = max(float(d.max()) for d in data)
        ax.set_ylim(lo / 2, hi * 2)
        ax.set_xticks(range(1, len(methods) + 1), methods, rotation=45, ha="right", fontsize=7)
        ax.set_title(roi)
        medians[roi] = {m: float(line.get_ydata()[0]) for m, line in zip(methods, bp["medians"])}
        ylims[roi] = tuple(float(v) for v in ax.get_ylim())
    axes[0, 0].set_ylabel("MSE")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return {"medians": medians, "ylims": ylims}
