"""Predict a ten-year trajectory from one scan and look at how the
ventricles move between consecutive years.

    python demos/trajectory_flow.py RUN_DIR [SUBJECT]

RUN_DIR is a finished run (for example from ``mritraj`` with
configs/desk.yaml, or demos/quickstart.py).  Writes trajectory_flow.png next
to the run.
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mritraj.analysis import divergence, optical_flow, overlay_rgb
from mritraj.cvae import load_checkpoint
from mritraj.dataio import group_by_subject, load_volume, read_manifest
from mritraj.predictor import TrajectoryRequest, trajectory

run = Path(sys.argv[1])
ckpt = load_checkpoint(run / "train" / "best.npz")
by_subject = group_by_subject(read_manifest(run / "cohort" / "manifest.csv"))
subject = sys.argv[2] if len(sys.argv) > 2 else max(by_subject, key=lambda s: by_subject[s][0].status)
first = by_subject[subject][0]
base = load_volume(first.path)
print(f"{subject}: status {first.status}, age {first.age_at_scan:.1f}")

# same subject under two hypotheses, one shared latent draw
years = [float(y) for y in range(1, 11)]
paths = {}
for status in (0, first.status):
    req = TrajectoryRequest(base, first.age_at_scan, status, years, latent_mode="zero")
    paths[status] = trajectory(ckpt, req)

mask = load_volume(run / "cohort" / "masks" / f"{subject}_ventricles.nii.gz").data > 0.5
for status, vols in paths.items():
    proxy = [float(v.data[mask].mean()) for v in vols]
    print(f"status {status} ventricle proxy:", " ".join(f"{p:.3f}" for p in proxy))

# flow between consecutive years, not against the baseline
vols = paths[first.status]
divs = [divergence(optical_flow(a.data, b.data, alpha=1.0, iters=200)) for a, b in zip(vols, vols[1:])]
print("mean ventricle divergence per step:", " ".join(f"{d[mask].mean():+.4f}" for d in divs))

z = int(np.argmax(mask.sum(axis=(0, 1))))
vmax = max(float(np.abs(d[..., z]).max()) for d in divs) or 1.0
fig, axes = plt.subplots(1, len(divs), figsize=(1.6 * len(divs), 2.0))
for ax, v, d, y in zip(axes, vols[1:], divs, years[1:]):
    ax.imshow(np.clip(overlay_rgb(v.data[..., z], d[..., z], vmax), 0, 1).transpose(1, 0, 2), origin="lower")
    ax.set_title(f"{y:g} y", fontsize=8)
    ax.set_axis_off()
fig.tight_layout()
out = run / "trajectory_flow.png"
fig.savefig(out, dpi=120)
print("wrote", out)
