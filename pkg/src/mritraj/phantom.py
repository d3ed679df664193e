"""Synthetic longitudinal "brain-like" phantom cohorts.

Each subject is a skull ellipsoid filled with tissue, a bright central
ventricle sphere and two hippocampus spheres.  Over time the ventricle radius
grows by ``(1 + rate * status * t)`` and the hippocampi shrink by
``(1 - rate * status * t)``, where ``rate`` is the subject's individual rate
(drawn around the cohort rate).  Intensities use a linear ramp one voxel wide
across every boundary; noise is added inside the head only, after geometry.

Everything is a pure function of ``(PhantomSpec, seed)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import ScanRecord, Volume, save_volume, write_manifest

REFERENCE_GRID = 32
RAMP_WIDTH = 1.0
MAX_VENTRICLE_FRACTION = 0.55
MIN_HIPPOCAMPUS_FACTOR = 0.2


@dataclass
class PhantomSpec:
    grid_size: int = 32
    cohort_size: int = 60
    seed: int = 0
    statuses: list = field(default_factory=lambda: [[s, 1.0] for s in range(6)])
    ventricle_growth_rate: float = 0.02
    hippocampus_shrink_rate: float = 0.01
    rate_spread: float = 0.25
    noise_sigma: float = 0.05
    scans_per_subject: tuple = (3, 6)
    visit_spacing_years: tuple = (0.75, 2.0)
    baseline_age_years: tuple = (60.0, 85.0)
    roi_margin: float = 2.0
    volume_format: str = "nii.gz"

    def __post_init__(self):
        self.scans_per_subject = tuple(int(v) for v in self.scans_per_subject)
        self.visit_spacing_years = tuple(float(v) for v in self.visit_spacing_years)
        self.baseline_age_years = tuple(float(v) for v in self.baseline_age_years)
        self.statuses = [[int(s), float(w)] for s, w in self.statuses]
        self.validate()

    def validate(self) -> None:
        if self.grid_size < 16:
            raise ValueError("grid_size must be >= 16")
        if self.cohort_size < 1:
            raise ValueError("cohort_size must be >= 1")
        if min(self.ventricle_growth_rate, self.hippocampus_shrink_rate, self.rate_spread) < 0:
            raise ValueError("rates must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.scans_per_subject
        if not 1 <= lo <= hi:
            raise ValueError("scans_per_subject must be a range with 1 <= lo <= hi")
        if not 0 < self.visit_spacing_years[0] <= self.visit_spacing_years[1]:
            raise ValueError("visit_spacing_years must be a positive range")
        if not self.statuses or any(s not in range(6) or w < 0 for s, w in self.statuses):
            raise ValueError("statuses must be [code 0..5, weight >= 0] entries")
        if sum(w for _, w in self.statuses) <= 0:
            raise ValueError("status weights must not all be zero")
        if self.volume_format not in ("nii.gz", "nii", "raw"):
            raise ValueError("volume_format must be nii.gz, nii or raw")

    @property
    def voxel_size(self) -> float:
        # 160 mm field of view at any grid size
        return 160.0 / self.grid_size


@dataclass
class SubjectAnatomy:
    subject_id: str
    baseline_age: float
    status: int
    grid_size: int
    skull_center: tuple
    skull_radii: tuple
    ventricle_center: tuple
    ventricle_radius: float
    hippocampus_centers: tuple
    hippocampus_radius: float
    tissue_intensity: float
    ventricle_intensity: float
    hippocampus_intensity: float
    ventricle_rate: float
    hippocampus_rate: float
    noise_sigma: float
    noise_seed: int
    voxel_size: float = 5.0

    def ventricle_radius_at(self, t: float) -> float:
        r = self.ventricle_radius * (1.0 + self.ventricle_rate * self.status * t)
        return float(min(r, MAX_VENTRICLE_FRACTION * min(self.skull_radii)))

    def hippocampus_radius_at(self, t: float) -> float:
        f = max(1.0 - self.hippocampus_rate * self.status * t, MIN_HIPPOCAMPUS_FACTOR)
        return float(self.hippocampus_radius * f)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectAnatomy":
        d = dict(d)
        d["hippocampus_centers"] = tuple(tuple(c) for c in d["hippocampus_centers"])
        for k in ("skull_center", "skull_radii", "ventricle_center"):
            d[k] = tuple(d[k])
        return cls(**d)


def subject_id(index: int) -> str:
    return f"sub-{index:03d}"


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def cohort_statuses(spec: PhantomSpec) -> list[int]:
    """Status of every subject: quotas proportional to the weights
    (largest remainder), shuffled with the cohort seed."""
    codes = [int(st) for st, _ in spec.statuses]
    w = np.array([w for _, w in spec.statuses], dtype=float)
    exact = w / w.sum() * spec.cohort_size
    quota = np.floor(exact).astype(int)
    short = spec.cohort_size - quota.sum()
    quota[np.argsort(-(exact - quota), kind="stable")[:short]] += 1
    pool = np.repeat(codes, quota)
    return [int(v) for v in np.random.default_rng([int(spec.seed), 2**32 - 1]).permutation(pool)]


def draw_anatomy(spec: PhantomSpec, index: int) -> SubjectAnatomy:
    """Subject ``index``'s anatomy; depends only on (spec, seed, index)."""
    rng = _subject_rng(spec.seed, index)
    s = spec.grid_size / REFERENCE_GRID
    c = (spec.grid_size - 1) / 2.0
    status = cohort_statuses(spec)[index % spec.cohort_size]
    age = float(rng.uniform(*spec.baseline_age_years))

    skull_radii = tuple(float(r * s * rng.uniform(0.95, 1.05)) for r in (13.0, 14.0, 12.5))
    skull_center = tuple(float(c + rng.uniform(-0.5, 0.5) * s) for _ in range(3))
    vent_center = tuple(float(skull_center[i] + rng.uniform(-0.75, 0.75) * s) for i in range(3))
    vent_r = float(rng.uniform(3.0, 4.0) * s)
    hip_r = float(rng.uniform(2.2, 2.8) * s)
    dy = rng.uniform(-0.5, 0.5) * s
    dz = rng.uniform(-0.5, 0.5) * s
    hip_centers = tuple(
        (
            float(skull_center[0] + side * rng.uniform(7.5, 8.5) * s),
            float(skull_center[1] + 1.0 * s + dy),
            float(skull_center[2] - 3.5 * s + dz),
        )
        for side in (-1.0, 1.0)
    )
    mult = float(np.exp(rng.normal(0.0, spec.rate_spread))) if spec.rate_spread > 0 else 1.0
    return SubjectAnatomy(
        subject_id=subject_id(index),
        baseline_age=age,
        status=status,
        grid_size=spec.grid_size,
        skull_center=skull_center,
        skull_radii=skull_radii,
        ventricle_center=vent_center,
        ventricle_radius=vent_r,
        hippocampus_centers=hip_centers,
        hippocampus_radius=hip_r,
        tissue_intensity=float(rng.uniform(0.45, 0.55)),
        ventricle_intensity=float(rng.uniform(0.95, 1.05)),
        hippocampus_intensity=float(rng.uniform(0.75, 0.85)),
        ventricle_rate=spec.ventricle_growth_rate * mult,
        hippocampus_rate=spec.hippocampus_shrink_rate * mult,
        noise_sigma=spec.noise_sigma,
        noise_seed=int(rng.integers(0, 2**31 - 1)),
        voxel_size=spec.voxel_size,
    )


def _grid(n: int) -> np.ndarray:
    ax = np.arange(n, dtype=np.float64)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=0)


def _sphere_distance(grid: np.ndarray, center, radius: float) -> np.ndarray:
    d = grid - np.asarray(center, dtype=np.float64)[:, None, None, None]
    return np.sqrt((d**2).sum(axis=0)) - radius


def _ellipsoid_distance(grid: np.ndarray, center, radii) -> np.ndarray:
    d = (grid - np.asarray(center)[:, None, None, None]) / np.asarray(radii)[:, None, None, None]
    return (np.sqrt((d**2).sum(axis=0)) - 1.0) * min(radii)


def _ramp(signed_distance: np.ndarray) -> np.ndarray:
    """1 inside, 0 outside, linear over RAMP_WIDTH across the boundary."""
    return np.clip(0.5 - signed_distance / RAMP_WIDTH, 0.0, 1.0)


def structure_masks(anatomy: SubjectAnatomy, elapsed_years: float = 0.0) -> dict[str, np.ndarray]:
    """Exact binary masks (signed distance < 0) of each structure at time t."""
    g = _grid(anatomy.grid_size)
    hip = np.zeros((anatomy.grid_size,) * 3, dtype=bool)
    for hc in anatomy.hippocampus_centers:
        hip |= _sphere_distance(g, hc, anatomy.hippocampus_radius_at(elapsed_years)) < 0
    return {
        "skull": _ellipsoid_distance(g, anatomy.skull_center, anatomy.skull_radii) < RAMP_WIDTH / 2,
        "ventricles": _sphere_distance(
            g, anatomy.ventricle_center, anatomy.ventricle_radius_at(elapsed_years)
        ) < 0,
        "hippocampus": hip,
    }


def roi_masks(anatomy: SubjectAnatomy, margin: float = 2.0) -> dict[str, np.ndarray]:
    """Evaluation regions surrounding each structure.

    The ventricle ROI is a sphere covering the largest ventricle the subject
    can reach (the skull-limited clamp) plus ``margin`` voxels; the hippocampus
    ROI is the baseline spheres dilated by ``margin``.
    """
    g = _grid(anatomy.grid_size)
    s = anatomy.grid_size / REFERENCE_GRID
    v_max = MAX_VENTRICLE_FRACTION * min(anatomy.skull_radii)
    vent = _sphere_distance(g, anatomy.ventricle_center, v_max + margin * s) < 0
    hip = np.zeros_like(vent)
    for hc in anatomy.hippocampus_centers:
        hip |= _sphere_distance(g, hc, anatomy.hippocampus_radius + margin * s) < 0
    return {"whole": np.ones_like(vent), "ventricles": vent, "hippocampus": hip}


def render_clean(anatomy: SubjectAnatomy, elapsed_years: float = 0.0) -> np.ndarray:
    """Noise-free intensities at ``elapsed_years`` after baseline."""
    if elapsed_years < 0:
        raise ValueError("elapsed_years must be >= 0")
    g = _grid(anatomy.grid_size)
    head = _ramp(_ellipsoid_distance(g, anatomy.skull_center, anatomy.skull_radii))
    img = anatomy.tissue_intensity * np.ones_like(head)
    hip = np.zeros_like(head)
    for hc in anatomy.hippocampus_centers:
        hip = np.maximum(hip, _ramp(_sphere_distance(g, hc, anatomy.hippocampus_radius_at(elapsed_years))))
    img = img * (1 - hip) + anatomy.hippocampus_intensity * hip
    vent = _ramp(_sphere_distance(g, anatomy.ventricle_center, anatomy.ventricle_radius_at(elapsed_years)))
    img = img * (1 - vent) + anatomy.ventricle_intensity * vent
    return img * head


def render_subject(anatomy: SubjectAnatomy, elapsed_years: float = 0.0) -> Volume:
    """Render one scan.  Noise depends on (noise_seed, elapsed_years) only."""
    img = render_clean(anatomy, elapsed_years)
    if anatomy.noise_sigma > 0:
        t_key = int(round(float(elapsed_years) * 1e6))
        rng = np.random.default_rng(np.random.SeedSequence([anatomy.noise_seed, t_key]))
        noise = rng.normal(0.0, anatomy.noise_sigma, size=img.shape)
        img = img + noise * (img > 0)
    vs = anatomy.voxel_size
    return Volume(img.astype(np.float32), (vs, vs, vs))


def scan_times(spec: PhantomSpec, index: int) -> list[float]:
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(index), 1]))
    n = int(rng.integers(spec.scans_per_subject[0], spec.scans_per_subject[1] + 1))
    gaps = rng.uniform(*spec.visit_spacing_years, size=max(n - 1, 0))
    return [0.0] + [float(round(v, 4)) for v in np.cumsum(gaps)]


@dataclass
class Cohort:
    manifest_path: Path
    records: list[ScanRecord]
    anatomies: list[SubjectAnatomy]
    masks: dict[str, dict[str, Path]]


def mean_anatomy_template(spec: PhantomSpec) -> Volume:
    """Noise-free render of the cohort-average anatomy, used as the
    registration template at desk scale."""
    base = draw_anatomy(spec, 0)
    s = spec.grid_size / REFERENCE_GRID
    c = (spec.grid_size - 1) / 2.0
    avg = SubjectAnatomy(
        subject_id="template",
        baseline_age=float(np.mean(spec.baseline_age_years)),
        status=0,
        grid_size=spec.grid_size,
        skull_center=(c, c, c),
        skull_radii=(13.0 * s, 14.0 * s, 12.5 * s),
        ventricle_center=(c, c, c),
        ventricle_radius=3.5 * s,
        hippocampus_centers=((c - 8 * s, c + s, c - 3.5 * s), (c + 8 * s, c + s, c - 3.5 * s)),
        hippocampus_radius=2.5 * s,
        tissue_intensity=0.5,
        ventricle_intensity=1.0,
        hippocampus_intensity=0.8,
        ventricle_rate=0.0,
        hippocampus_rate=0.0,
        noise_sigma=0.0,
        noise_seed=base.noise_seed,
        voxel_size=spec.voxel_size,
    )
    return render_subject(avg, 0.0)


def generate_cohort(spec: PhantomSpec, out_dir: str | Path) -> Cohort:
    """Render every scan of the cohort and write volumes, masks and manifest.

    Layout under ``out_dir``::

        manifest.csv
        anatomy.json
        volumes/sub-000_t0.nii.gz ...
        masks/sub-000_ventricles.nii.gz, sub-000_hippocampus.nii.gz
    """
    spec.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create phantom output directory {out_dir}: {exc}") from exc

    ext = spec.volume_format
    records, anatomies, masks = [], [], {}
    for i in range(spec.cohort_size):
        anat = draw_anatomy(spec, i)
        anatomies.append(anat)
        for k, t in enumerate(scan_times(spec, i)):
            rel = Path("volumes") / f"{anat.subject_id}_t{k}.{ext}"
            save_volume(render_subject(anat, t), out_dir / rel)
            records.append(ScanRecord(anat.subject_id, rel.as_posix(), anat.baseline_age + t, anat.status, t))
        vs = anat.voxel_size
        masks[anat.subject_id] = {}
        for name, m in roi_masks(anat, spec.roi_margin).items():
            if name == "whole":
                continue
            rel = Path("masks") / f"{anat.subject_id}_{name}.{ext}"
            save_volume(Volume(m.astype(np.float32), (vs, vs, vs)), out_dir / rel)
            masks[anat.subject_id][name] = out_dir / rel

    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    records = [replace(r, path=str(out_dir / r.path)) for r in records]
    (out_dir / "anatomy.json").write_text(
        json.dumps({"spec": asdict(spec), "subjects": [a.to_dict() for a in anatomies]}, indent=1) + "\n"
    )
    return Cohort(manifest, records, anatomies, masks)


def load_anatomies(cohort_dir: str | Path) -> dict[str, SubjectAnatomy]:
    d = json.loads((Path(cohort_dir) / "anatomy.json").read_text())
    return {s["subject_id"]: SubjectAnatomy.from_dict(s) for s in d["subjects"]}
