"""Volumes, manifests and the paired longitudinal dataset.

Two on-disk volume formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``), written with a zeroed gzip mtime so that
  repeated writes are byte-identical.
* raw little-endian float32 (``.raw``) with a JSON sidecar (``.raw.json``)
  holding ``shape``, ``voxel_size`` and ``grid_to_world``.
"""
from __future__ import annotations

import csv
import gzip
import itertools
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import nibabel as nib
import numpy as np

MANIFEST_COLUMNS = ("subject_id", "path", "age", "status", "time_years")

ADNI_STATUS = OrderedDict(
    [("CN", 0), ("SMC", 1), ("EMCI", 2), ("MCI", 3), ("LMCI", 4), ("AD", 5)]
)
OASIS_STATUS = OrderedDict([("CN", 0), ("CI", 3), ("AD", 5)])
STATUS_SCHEMES = {"adni": ADNI_STATUS, "oasis": OASIS_STATUS}


class VolumeFormatError(ValueError):
    """Raised when a volume file is malformed or inconsistent with its sidecar."""


class DatasetError(ValueError):
    """Raised for invalid manifests, pair sets or splits."""


@dataclass
class Volume:
    """A 3D scalar grid with voxel size (mm) and a 4x4 grid-to-world affine."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    grid_to_world: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError(f"voxel sizes must be 3 positive values, got {self.voxel_size}")
        if self.grid_to_world is None:
            self.grid_to_world = np.diag([*self.voxel_size, 1.0])
        self.grid_to_world = np.asarray(self.grid_to_world, dtype=np.float64)
        if self.grid_to_world.shape != (4, 4):
            raise ValueError("grid_to_world must be 4x4")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.voxel_size, self.grid_to_world.copy())


@dataclass(frozen=True)
class ScanRecord:
    subject_id: str
    path: str
    age_at_scan: float
    status: int
    time_years: float

    def __post_init__(self):
        if int(self.status) not in range(6):
            raise DatasetError(f"status must be in 0..5, got {self.status!r}")


@dataclass(frozen=True)
class ImagePair:
    """Ordered (base, target) scans of one subject.

    Covariates are taken from the base scan; ``delta_t`` is signed.
    """

    subject_id: str
    base_scan: ScanRecord
    target_scan: ScanRecord

    @property
    def age(self) -> float:
        return self.base_scan.age_at_scan

    @property
    def status(self) -> int:
        return self.base_scan.status

    @property
    def delta_t(self) -> float:
        return self.target_scan.time_years - self.base_scan.time_years

    @property
    def pair_id(self) -> str:
        return f"{self.subject_id}:{Path(self.base_scan.path).name}->{Path(self.target_scan.path).name}"


# --------------------------------------------------------------------------
# volume io


def _nifti_image(volume: Volume) -> nib.Nifti1Image:
    img = nib.Nifti1Image(np.asarray(volume.data, dtype=np.float32), volume.grid_to_world)
    img.header.set_zooms(volume.voxel_size)
    img.header.set_xyzt_units("mm")
    return img


def save_volume(volume: Volume, path: str | Path) -> Path:
    """Write ``volume`` as NIfTI or raw+JSON depending on the file suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = path.name
    if name.endswith(".nii.gz"):
        raw = _nifti_image(volume).to_bytes()
        path.write_bytes(gzip.compress(raw, mtime=0))
    elif name.endswith(".nii"):
        path.write_bytes(_nifti_image(volume).to_bytes())
    elif name.endswith(".raw"):
        data = np.ascontiguousarray(volume.data, dtype="<f4")
        path.write_bytes(data.tobytes(order="C"))
        sidecar = {
            "shape": list(data.shape),
            "voxel_size": list(volume.voxel_size),
            "grid_to_world": volume.grid_to_world.tolist(),
            "dtype": "<f4",
            "order": "C",
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
    else:
        raise VolumeFormatError(f"unsupported volume suffix: {path}")
    return path


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    name = path.name
    if name.endswith(".nii.gz") or name.endswith(".nii"):
        try:
            blob = path.read_bytes()
            if name.endswith(".gz"):
                blob = gzip.decompress(blob)
            img = nib.Nifti1Image.from_bytes(blob)
            data = np.asarray(img.get_fdata(dtype=np.float32), dtype=np.float32)
        except (OSError, EOFError, ValueError, nib.filebasedimages.ImageFileError) as exc:
            raise VolumeFormatError(f"cannot parse NIfTI file {path}: {exc}") from exc
        if data.ndim != 3:
            raise VolumeFormatError(f"{path}: expected a 3D image, got {data.shape}")
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
        return Volume(data, zooms, img.affine)
    if name.endswith(".raw"):
        sidecar_path = Path(str(path) + ".json")
        try:
            meta = json.loads(sidecar_path.read_text())
            shape = tuple(int(s) for s in meta["shape"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise VolumeFormatError(f"bad sidecar for {path}: {exc}") from exc
        blob = path.read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(blob) != expected:
            raise VolumeFormatError(
                f"{path}: {len(blob)} bytes on disk, sidecar shape {shape} needs {expected}"
            )
        data = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
        return Volume(data, tuple(meta["voxel_size"]), np.asarray(meta["grid_to_world"]))
    raise VolumeFormatError(f"unsupported volume suffix: {path}")


# --------------------------------------------------------------------------
# manifests


def write_manifest(records: Iterable[ScanRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow(
                [r.subject_id, r.path, repr(float(r.age_at_scan)), int(r.status), repr(float(r.time_years))]
            )


def read_manifest(path: str | Path) -> list[ScanRecord]:
    """Read a manifest CSV; extra columns are ignored, relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"{path}: manifest missing columns {missing}")
        records = []
        for row in reader:
            scan_path = Path(row["path"])
            if not scan_path.is_absolute():
                scan_path = path.parent / scan_path
            records.append(
                ScanRecord(
                    subject_id=row["subject_id"],
                    path=str(scan_path),
                    age_at_scan=float(row["age"]),
                    status=int(row["status"]),
                    time_years=float(row["time_years"]),
                )
            )
    return records


def group_by_subject(records: Iterable[ScanRecord]) -> "OrderedDict[str, list[ScanRecord]]":
    groups: OrderedDict[str, list[ScanRecord]] = OrderedDict()
    for r in records:
        groups.setdefault(r.subject_id, []).append(r)
    for scans in groups.values():
        scans.sort(key=lambda r: r.time_years)
    return groups


# --------------------------------------------------------------------------
# pairs


def build_pairs(records: Sequence[ScanRecord]) -> list[ImagePair]:
    """All ordered pairs (i, j) of each subject's scans, self-pairs included.

    A subject with n scans contributes n**2 pairs.
    """
    if not records:
        raise DatasetError("cannot build pairs from an empty record list")
    pairs = []
    for sid, scans in group_by_subject(records).items():
        for base, target in itertools.product(scans, repeat=2):
            pairs.append(ImagePair(sid, base, target))
    return pairs


def forward_pairs(pairs: Iterable[ImagePair], min_delta_t: float = 0.0) -> list[ImagePair]:
    """Pairs with delta_t > 0 and at least ``min_delta_t`` years."""
    return [p for p in pairs if p.delta_t > 0 and p.delta_t >= min_delta_t]


PAIR_COLUMNS = ("subject_id", "status", "base_path", "base_age", "base_time",
                "target_path", "target_age", "target_time")


def write_pairs(pairs: Iterable[ImagePair], path: str | Path) -> None:
    """Pair list as CSV; scan paths are stored relative to the CSV when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()

    def rel(p: str) -> str:
        try:
            return os.path.relpath(Path(p).resolve(), root)
        except ValueError:
            return str(p)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for p in pairs:
            b, t = p.base_scan, p.target_scan
            w.writerow([p.subject_id, int(b.status), rel(b.path), repr(float(b.age_at_scan)),
                        repr(float(b.time_years)), rel(t.path), repr(float(t.age_at_scan)),
                        repr(float(t.time_years))])


def read_pairs(path: str | Path) -> list[ImagePair]:
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PAIR_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"{path}: pair list missing columns {missing}")
        for row in reader:
            scans = []
            for side in ("base", "target"):
                p = Path(row[f"{side}_path"])
                p = p if p.is_absolute() else path.parent / p
                scans.append(ScanRecord(row["subject_id"], str(p), float(row[f"{side}_age"]),
                                        int(row["status"]), float(row[f"{side}_time"])))
            out.append(ImagePair(row["subject_id"], *scans))
    return out


# --------------------------------------------------------------------------
# covariates


@dataclass
class Standardizer:
    age_mean: float
    age_std: float
    dt_mean: float
    dt_std: float

    def __post_init__(self):
        if not (self.age_std > 0 and self.dt_std > 0):
            raise DatasetError("standardizer stds must be positive")

    def age(self, age):
        return (np.asarray(age, dtype=np.float64) - self.age_mean) / self.age_std

    def delta_t(self, dt):
        return (np.asarray(dt, dtype=np.float64) - self.dt_mean) / self.dt_std

    def inverse_age(self, z):
        return np.asarray(z, dtype=np.float64) * self.age_std + self.age_mean

    def inverse_delta_t(self, z):
        return np.asarray(z, dtype=np.float64) * self.dt_std + self.dt_mean

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Standardizer":
        d = json.loads(Path(path).read_text())
        return cls(**{k: float(d[k]) for k in ("age_mean", "age_std", "dt_mean", "dt_std")})


def _population_moments(values: np.ndarray, name: str) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2 or np.unique(values).size < 2:
        raise DatasetError(f"{name} has zero variance; cannot standardize")
    return float(values.mean()), float(values.std(ddof=0))


def fit_standardizer(train_pairs: Sequence[ImagePair]) -> Standardizer:
    """Population mean/std of age and delta_t, one row per training pair."""
    ages = np.array([p.age for p in train_pairs])
    dts = np.array([p.delta_t for p in train_pairs])
    am, asd = _population_moments(ages, "age")
    dm, dsd = _population_moments(dts, "delta_t")
    return Standardizer(am, asd, dm, dsd)


def apply_standardizer(std: Standardizer, pair: ImagePair) -> tuple[float, float, float]:
    """Return the (age, delta_t, status) conditioning triple for ``pair``.

    Status stays on its raw 0..5 scale.
    """
    return (float(std.age(pair.age)), float(std.delta_t(pair.delta_t)), float(pair.status))


def encode_status(label: str, scheme: str = "adni") -> int:
    try:
        mapping = STATUS_SCHEMES[scheme.lower()]
    except KeyError:
        raise DatasetError(f"unknown status scheme {scheme!r}") from None
    key = label.strip().upper()
    if key not in mapping:
        raise DatasetError(f"label {label!r} not in {scheme} scheme {list(mapping)}")
    return mapping[key]


# --------------------------------------------------------------------------
# splits


@dataclass
class Split:
    train: list[str]
    test: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        d = {"train": self.train, "val": self.val, "test": self.test}
        Path(path).write_text(json.dumps(d, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Split":
        d = json.loads(Path(path).read_text())
        return cls(list(d["train"]), list(d["test"]), list(d.get("val", [])))


def split_holdout(subjects: dict[str, int], per_category: int, seed: int) -> Split:
    """Hold out ``per_category`` random subjects from every status category.

    ``subjects`` maps subject id to its status category.
    """
    if per_category < 0:
        raise DatasetError("per_category must be >= 0")
    by_cat: dict[int, list[str]] = {}
    for sid in sorted(subjects):
        by_cat.setdefault(int(subjects[sid]), []).append(sid)
    rng = np.random.default_rng(seed)
    test = set()
    for cat in sorted(by_cat):
        members = by_cat[cat]
        if len(members) < per_category:
            raise DatasetError(
                f"category {cat} has {len(members)} subjects, cannot hold out {per_category}"
            )
        if per_category:
            test.update(rng.choice(members, size=per_category, replace=False).tolist())
    ordered = sorted(subjects)
    return Split([s for s in ordered if s not in test], [s for s in ordered if s in test])


def subject_status(records: Iterable[ScanRecord]) -> dict[str, int]:
    """Status of each subject at its first scan."""
    return {sid: scans[0].status for sid, scans in group_by_subject(records).items()}

