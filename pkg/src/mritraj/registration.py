"""Template registration: affine fit with a linear contrast model, then
projection of the affine onto the closest rigid transform.

Transforms act on world (mm) coordinates and map *template* points to
*image* points, ``y = L x + t``.  Pulling image intensities onto the template
grid therefore samples the image at ``L x + t``; see :func:`resample`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataio import Volume

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


@dataclass
class AffineTransform:
    linear: np.ndarray
    translation: np.ndarray
    kind = "affine"

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(self.linear)) < 1e-12:
            raise ValueError("linear part is singular")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = self.linear, self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)

    def to_dict(self) -> dict:
        return {
            "linear": self.linear.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "kind": self.kind,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class RigidTransform(AffineTransform):
    kind = "rigid"

    def __post_init__(self):
        super().__post_init__()
        r = self.linear
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.linear


def load_transform(path) -> AffineTransform:
    d = json.loads(Path(path).read_text())
    cls = RigidTransform if d.get("kind") == "rigid" else AffineTransform
    return cls(np.asarray(d["linear"]).reshape(3, 3), d["translation"])


@dataclass
class RegistrationConfig:
    max_iters: int = 300
    linear_step: float = 0.02
    translation_step: float = 1.0  # voxels
    tolerance: float = 1e-7
    min_step_factor: float = 1e-4
    max_rejections: int = 40
    interpolation: str = "trilinear"

    def __post_init__(self):
        if self.max_iters < 1 or self.linear_step <= 0 or self.translation_step <= 0:
            raise ValueError("max_iters and step sizes must be positive")
        if self.interpolation != "trilinear":
            raise ValueError("only trilinear interpolation is supported")


# --------------------------------------------------------------------------
# grids and sampling


def world_coordinates(volume: Volume) -> np.ndarray:
    """(N, 3) world coordinates of every voxel, C order."""
    idx = np.indices(volume.shape, dtype=np.float64).reshape(3, -1).T
    g = volume.grid_to_world
    return idx @ g[:3, :3].T + g[:3, 3]


def _world_to_index(volume: Volume, points: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(volume.grid_to_world)
    return (points @ inv[:3, :3].T + inv[:3, 3]).T


def _sample(data: np.ndarray, index_coords: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(data, index_coords, order=1, mode="constant", cval=0.0)


def resample(volume: Volume, transform: AffineTransform, target: Volume | None = None) -> Volume:
    """Pull ``volume`` onto ``target``'s grid: out(x) = volume(transform(x)).

    Trilinear interpolation; samples outside the source field of view are 0.
    """
    target = target if target is not None else volume
    pts = transform.apply(world_coordinates(target))
    vals = _sample(np.asarray(volume.data, dtype=np.float64), _world_to_index(volume, pts))
    return target.with_data(vals.reshape(target.shape).astype(np.float32))


def crop_downsample(volume: Volume, crop_box, factor: int) -> Volume:
    """Crop to ``crop_box`` (three (start, stop) index ranges) then block-average
    by ``factor`` along every axis."""
    box = [tuple(int(v) for v in b) for b in crop_box]
    if len(box) != 3:
        raise ValueError("crop_box needs three (start, stop) ranges")
    for (lo, hi), n in zip(box, volume.shape):
        if not 0 <= lo < hi <= n:
            raise ValueError(f"crop range {(lo, hi)} outside axis of length {n}")
    factor = int(factor)
    sizes = [hi - lo for lo, hi in box]
    if factor < 1 or any(s % factor for s in sizes):
        raise ValueError(f"factor {factor} does not divide cropped size {sizes}")
    data = np.asarray(volume.data, dtype=np.float64)[tuple(slice(lo, hi) for lo, hi in box)]
    m = [s // factor for s in sizes]
    out = data.reshape(m[0], factor, m[1], factor, m[2], factor).mean(axis=(1, 3, 5))
    g = volume.grid_to_world.copy()
    start = np.array([lo for lo, _ in box], dtype=np.float64) + (factor - 1) / 2.0
    new = np.eye(4)
    new[:3, :3] = g[:3, :3] * factor
    new[:3, 3] = g[:3, :3] @ start + g[:3, 3]
    vs = tuple(v * factor for v in volume.voxel_size)
    return Volume(out.astype(np.float32), vs, new)


# --------------------------------------------------------------------------
# rigid projection


def _coordinate_moments(grid) -> tuple[np.ndarray, np.ndarray, int]:
    pts = world_coordinates(grid) if isinstance(grid, Volume) else np.asarray(grid, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("grid must be a Volume or an (N, 3) point array")
    mean = pts.mean(axis=0)
    centered = pts - mean
    return mean, centered.T @ centered, len(pts)


def project_to_rigid(affine: AffineTransform, grid) -> RigidTransform:
    """Closest rigid transform to ``affine`` in summed squared point error.

    Minimizes sum_x |(L x + t) - (R x + s)|^2 over R in SO(3) and s, for x
    ranging over ``grid`` (a Volume's voxel centers or an (N, 3) array).
    """
    mean, cov, n = _coordinate_moments(grid)
    if n < 4 or np.linalg.matrix_rank(cov, tol=1e-9 * max(np.trace(cov), 1e-300)) < 3:
        raise ValueError("grid points are coplanar; rigid projection undefined")
    L = affine.linear
    u, _, vt = np.linalg.svd(L @ cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    shift = (L - rot) @ mean + affine.translation
    return RigidTransform(rot, shift)


def point_sse(a: AffineTransform, b: AffineTransform, grid) -> float:
    """Sum over grid points of |a(x) - b(x)|^2."""
    pts = world_coordinates(grid) if isinstance(grid, Volume) else np.asarray(grid, dtype=np.float64)
    return float(np.sum((a.apply(pts) - b.apply(pts)) ** 2))


# --------------------------------------------------------------------------
# affine registration


def fit_contrast(warped: np.ndarray, image: np.ndarray) -> tuple[float, float]:
    """Least-squares gain and offset with gain * warped + offset ~ image."""
    w = warped.ravel()
    var = w.var()
    if var <= 1e-20:
        raise RegistrationError("warped template is constant; contrast fit is degenerate")
    gain = float(np.mean((w - w.mean()) * (image.ravel() - image.mean())) / var)
    return gain, float(image.mean() - gain * w.mean())


class _Objective:
    """SSD between the contrast-adjusted warped template and the image, as a
    function of the image-to-template map q = B (p - p0) + p0 + c."""

    def __init__(self, template: Volume, image: Volume):
        self.tdata = np.asarray(template.data, dtype=np.float64)
        self.tgrad = np.stack(np.gradient(self.tdata))
        self.template = template
        self.image = np.asarray(image.data, dtype=np.float64).ravel()
        self.points = world_coordinates(image)
        self.center = self.points.mean(axis=0)
        self.rel = self.points - self.center
        self.radius = float(np.sqrt((self.rel**2).sum(axis=1).mean()))
        tinv = np.linalg.inv(template.grid_to_world)
        self.t_lin_inv = tinv[:3, :3]

    def __call__(self, B, c, need_grad=True):
        q = self.rel @ B.T + self.center + c
        idx = _world_to_index(self.template, q)
        warped = _sample(self.tdata, idx)
        gain, offset = fit_contrast(warped, self.image)
        r = gain * warped + offset - self.image
        loss = float(r @ r)
        if not need_grad:
            return loss, None, None
        grad_idx = np.stack([_sample(g, idx) for g in self.tgrad], axis=1)
        grad_q = grad_idx @ self.t_lin_inv  # d T / d q (row vectors)
        w = 2.0 * gain * r
        g_c = w @ grad_q
        g_B = (grad_q * w[:, None]).T @ self.rel
        return loss, g_B, g_c


def _to_transform(obj: _Objective, B, c) -> AffineTransform:
    # q = B p + (c + p0 - B p0) maps image -> template; invert for template -> image
    inv = np.linalg.inv(B)
    t_img2tmp = c + obj.center - B @ obj.center
    return AffineTransform(inv, -inv @ t_img2tmp)


def _optimize(template: Volume, image: Volume, cfg: RegistrationConfig, rigid: bool):
    if np.ptp(image.data) == 0 or np.ptp(template.data) == 0:
        raise RegistrationError("constant image; contrast fit is degenerate")
    obj = _Objective(template, image)
    B, c = np.eye(3), np.zeros(3)
    loss, gB, gc = obj(B, c)
    history = [loss]
    h, rejections = 1.0, 0
    vox = float(np.mean(image.voxel_size))
    pts = obj.rel
    for it in range(cfg.max_iters):
        # linear block is steered in units of displacement at the grid's RMS radius
        nB, nc = np.linalg.norm(gB) / obj.radius, np.linalg.norm(gc)
        if nB + nc == 0:
            break
        dB = -(gB / obj.radius) / max(nB, 1e-300) * cfg.linear_step if nB > 0 else 0 * gB
        dc = -gc / max(nc, 1e-300) * cfg.translation_step * vox if nc > 0 else 0 * gc
        while True:
            B_try, c_try = B + h * dB, c + h * dc
            if rigid:
                proj = project_to_rigid(AffineTransform(B_try, c_try), pts)
                B_try, c_try = proj.linear, proj.translation
            try:
                trial, _, _ = obj(B_try, c_try, need_grad=False)
            except RegistrationError:
                trial = np.inf
            if np.isfinite(trial) and trial < loss:
                break
            h *= 0.5
            rejections += 1
            if rejections >= cfg.max_rejections or h < cfg.min_step_factor:
                return _to_transform(obj, B, c), history
        rejections = 0
        rel_gain = (loss - trial) / max(loss, 1e-300)
        B, c = B_try, c_try
        loss, gB, gc = obj(B, c)
        if not np.isfinite(loss):
            raise RegistrationError(f"non-finite SSD at iteration {it}")
        history.append(loss)
        h = min(h * 1.5, 4.0)
        if rel_gain < cfg.tolerance:
            break
    if abs(np.linalg.det(B)) < 1e-6:
        raise RegistrationError(f"registration collapsed (det={np.linalg.det(B):.3g}); history={history[-5:]}")
    return _to_transform(obj, B, c), history


def register_affine(template: Volume, image: Volume, cfg: RegistrationConfig | None = None,
                    return_history: bool = False):
    """Affine map template -> image minimizing contrast-adjusted SSD.

    Each objective evaluation refits a (gain, offset) contrast map in closed
    form.  Steps that would increase the SSD are rejected and the step is
    halved, so the accepted SSD history is non-increasing.
    """
    tr, history = _optimize(template, image, cfg or RegistrationConfig(), rigid=False)
    return (tr, history) if return_history else tr


def register_rigid(template: Volume, image: Volume, cfg: RegistrationConfig | None = None,
                   return_history: bool = False):
    """Direct rigid registration (projected gradient), for comparison with
    affine-then-project."""
    tr, history = _optimize(template, image, cfg or RegistrationConfig(), rigid=True)
    rigid = project_to_rigid(tr, template)
    return (rigid, history) if return_history else rigid


def align_to_template(image: Volume, template: Volume, cfg: RegistrationConfig | None = None):
    """Affine registration, projection onto the closest rigid transform, and
    resampling of ``image`` onto the template grid.  Returns (rigid, aligned)."""
    affine = register_affine(template, image, cfg)
    rigid = project_to_rigid(affine, template)
    return rigid, resample(image, rigid, template)
