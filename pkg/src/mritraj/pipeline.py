"""Stage functions behind the command line.  Each stage reads and writes
fixed locations under a run directory, so stages chain without editing."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, baselines
from .config import PipelineConfig, derive_seed
from .cvae import Checkpoint, load_checkpoint
from .dataio import (
    DatasetError,
    ImagePair,
    Split,
    Standardizer,
    Volume,
    build_pairs,
    fit_standardizer,
    forward_pairs,
    group_by_subject,
    load_volume,
    read_manifest,
    read_pairs,
    save_volume,
    split_holdout,
    subject_status,
    write_manifest,
    write_pairs,
)
from .phantom import generate_cohort, mean_anatomy_template
from .predictor import TrajectoryRequest, latent_vector, predict_future, save_trajectory, status_posterior, trajectory
from .registration import align_to_template
from .trainer import TrainLog, VolumeCache, train

log = logging.getLogger(__name__)

ROIS = ("ventricles", "hippocampus")


class RunLockedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunLayout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    cohort = property(lambda self: self.root / "cohort")
    registered = property(lambda self: self.root / "registered")
    data = property(lambda self: self.root / "data")
    train = property(lambda self: self.root / "train")
    baselines = property(lambda self: self.root / "baselines")
    eval = property(lambda self: self.root / "eval")
    flow = property(lambda self: self.root / "flow")
    logs = property(lambda self: self.root / "logs")
    checkpoint = property(lambda self: self.root / "train" / "best.npz")


class RunLock:
    """Exclusive lock file in the run directory.  A lock left by a dead
    process is taken over."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._holder_alive():
                    raise RunLockedError(f"run directory {self.path.parent} is locked by another process")
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise RunLockedError(f"could not acquire {self.path}")

    def _holder_alive(self) -> bool:
        try:
            pid = int(self.path.read_text().strip() or 0)
        except (OSError, ValueError):
            return False
        if pid <= 0:
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return False
        except PermissionError:
            return True
        return True

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# --------------------------------------------------------------------------
# data stages


def phantom_gen(cfg: PipelineConfig, layout: RunLayout):
    cohort = generate_cohort(cfg.phantom, layout.cohort)
    log.info("phantom cohort: %d subjects, %d scans -> %s", cfg.phantom.cohort_size,
             len(cohort.records), cohort.manifest_path)
    return cohort


def current_manifest(cfg: PipelineConfig, layout: RunLayout) -> Path:
    """Explicit manifest if configured, else registered scans, else the phantom cohort."""
    if cfg.paths.manifest:
        return Path(cfg.paths.manifest)
    for cand in (layout.registered / "manifest.csv", layout.cohort / "manifest.csv"):
        if cand.exists():
            return cand
    raise DatasetError(f"no manifest found in {layout.root}; run phantom-gen or set paths.manifest")


def masks_dir(cfg: PipelineConfig, layout: RunLayout) -> Path | None:
    if cfg.paths.masks_dir:
        return Path(cfg.paths.masks_dir)
    d = layout.cohort / "masks"
    return d if d.exists() else None


def register(cfg: PipelineConfig, layout: RunLayout) -> Path:
    """Rigidly align every scan of the source manifest to the template."""
    src = Path(cfg.paths.manifest) if cfg.paths.manifest else layout.cohort / "manifest.csv"
    if not src.exists():
        raise DatasetError(f"manifest {src} not found")
    records = read_manifest(src)
    out = layout.registered
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "transforms").mkdir(parents=True, exist_ok=True)
    if cfg.paths.template:
        template = load_volume(cfg.paths.template)
    else:
        template = mean_anatomy_template(cfg.phantom)
    save_volume(template, out / "template.nii.gz")
    new = []
    for r in records:
        name = Path(r.path).name
        stem = name.split(".")[0]
        rigid, aligned = align_to_template(load_volume(r.path), template, cfg.registration)
        rigid.save(out / "transforms" / f"{stem}.json")
        rel = Path("volumes") / name
        save_volume(aligned, out / rel)
        new.append(type(r)(r.subject_id, rel.as_posix(), r.age_at_scan, r.status, r.time_years))
        log.info("registered %s", name)
    write_manifest(new, out / "manifest.csv")
    return out / "manifest.csv"


def prep_pairs(cfg: PipelineConfig, layout: RunLayout) -> Split:
    """Subject-level hold-out, validation carve-out, pair lists and the
    covariate standardizer."""
    ev = cfg.evaluation
    records = read_manifest(current_manifest(cfg, layout))
    statuses = subject_status(records)
    outer = split_holdout(statuses, ev.holdout_per_category, ev.split_seed)
    inner = split_holdout({s: statuses[s] for s in outer.train}, ev.val_per_category,
                          derive_seed(ev.split_seed, "validation"))
    split = Split(inner.train, outer.test, inner.test)
    groups = {"train": split.train, "val": split.val, "test": split.test}
    layout.data.mkdir(parents=True, exist_ok=True)
    split.save(layout.data / "split.json")
    pairs = {}
    for name, subjects in groups.items():
        keep = set(subjects)
        recs = [r for r in records if r.subject_id in keep]
        pairs[name] = build_pairs(recs) if recs else []
        write_pairs(pairs[name], layout.data / f"pairs_{name}.csv")
    fit_standardizer(pairs["train"]).save(layout.data / "standardizer.json")
    log.info("pairs: %s", {k: len(v) for k, v in pairs.items()})
    return split


def _records_for(cfg: PipelineConfig, layout: RunLayout, subjects) -> list:
    keep = set(subjects)
    return [r for r in read_manifest(current_manifest(cfg, layout)) if r.subject_id in keep]


# --------------------------------------------------------------------------
# model stages


def train_stage(cfg: PipelineConfig, layout: RunLayout, resume: bool = False,
                stop_after_epoch: int | None = None) -> tuple[Checkpoint, TrainLog]:
    train_pairs = read_pairs(layout.data / "pairs_train.csv")
    val_pairs = read_pairs(layout.data / "pairs_val.csv")
    std = Standardizer.load(layout.data / "standardizer.json")
    state = layout.train / "last_state.pt"
    if resume and not state.exists():
        raise DatasetError(f"cannot resume: {state} does not exist")
    return train(train_pairs, val_pairs, cfg.model, cfg.train, std, out_dir=layout.train,
                 resume=state if resume else None, stop_after_epoch=stop_after_epoch)


def svd_path(layout: RunLayout, k: int) -> Path:
    return layout.baselines / f"svd_{k}.npz"


def baselines_stage(cfg: PipelineConfig, layout: RunLayout) -> dict:
    """Fit the SVD predictors and the VAE plus mixed-effects baseline on the
    training subjects."""
    split = Split.load(layout.data / "split.json")
    records = _records_for(cfg, layout, split.train)
    layout.baselines.mkdir(parents=True, exist_ok=True)
    cache = VolumeCache()
    fl = baselines.first_last_pairs(records, cfg.evaluation.exclude_single_scan_subjects)
    first = [cache(p.base_scan.path) for p in fl]
    last = [cache(p.target_scan.path) for p in fl]
    demo = np.array([[p.age, p.status, p.delta_t] for p in fl])
    fitted = {}
    for k in cfg.evaluation.svd_ranks:
        k_eff = min(k, len(fl))
        if k_eff < k:
            log.warning("SVD rank %d exceeds %d training subjects; using %d", k, len(fl), k_eff)
        model = baselines.fit_svd(first, last, demo, k_eff)
        model.save(svd_path(layout, k))
        fitted[f"svd{k}"] = model

    vc = cfg.vae
    vcfg = baselines.VaeConfig(latent_dim=vc.latent_dim, channels=tuple(vc.channels),
                               image_size=cache(records[0].path).shape[0])
    vae = baselines.train_vae([cache(r.path) for r in records], vcfg, epochs=vc.epochs,
                              lr=vc.learning_rate, batch_size=vc.batch_size, seed=vc.seed)
    baselines.save_vae(layout.baselines / "vae.npz", vae)
    lme = baselines.fit_vae_lme(vae, records, cache)
    lme.save(layout.baselines / "lme.json")
    fitted["vae"], fitted["lme"] = vae, lme
    return fitted


def _roi_masks(mdir: Path | None, subject: str) -> dict[str, np.ndarray]:
    out = {}
    if mdir is None:
        return out
    for roi in ROIS:
        hits = sorted(mdir.glob(f"{subject}_{roi}.*"))
        hits = [h for h in hits if not h.name.endswith(".json")]
        if hits:
            out[roi] = load_volume(hits[0]).data > 0.5
    return out


def evaluation_pairs(cfg: PipelineConfig, layout: RunLayout) -> list[ImagePair]:
    pairs = forward_pairs(read_pairs(layout.data / "pairs_test.csv"), cfg.evaluation.min_delta_t)
    if not pairs:
        raise DatasetError("no held-out forward pairs to evaluate")
    return pairs


def evaluate_stage(cfg: PipelineConfig, layout: RunLayout) -> analysis.MseReport:
    """Per-pair, per-ROI MSE of every method on held-out forward pairs, plus
    the status classifier on held-out status-0/5 pairs."""
    ckpt = load_checkpoint(layout.checkpoint)
    svds = {f"svd{k}": baselines.SvdModel.load(svd_path(layout, k)) for k in cfg.evaluation.svd_ranks}
    vae = baselines.load_vae(layout.baselines / "vae.npz")
    lme = baselines.LmeModel.load(layout.baselines / "lme.json")
    mdir = masks_dir(cfg, layout)
    cache = VolumeCache()
    report = analysis.MseReport()
    meta = []
    seed = derive_seed(cfg.seed, "evaluate")
    for i, p in enumerate(evaluation_pairs(cfg, layout)):
        base = load_volume(p.base_scan.path)
        truth = cache(p.target_scan.path)
        preds = {
            "cvae": predict_future(ckpt, base, p.age, p.status, p.delta_t,
                                   latent_mode=cfg.evaluation.latent_mode, seed=seed + i),
            "vae_lme": baselines.predict_vae_lme(lme, vae, base, p.status, p.delta_t),
            "identity": baselines.identity_predict(base),
        }
        for name, model in svds.items():
            preds[name] = baselines.predict_svd(model, base, p.age, p.status, p.delta_t)
        rois = {"whole": None, **_roi_masks(mdir, p.subject_id)}
        for method, pred in preds.items():
            for roi, mask in rois.items():
                report.add(p.pair_id, method, roi, analysis.roi_mse(pred, truth, mask))
        meta.append((p.pair_id, p.subject_id, p.status, p.age, p.delta_t))

    layout.eval.mkdir(parents=True, exist_ok=True)
    report.write_csv(layout.eval / "mse_report.csv")
    with open(layout.eval / "pairs.csv", "w") as fh:
        fh.write("pair_id,subject_id,status,age,delta_t\n")
        for row in meta:
            fh.write(",".join(str(v) for v in row) + "\n")
    summary = report.summary()
    summary["classifier"] = classify_heldout(ckpt, cfg, layout, cache)
    (layout.eval / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    analysis.mse_distribution_plot(report, layout.eval / "mse_distribution.png")
    return report


def classify_heldout(ckpt: Checkpoint, cfg: PipelineConfig, layout: RunLayout, cache=None,
                     hypotheses=(0, 5)) -> dict:
    cache = cache or VolumeCache()
    pairs = [p for p in evaluation_pairs(cfg, layout) if p.status in hypotheses]
    rows = []
    for p in pairs:
        res = status_posterior(ckpt, Volume(cache(p.base_scan.path)), Volume(cache(p.target_scan.path)),
                               p.age, p.delta_t, hypotheses)
        p_true = res.posterior[p.status]
        rows.append({"pair_id": p.pair_id, "status": p.status, "p_null": res.p_null, "correct": p_true > 0.5})
    acc = float(np.mean([r["correct"] for r in rows])) if rows else None
    return {"hypotheses": list(hypotheses), "accuracy": acc, "pairs": rows}


# --------------------------------------------------------------------------
# trajectories and flow


def _flowviz_subject(cfg: PipelineConfig, layout: RunLayout) -> str:
    if cfg.evaluation.flowviz_subject:
        return cfg.evaluation.flowviz_subject
    split = Split.load(layout.data / "split.json")
    records = _records_for(cfg, layout, split.test or split.train)
    status = subject_status(records)
    return max(sorted(status), key=lambda s: status[s])


def ventricle_proxy(volume, mask) -> float:
    """Mean intensity inside the ventricle ROI; bright fluid filling the ROI raises it."""
    return float(np.asarray(getattr(volume, "data", volume))[mask].mean())


def flowviz_stage(cfg: PipelineConfig, layout: RunLayout, subject: str | None = None) -> dict:
    """Multi-horizon trajectory for one subject, flow between consecutive
    horizons, divergence maps and overlay figures."""
    ckpt = load_checkpoint(layout.checkpoint)
    subject = subject or _flowviz_subject(cfg, layout)
    scans = group_by_subject(read_manifest(current_manifest(cfg, layout))).get(subject)
    if not scans:
        raise DatasetError(f"subject {subject} not in manifest")
    first = scans[0]
    base = load_volume(first.path)
    horizons = [float(h) for h in cfg.evaluation.horizons]
    req = TrajectoryRequest(base, first.age_at_scan, first.status, horizons,
                            latent_mode=cfg.evaluation.latent_mode, seed=derive_seed(cfg.seed, "flowviz"))
    vols = trajectory(ckpt, req)
    z = latent_vector(ckpt.model.cfg.latent_dim, req.latent_mode, req.seed, req.latent)
    out = layout.flow
    save_trajectory(vols, req, z, out / "trajectory")
    masks = _roi_masks(masks_dir(cfg, layout), subject)
    vmask = masks.get("ventricles")
    if vmask is None:
        vmask = np.ones(base.shape, dtype=bool)
    steps = []
    divs = []
    for k in range(1, len(vols)):
        flow = analysis.optical_flow(vols[k - 1].data, vols[k].data, alpha=cfg.evaluation.flow_alpha,
                                     iters=cfg.evaluation.flow_iters)
        div = analysis.divergence(flow)
        divs.append(div)
        save_volume(base.with_data(div.astype(np.float32)), out / f"divergence_{k:02d}.nii.gz")
        steps.append({"from": horizons[k - 1], "to": horizons[k],
                      "mean_divergence_ventricles": float(div[vmask].mean())})
    proxy = [ventricle_proxy(v, vmask) for v in vols]
    for k, st in enumerate(steps, start=1):
        st["proxy_change"] = proxy[k] - proxy[k - 1]
    result = {"subject": subject, "status": first.status, "horizons": horizons, "proxy": proxy, "steps": steps,
              "positive_divergence_steps": sum(s["mean_divergence_ventricles"] > 0 for s in steps),
              "nondecreasing_proxy_steps": sum(s["proxy_change"] >= 0 for s in steps)}
    (out / "flow_summary.json").write_text(json.dumps(result, indent=2) + "\n")

    if divs:
        zc = int(np.argmax(vmask.sum(axis=(0, 1)))) if vmask.any() else base.shape[2] // 2
        vmax = max(float(np.abs(d[..., zc]).max()) for d in divs) or 1.0
        analysis.overlay_strip([v.data[..., zc] for v in vols[1:]], [d[..., zc] for d in divs],
                               out / "divergence_overlay.png",
                               titles=[f"{s['to']:g} y" for s in steps], vmax=vmax)
    return result


# --------------------------------------------------------------------------
# report


def report_stage(cfg: PipelineConfig, layout: RunLayout) -> Path:
    lines = ["# Run report", ""]
    summary_path = layout.eval / "summary.json"
    if summary_path.exists():
        s = json.loads(summary_path.read_text())
        lines += [f"Held-out forward pairs: {s['n_pairs']}", "", "## Win rates (strict)", ""]
        for roi, rates in s["win_rates"]["strict"].items():
            methods = sorted(rates)
            lines.append(f"### {roi}")
            lines.append("| method | win rate | median MSE |")
            lines.append("|---|---|---|")
            for m in methods:
                lines.append(f"| {m} | {rates[m]:.3f} | {s['median_mse'][roi][m]:.3g} |")
            lines.append("")
        clf = s.get("classifier") or {}
        if clf.get("accuracy") is not None:
            lines += [f"Status classifier accuracy ({len(clf['pairs'])} pairs): {clf['accuracy']:.3f}", ""]
        lines += ["![MSE distributions](eval/mse_distribution.png)", ""]
    flow_path = layout.flow / "flow_summary.json"
    if flow_path.exists():
        f = json.loads(flow_path.read_text())
        n = len(f["steps"])
        lines += ["## Trajectory", "",
                  f"Subject {f['subject']} (status {f['status']}): positive ventricle divergence in "
                  f"{f['positive_divergence_steps']}/{n} steps, non-decreasing ventricle proxy in "
                  f"{f['nondecreasing_proxy_steps']}/{n} steps.", "",
                  "![divergence](flow/divergence_overlay.png)", ""]
    train_log = layout.train / "train_log.csv"
    if train_log.exists():
        lines += [f"Training log: `{train_log.relative_to(layout.root)}`", ""]
    out = layout.root / "report.md"
    out.write_text("\n".join(lines))
    return out


def run_all(cfg: PipelineConfig, layout: RunLayout) -> Path:
    phantom_gen(cfg, layout)
    prep_pairs(cfg, layout)
    train_stage(cfg, layout)
    baselines_stage(cfg, layout)
    evaluate_stage(cfg, layout)
    flowviz_stage(cfg, layout)
    return report_stage(cfg, layout)
