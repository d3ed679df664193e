"""Behaviour of the CVAE trained by the cached benchmark run."""
import numpy as np
import pytest

from mritraj import pipeline
from mritraj.cvae import load_checkpoint
from mritraj.dataio import Split, group_by_subject, load_volume, read_manifest
from mritraj.predictor import latent_vector, predict_future, status_posterior


@pytest.fixture(scope="module")
def trained(desk_run):
    cfg, layout, _ = desk_run
    ckpt = load_checkpoint(layout.checkpoint)
    split = Split.load(layout.data / "split.json")
    scans = group_by_subject(read_manifest(layout.cohort / "manifest.csv"))
    test_scans = {s: scans[s] for s in split.test}
    return cfg, layout, ckpt, test_scans


def _ventricles(layout, subject):
    return load_volume(layout.cohort / "masks" / f"{subject}_ventricles.nii.gz").data > 0.5


def test_status_changes_ventricle_prediction(trained):
    _, layout, ckpt, scans = trained
    higher = []
    for sid, recs in scans.items():
        base = load_volume(recs[0].path)
        mask = _ventricles(layout, sid)
        p5 = predict_future(ckpt, base, recs[0].age_at_scan, 5, 5.0, "zero")
        p0 = predict_future(ckpt, base, recs[0].age_at_scan, 0, 5.0, "zero")
        higher.append(pipeline.ventricle_proxy(p5, mask) > pipeline.ventricle_proxy(p0, mask))
    assert np.mean(higher) >= 0.9


def test_zero_interval_stays_near_base(trained):
    _, _, ckpt, scans = trained
    ratios = []
    for recs in scans.values():
        if len(recs) < 2:
            continue
        base, later = load_volume(recs[0].path), load_volume(recs[1].path)
        pred = predict_future(ckpt, base, recs[0].age_at_scan, recs[0].status, 0.0, "zero")
        drift = np.mean((pred.data - base.data) ** 2)
        revisit = np.mean((later.data - base.data) ** 2)
        ratios.append(drift / revisit)
    assert np.median(ratios) < 0.5


def test_latent_is_not_ignored(trained):
    _, _, ckpt, scans = trained
    recs = next(iter(scans.values()))
    base = load_volume(recs[0].path)
    outs = [predict_future(ckpt, base, recs[0].age_at_scan, 3, 4.0, "sampled", seed=s).data for s in range(3)]
    zero = predict_future(ckpt, base, recs[0].age_at_scan, 3, 4.0, "zero").data
    spread = np.mean([np.mean((o - zero) ** 2) for o in outs])
    assert spread > 1e-6
    assert not np.allclose(latent_vector(ckpt.model.cfg.latent_dim, "sampled", 0), 0)


def test_all_status_posterior_normalised(trained):
    _, _, ckpt, scans = trained
    recs = next(r for r in scans.values() if len(r) >= 2)
    a, b = load_volume(recs[0].path), load_volume(recs[-1].path)
    res = status_posterior(ckpt, a, b, recs[0].age_at_scan, recs[-1].age_at_scan - recs[0].age_at_scan,
                           hypotheses=tuple(range(6)))
    assert sum(res.posterior.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(0 <= p <= 1 for p in res.posterior.values())
