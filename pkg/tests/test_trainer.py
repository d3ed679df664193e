import numpy as np
import pytest
import torch

from mritraj.cvae import ConditioningVector, ModelConfig, decode, elbo_loss, encode
from mritraj.dataio import Volume, build_pairs, fit_standardizer, group_by_subject, load_volume
from mritraj.trainer import TrainConfig, TrainingDiverged, VolumeCache, init_model, train, validate

MODEL = ModelConfig(latent_dim=2, encoder_blocks=2, channels=(4, 4), groupnorm_groups=2, image_size=16)


@pytest.fixture(scope="module")
def data(tiny_cohort):
    _, cohort = tiny_cohort
    groups = list(group_by_subject(cohort.records).values())
    train_pairs = build_pairs([r for g in groups[:6] for r in g])
    val_pairs = build_pairs([r for g in groups[6:] for r in g])
    return train_pairs, val_pairs, fit_standardizer(train_pairs)


def cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=4, max_epochs=3, patience=2, steps_per_epoch=3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    for bad in [dict(batch_size=0), dict(learning_rate=0), dict(patience=0), dict(max_epochs=5, patience=5),
                dict(lr_schedule="step"), dict(steps_per_epoch=0), dict(kl_warmup_epochs=-1),
                dict(kl_warmup_epochs=10)]:
        with pytest.raises(ValueError):
            TrainConfig(**{"max_epochs": 10, **bad})


def test_cosine_schedule_endpoints():
    c = TrainConfig(learning_rate=1.0, max_epochs=11, patience=3, lr_schedule="cosine")
    assert c.lr_at(1) == pytest.approx(1.0) and c.lr_at(11) == pytest.approx(0.05)
    assert all(c.lr_at(e) >= c.lr_at(e + 1) for e in range(1, 11))
    assert TrainConfig().lr_at(500) == 1e-5


def test_kl_warmup_ramp():
    c = TrainConfig(max_epochs=10, patience=3, kl_warmup_epochs=4)
    assert [c.kl_scale(e) for e in range(1, 7)] == [0.0, 0.25, 0.5, 0.75, 1.0, 1.0]
    assert TrainConfig().kl_scale(1) == 1.0


def test_warmup_epochs_never_selected(data):
    train_pairs, val_pairs, std = data
    _, log = train(train_pairs, val_pairs, MODEL, cfg(max_epochs=4, patience=3, kl_warmup_epochs=2), std)
    assert len(log.rows) == 4
    assert log.best_epoch in (3, 4)
    assert log.rows[log.best_epoch - 1]["val_total"] == min(r["val_total"] for r in log.rows[2:])


def test_zero_epochs_returns_initialisation(data):
    train_pairs, val_pairs, std = data
    ckpt, log = train(train_pairs, val_pairs, MODEL, cfg(max_epochs=0), std)
    ref = init_model(MODEL, 0).state_dict()
    assert log.rows == []
    for k, v in ckpt.model.state_dict().items():
        assert torch.equal(v, ref[k])


def test_same_seed_same_first_epoch(data):
    train_pairs, val_pairs, std = data
    a = train(train_pairs, val_pairs, MODEL, cfg(max_epochs=2, patience=1), std)[1]
    b = train(train_pairs, val_pairs, MODEL, cfg(max_epochs=2, patience=1), std)[1]
    assert a.rows[0]["train_total"] == pytest.approx(b.rows[0]["train_total"], rel=1e-6)
    c = train(train_pairs, val_pairs, MODEL, cfg(max_epochs=2, patience=1, seed=1), std)[1]
    assert c.rows[0]["train_total"] != a.rows[0]["train_total"]


def test_resume_matches_uninterrupted(data, tmp_path):
    train_pairs, val_pairs, std = data
    c = cfg(max_epochs=4, patience=3)
    full, full_log = train(train_pairs, val_pairs, MODEL, c, std, out_dir=tmp_path / "full")
    train(train_pairs, val_pairs, MODEL, c, std, out_dir=tmp_path / "split", stop_after_epoch=2)
    resumed, res_log = train(train_pairs, val_pairs, MODEL, c, std, out_dir=tmp_path / "split",
                             resume=tmp_path / "split" / "last_state.pt")
    assert len(res_log.rows) == len(full_log.rows) == 4
    for a, b in zip(full_log.rows, res_log.rows):
        assert a["val_total"] == pytest.approx(b["val_total"], rel=1e-6)
    for k, v in full.model.state_dict().items():
        assert torch.allclose(v, resumed.model.state_dict()[k], rtol=1e-5, atol=1e-7)
    assert (tmp_path / "split" / "best.npz").exists() and (tmp_path / "split" / "train_log.csv").exists()


def test_best_epoch_has_minimum_validation_loss(data):
    train_pairs, val_pairs, std = data
    ckpt, log = train(train_pairs, val_pairs, MODEL, cfg(max_epochs=5, patience=4, learning_rate=3e-3), std)
    vals = [r["val_total"] for r in log.rows]
    assert log.best_epoch == 1 + int(np.argmin(vals))
    assert validate(ckpt, val_pairs)["total"] == pytest.approx(min(vals), rel=1e-5)


def test_validate_errors_and_duplicates(data):
    train_pairs, val_pairs, std = data
    model = init_model(MODEL, 3)
    with pytest.raises(ValueError):
        validate(model, [], std)
    once = validate(model, val_pairs, std)
    twice = validate(model, list(val_pairs) * 2, std)
    for k in once:
        assert twice[k] == pytest.approx(once[k], rel=1e-6)


def test_validate_matches_direct_recomputation(data):
    train_pairs, val_pairs, std = data
    model = init_model(MODEL, 4).eval()
    pairs = val_pairs[:5]
    direct = []
    for p in pairs:
        base, target = load_volume(p.base_scan.path), load_volume(p.target_scan.path)
        cond = ConditioningVector(float(std.age(p.age)), float(std.delta_t(p.delta_t)), float(p.status))
        g = encode(base, target, cond, model)
        pred = decode(base, g.mean, cond, model)
        direct.append(elbo_loss(target, pred, g))
    got = validate(model, pairs, std)
    ref = np.mean(direct, axis=0)
    assert [got["total"], got["recon"], got["kl"]] == pytest.approx(list(ref), rel=1e-4)


def test_divergence_raises_with_last_good(data):
    train_pairs, val_pairs, std = data

    def poisoned(path):
        v = load_volume(path)
        return v.with_data(np.full(v.shape, np.nan, np.float32))

    with pytest.raises(TrainingDiverged) as info:
        train(train_pairs, val_pairs, MODEL, cfg(), std, cache=VolumeCache(poisoned))
    assert info.value.last_good.model is not None


def test_overfits_single_pair(tiny_cohort):
    """Base from one subject, target from another, so the identity path alone cannot fit."""
    from mritraj.phantom import PhantomSpec, draw_anatomy, render_subject
    from mritraj.dataio import ImagePair, ScanRecord, Standardizer

    spec = PhantomSpec(grid_size=32)
    a = render_subject(draw_anatomy(spec, 0), 0.0).data
    b = render_subject(draw_anatomy(spec, 7), 0.0).data
    cache = VolumeCache(lambda p: Volume({"a": a, "b": b}[p]))
    pair = ImagePair("s", ScanRecord("s", "a", 70.0, 3, 0.0), ScanRecord("s", "b", 71.0, 3, 1.0))
    model_cfg = ModelConfig(latent_dim=4, encoder_blocks=4, channels=(8, 8, 8, 8), image_size=32)
    c = TrainConfig(learning_rate=3e-3, batch_size=1, max_epochs=200, patience=199)
    ckpt, _ = train([pair], [pair], model_cfg, c, Standardizer(70.0, 1.0, 1.0, 1.0), cache=cache)
    g = encode(Volume(a), Volume(b), ConditioningVector(0.0, 0.0, 3.0), ckpt.model)
    pred = decode(Volume(a), g.mean, ConditioningVector(0.0, 0.0, 3.0), ckpt.model).data
    assert np.mean((pred - b) ** 2) < 0.1 * b.var()
    assert np.mean((pred - b) ** 2) < 0.5 * np.mean((a - b) ** 2)
