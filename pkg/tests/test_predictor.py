import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import posterior_null_direct
from mritraj.cvae import Checkpoint, DoubleEncoderCVAE, ModelConfig
from mritraj.dataio import Standardizer, Volume, load_volume
from mritraj.predictor import (
    PredictionError,
    TrajectoryRequest,
    conditioning,
    latent_vector,
    posterior_from_means,
    predict_future,
    save_trajectory,
    status_posterior,
    trajectory,
)

STD = Standardizer(72.0, 6.0, 0.0, 1.5)


@pytest.fixture(scope="module")
def ckpt():
    import torch

    torch.manual_seed(0)
    cfg = ModelConfig(latent_dim=3, encoder_blocks=2, channels=(4, 4), groupnorm_groups=2, image_size=8)
    return Checkpoint(DoubleEncoderCVAE(cfg).eval(), STD)


@pytest.fixture
def base():
    return Volume(np.random.default_rng(0).random((8, 8, 8)).astype(np.float32), (2.0, 2.0, 2.0))


# posterior


def test_identical_means_give_half():
    mu = np.array([0.3, -1.2])
    assert posterior_from_means({0: mu, 5: mu}, (0, 5)).p_null == 0.5


def test_closed_form_value():
    res = posterior_from_means({0: np.zeros(10), 5: np.r_[1.0, 1.0, np.zeros(8)]}, (0, 5))
    assert abs(res.p_null - 1 / (1 + math.exp(-1))) < 1e-12


def test_large_gap_without_overflow():
    res = posterior_from_means({0: np.zeros(2), 5: np.array([10.0, 10.0])}, (0, 5))
    assert res.p_null == 1.0 and res.posterior[5] == pytest.approx(0.0, abs=1e-40)
    assert np.isfinite(res.log_f[0]) and np.isfinite(res.log_f[5])
    res = posterior_from_means({0: np.full(4, 30.0), 5: np.full(4, 31.0)}, (0, 5))
    assert 0 < res.p_null < 1 or res.p_null == 1.0


means = st.lists(st.floats(-6, 6), min_size=3, max_size=3).map(np.array)


@given(means, means)
def test_posterior_properties(m0, m5):
    res = posterior_from_means({0: m0, 5: m5}, (0, 5))
    assert res.posterior[0] + res.posterior[5] == 1.0
    swapped = posterior_from_means({0: m5, 5: m0}, (0, 5))
    assert swapped.p_null == pytest.approx(1 - res.p_null, abs=1e-12)
    assert res.p_null == pytest.approx(posterior_null_direct(m0, m5), abs=1e-12)


@given(st.floats(-30, 30), st.floats(0.01, 5))
def test_posterior_decreasing_in_gap(d, step):
    def p(gap):
        # |mu_0|^2 - |mu_5|^2 = gap with mu_5 fixed
        m5 = np.array([2.0, 0.0])
        m0 = np.array([math.sqrt(4.0 + gap) if 4.0 + gap >= 0 else 0.0, 0.0])
        return posterior_from_means({0: m0, 5: m5}, (0, 5)).p_null

    if 4.0 + d < 0:
        return
    assert p(d + step) <= p(d)


def test_n_way_extension_normalises():
    mus = {h: np.full(2, 0.2 * h) for h in range(6)}
    res = posterior_from_means(mus, tuple(range(6)))
    assert sum(res.posterior.values()) == pytest.approx(1.0, abs=1e-12)
    assert max(res.posterior, key=res.posterior.get) == 0


def test_non_finite_mean_rejected():
    with pytest.raises(PredictionError):
        posterior_from_means({0: np.array([np.nan]), 5: np.zeros(1)}, (0, 5))


def test_status_posterior_output(ckpt, base):
    res = status_posterior(ckpt, base, base.with_data(base.data * 1.1), 70.0, 1.0)
    d = res.to_dict()
    assert set(d) >= {"mu_null", "mu_alt", "log_f_null", "log_f_alt", "p_null"}
    assert 0 < d["p_null"] < 1 and len(d["mu_null"]) == 3
    with pytest.raises(PredictionError):
        status_posterior(ckpt, base, None, 70.0, 1.0)


# prediction and trajectories


def test_missing_standardizer(base):
    bare = Checkpoint(DoubleEncoderCVAE(ModelConfig(latent_dim=3, encoder_blocks=2, channels=(4, 4),
                                                    groupnorm_groups=2, image_size=8)).eval())
    with pytest.raises(PredictionError):
        predict_future(bare, base, 70.0, 0, 1.0)


def test_extrapolation_warns(caplog):
    with caplog.at_level(logging.WARNING):
        conditioning(STD, 70.0, 5, 10.0)
    assert "extrapolating" in caplog.text
    with pytest.raises(PredictionError):
        conditioning(STD, 70.0, 5, float("inf"))


def test_latent_modes():
    assert np.array_equal(latent_vector(4, "zero"), np.zeros(4))
    assert np.array_equal(latent_vector(4, "sampled", 3), latent_vector(4, "sampled", 3))
    with pytest.raises(PredictionError):
        latent_vector(4, "explicit", latent=np.zeros(3))
    with pytest.raises(ValueError):
        TrajectoryRequest(Volume(np.zeros((8, 8, 8))), 70, 0, [1.0], latent_mode="explicit")
    with pytest.raises(ValueError):
        TrajectoryRequest(Volume(np.zeros((8, 8, 8))), 70, 0, [float("nan")])


def test_same_seed_same_volume(ckpt, base):
    a = predict_future(ckpt, base, 70.0, 5, 2.0, seed=4)
    b = predict_future(ckpt, base, 70.0, 5, 2.0, seed=4)
    assert np.array_equal(a.data, b.data)


def test_trajectory_consistency(ckpt, base):
    (only,) = trajectory(ckpt, TrajectoryRequest(base, 70.0, 5, [0.0], seed=2))
    assert np.array_equal(only.data, predict_future(ckpt, base, 70.0, 5, 0.0, seed=2).data)
    hs = [1.0, 4.0, -1.0, 2.5]
    fwd = trajectory(ckpt, TrajectoryRequest(base, 70.0, 5, hs, seed=2))
    rev = trajectory(ckpt, TrajectoryRequest(base, 70.0, 5, hs[::-1], seed=2))
    for a, b in zip(fwd, rev[::-1]):
        assert np.array_equal(a.data, b.data)
    again = trajectory(ckpt, TrajectoryRequest(base, 70.0, 5, hs, seed=2))
    assert all(np.array_equal(a.data, b.data) for a, b in zip(fwd, again))


def test_explicit_latent(ckpt, base):
    z = np.array([0.5, -0.5, 1.0])
    a = trajectory(ckpt, TrajectoryRequest(base, 70.0, 3, [1.0], latent_mode="explicit", latent=z))[0]
    assert np.array_equal(a.data, predict_future(ckpt, base, 70.0, 3, 1.0, "explicit", latent=z).data)


def test_save_trajectory(ckpt, base, tmp_path):
    req = TrajectoryRequest(base, 70.0, 5, [float(h) for h in range(1, 11)], seed=9)
    vols = trajectory(ckpt, req)
    idx = save_trajectory(vols, req, latent_vector(3, "sampled", 9), tmp_path)
    d = json.loads(idx.read_text())
    assert len(d["horizons"]) == 10 and d["seed"] == 9 and len(d["latent"]) == 3
    first = load_volume(tmp_path / d["horizons"]["1.0"])
    assert np.array_equal(first.data, vols[0].data)
