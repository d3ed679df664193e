import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import kl_monte_carlo
from mritraj.cvae import (
    ConditioningVector,
    DoubleEncoderCVAE,
    LatentGaussian,
    ModelConfig,
    decode,
    elbo_loss,
    elbo_terms_t,
    encode,
    kl_divergence,
    kl_divergence_t,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)
from mritraj.dataio import Standardizer, Volume

COND = ConditioningVector(0.3, -0.5, 2.0)


def tiny_cfg(**kw):
    base = dict(latent_dim=3, encoder_blocks=2, channels=(4, 4), groupnorm_groups=2, image_size=8)
    base.update(kw)
    return ModelConfig(**base)


def vol(n, seed=0):
    return Volume(np.random.default_rng(seed).random((n, n, n)).astype(np.float32))


# configuration and shapes


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=30)
    with pytest.raises(ValueError):
        ModelConfig(channels=(16, 32))
    with pytest.raises(ValueError):
        ModelConfig(channels=(6, 32, 64, 64))
    cfg = ModelConfig()
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_default_latent_dimension():
    cfg = ModelConfig(image_size=32, channels=(4, 4, 4, 4))
    g = encode(vol(32), vol(32, 1), COND, DoubleEncoderCVAE(cfg).eval())
    assert g.mean.shape == (10,) and g.logvar.shape == (10,)


def test_encoder_spatial_trace_80():
    cfg = ModelConfig()
    model = DoubleEncoderCVAE(cfg).eval()
    sizes = []
    hooks = [b[1].register_forward_hook(lambda m, i, o: sizes.append(o.shape[-1])) for b in model.encoder.blocks]
    with torch.no_grad():
        model.encode(torch.zeros(1, 1, 80, 80, 80), torch.zeros(1, 1, 80, 80, 80), COND.as_tensor())
    for h in hooks:
        h.remove()
    # each block's convs run before its pool: 80, 40, 20, 10 then pooled to 5
    assert sizes == [80, 40, 20, 10]
    assert cfg.bottom_size == 5 and model.encoder.head.kernel_size == (5, 5, 5)


@pytest.mark.parametrize("n,channels", [(32, (4, 4, 8, 8)), (80, (4, 4, 4, 4))])
def test_decode_shape(n, channels):
    model = DoubleEncoderCVAE(ModelConfig(image_size=n, channels=channels)).eval()
    out = decode(vol(n), np.zeros(10), COND, model)
    assert out.shape == (n, n, n) and out.data.dtype == np.float32


def test_zero_final_encoder_layer():
    model = DoubleEncoderCVAE(tiny_cfg()).eval()
    torch.nn.init.zeros_(model.encoder.head.weight)
    torch.nn.init.zeros_(model.encoder.head.bias)
    g = encode(vol(8), vol(8, 3), COND, model)
    assert np.all(g.mean == 0) and np.all(g.logvar == 0)


def test_zero_network_without_skip_outputs_zero():
    model = DoubleEncoderCVAE(tiny_cfg(residual=False)).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    assert np.all(decode(vol(8), np.ones(3), COND, model).data == 0)


def test_shapes_do_not_depend_on_weights():
    a, b = DoubleEncoderCVAE(tiny_cfg()).eval(), DoubleEncoderCVAE(tiny_cfg()).eval()
    with torch.no_grad():
        for p in b.parameters():
            p.mul_(7.0)
    assert decode(vol(8), np.zeros(3), COND, a).shape == decode(vol(8), np.zeros(3), COND, b).shape


def test_grid_mismatch_rejected():
    model = DoubleEncoderCVAE(tiny_cfg()).eval()
    with pytest.raises(ValueError):
        decode(vol(16), np.zeros(3), COND, model)
    with pytest.raises(ValueError):
        decode(vol(8), np.zeros(4), COND, model)


# reparameterisation and KL


def test_reparameterize_cases(rng):
    g = LatentGaussian(rng.standard_normal(4), rng.standard_normal(4))
    assert np.array_equal(reparameterize(g, np.zeros(4)), g.mean)
    n = rng.standard_normal(4)
    assert np.allclose(reparameterize(LatentGaussian(g.mean, np.zeros(4)), n), g.mean + n)


def test_reparameterize_moments(rng):
    g = LatentGaussian(np.array([0.5, -1.0, 2.0]), np.array([0.0, math.log(4), math.log(0.25)]))
    z = np.stack([reparameterize(g, e) for e in rng.standard_normal((100_000, 3))])
    var = np.exp(g.logvar)
    se_mean = np.sqrt(var / len(z))
    assert np.all(np.abs(z.mean(0) - g.mean) < 3 * se_mean)
    se_var = var * math.sqrt(2 / (len(z) - 1))
    assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * se_var)
    off = np.cov(z.T)[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) < 3 * np.sqrt(np.outer(var, var))[~np.eye(3, dtype=bool)] / math.sqrt(len(z)))


@pytest.mark.parametrize("mu,lv,expected", [
    ([0.0] * 10, [0.0] * 10, 0.0),
    ([1.0] + [0.0] * 9, [0.0] * 10, 0.5),
    ([0.0] * 10, [math.log(4)] + [0.0] * 9, 0.5 * (4 - 1 - math.log(4))),
])
def test_kl_closed_forms(rng, mu, lv, expected):
    g = LatentGaussian(mu, lv)
    assert kl_divergence(g) == pytest.approx(expected, abs=1e-12)
    mc, se = kl_monte_carlo(g.mean, g.logvar, 200_000, rng)
    assert abs(mc - expected) < 5 * se + 1e-12


@given(arrays(np.float64, 5, elements=st.floats(-5, 5)), arrays(np.float64, 5, elements=st.floats(-5, 5)))
def test_kl_nonnegative(mu, lv):
    kl = kl_divergence(LatentGaussian(mu, lv))
    assert kl >= 0
    if np.all(mu == 0) and np.all(lv == 0):
        assert kl == 0


def test_kl_numpy_matches_torch(rng):
    mu, lv = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    t = kl_divergence_t(torch.as_tensor(mu), torch.as_tensor(lv)).numpy()
    assert np.allclose(t, [kl_divergence(LatentGaussian(m, v)) for m, v in zip(mu, lv)], rtol=1e-12)


# ELBO


def test_elbo_zero_case(rng):
    x = rng.random((4, 4, 4))
    assert elbo_loss(x, x, LatentGaussian(np.zeros(2), np.zeros(2))) == (0.0, 0.0, 0.0)


def test_elbo_unit_residual():
    total, recon, kl = elbo_loss(np.ones((2, 2, 2)), np.zeros((2, 2, 2)), LatentGaussian(np.zeros(2), np.zeros(2)))
    assert recon == 4.0 and kl == 0.0 and total == 4.0


def test_elbo_numpy_matches_torch(rng):
    t, p = rng.random((2, 1, 4, 4, 4)), rng.random((2, 1, 4, 4, 4))
    mu, lv = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    tot, rec, kl = elbo_terms_t(*(torch.as_tensor(a) for a in (t, p, mu, lv)), kl_weight=0.5)
    for i in range(2):
        ref = elbo_loss(t[i, 0], p[i, 0], LatentGaussian(mu[i], lv[i]), kl_weight=0.5)
        assert np.allclose([tot[i].item(), rec[i].item(), kl[i].item()], ref, rtol=1e-12)


def test_gradient_spot_check_against_finite_differences():
    torch.manual_seed(0)
    model = DoubleEncoderCVAE(tiny_cfg(latent_dim=2, channels=(2, 2), groupnorm_groups=1)).double()
    g = torch.Generator().manual_seed(1)
    base, tgt = (torch.rand(1, 1, 8, 8, 8, dtype=torch.float64, generator=g) for _ in range(2))
    cond = torch.randn(1, 3, dtype=torch.float64, generator=g)
    noise = torch.randn(1, 2, dtype=torch.float64, generator=g)

    def loss():
        pred, mu, lv = model(base, tgt, cond, noise)
        return elbo_terms_t(tgt, pred, mu, lv)[0].sum()

    model.zero_grad()
    loss().backward()
    pick = np.random.default_rng(0)
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for i in pick.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + 1e-6
                up = loss().item()
                flat[i] = old - 1e-6
                down = loss().item()
                flat[i] = old
                fd = (up - down) / 2e-6
                an = p.grad.view(-1)[i].item()
                assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-6)


# serialisation


def test_checkpoint_round_trip(tmp_path):
    model = DoubleEncoderCVAE(tiny_cfg())
    std = Standardizer(70.0, 6.0, 0.5, 1.5)
    save_checkpoint(tmp_path / "m.npz", model, model.cfg, std, {"epoch": 3})
    ck = load_checkpoint(tmp_path / "m.npz")
    assert ck.standardizer == std and ck.meta == {"epoch": 3} and ck.model.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), ck.model.state_dict().items()):
        assert torch.equal(a, b), k


def test_double_precision_checkpoint(tmp_path):
    model = DoubleEncoderCVAE(tiny_cfg()).double()
    save_checkpoint(tmp_path / "m.npz", model, model.cfg)
    assert next(load_checkpoint(tmp_path / "m.npz").model.parameters()).dtype == torch.float64
