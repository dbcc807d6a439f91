import math

import numpy as np
import pytest
import torch

from mvl.autoencoder import (
    AEConfig,
    AEModels,
    Decoder,
    build_ae,
    elbo_surrogate_grad,
    kde_kl_uniform,
    ring_dataset,
    train_ae,
    wae_loss_grad,
)
from mvl.core import RngStream
from mvl.energy import BoundCondition, FunctionEnergy, TargetEnergy
from mvl.entropy import ImplicitSampler, entropy_grad, model_score_fn, wrapped_angle_sampler
from mvl.manifolds import Circle, Euclidean
from mvl.targets import uniform_circle


def t64(*v):
    return torch.tensor(v, dtype=torch.float64)


def linear_gaussian_models(a, b, c, w, v):
    """Encoder z = a x + b + c eps, decoder w z + v, N(0, 1) prior, exact conditional score."""
    enc = ImplicitSampler(lambda e, p, x: p[0] * x + p[1] + p[2] * e, t64(a, b, c), 1, Euclidean(1), cond_width=1)
    dec = Decoder(lambda z, p: p[0] * z + p[1], t64(w, v))
    score = FunctionEnergy(lambda z, p, x: (z[:, 0] - (a * x[:, 0] + b)) ** 2 / (2 * c**2), width=1, cond_width=1)
    return AEModels(enc, dec, score, lambda z: -z)


def neg_elbo(x, a, b, c, w, v):
    """Closed form of E_q[1/2 (x - G z)^2 - log p(z) + log q(z|x)] up to constants, averaged over x."""
    m = a * x + b
    recon = 0.5 * ((x - w * m - v) ** 2 + w**2 * c**2)
    prior = 0.5 * (m**2 + c**2)
    ent = -math.log(c)
    return float((recon + prior + ent).mean())


def test_elbo_gradient_matches_closed_form():
    params = dict(a=0.8, b=-0.3, c=0.6, w=1.4, v=0.2)
    xs = t64(-1.0, 0.5, 2.0)
    # antithetic +-1 drivers make every expectation exact for this quadratic instance
    x = xs.repeat_interleave(2).reshape(-1, 1)
    drv = t64(1.0, -1.0).repeat(3).reshape(-1, 1)
    models = linear_gaussian_models(**params)
    g_t, g_p, _ = elbo_surrogate_grad(x, models, RngStream(0), driver=drv)
    names = ["w", "v", "a", "b", "c"]
    got = torch.cat([g_t, g_p])
    h = 1e-6
    fd = []
    for n in names:
        up, dn = dict(params), dict(params)
        up[n] += h
        dn[n] -= h
        fd.append((neg_elbo(xs, **up) - neg_elbo(xs, **dn)) / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    assert float((got - fd).norm() / fd.norm()) <= 1e-3


def test_elbo_phi_gradient_is_entropy_term_when_decoder_ignores_latent():
    cfg = AEConfig(mode="implicit_vae", iterations=0)
    models = build_ae(cfg, 2, RngStream(1))
    models.decoder = Decoder(lambda z, p: p.expand(z.shape[0], 2) + 0.0 * z.sum(), t64(0.1, -0.2))
    x = ring_dataset(64, RngStream(2))
    _, g_phi, _ = elbo_surrogate_grad(x, models, RngStream(3))
    ent = entropy_grad(models.encoder, model_score_fn(BoundCondition(models.score_model, x)), 64, RngStream(3), cond=x)
    assert torch.allclose(g_phi, -ent, atol=1e-12)


def test_perfect_autoencoder_has_zero_reconstruction_gradient():
    x0 = t64(1.0, 2.0).reshape(1, 2).expand(16, 2).contiguous()
    cfg = AEConfig(mode="plain_ae", iterations=0)
    models = build_ae(cfg, 2, RngStream(4))
    models.decoder = Decoder(lambda z, p: p.expand(z.shape[0], 2) + 0.0 * z.sum(), t64(1.0, 2.0))
    g_t, g_p, terms = wae_loss_grad(x0, models, 0.0, RngStream(5))
    assert torch.equal(g_t, torch.zeros_like(g_t)) and torch.equal(g_p, torch.zeros_like(g_p))
    assert terms["recon"] == 0.0


def test_wae_without_penalty_is_plain_autoencoder():
    a, _ = train_ae(AEConfig(mode="wae_kl", lam=0.0, iterations=30, log_every=10, seed=7))
    b, _ = train_ae(AEConfig(mode="plain_ae", iterations=30, log_every=10, seed=7))
    assert a.column("recon") == b.column("recon")
    assert torch.equal(a.latents, b.latents)


def test_matched_uniform_latent_gives_zero_kl_gradient():
    models = build_ae(AEConfig(mode="wae_kl", iterations=0), 2, RngStream(6))
    models.score_model = TargetEnergy(uniform_circle())
    x = ring_dataset(32, RngStream(7))
    _, g_with, _ = wae_loss_grad(x, models, 5.0, RngStream(8))
    _, g_none, _ = wae_loss_grad(x, models, 0.0, RngStream(8))
    assert torch.allclose(g_with, g_none, atol=1e-14)


def test_larger_penalty_gives_smaller_kl():
    def late_kl(lam):
        h, _ = train_ae(AEConfig(mode="wae_kl", lam=lam, iterations=300, log_every=30, seed=0))
        return float(np.mean(h.column("kl_term")[-4:]))

    kls = [late_kl(lam) for lam in (0.0, 0.3, 3.0)]
    assert kls[0] > kls[1] > kls[2]


def test_stale_score_model_is_counted():
    models = build_ae(AEConfig(mode="implicit_vae", iterations=0), 2, RngStream(9))
    x = ring_dataset(8, RngStream(10))
    elbo_surrogate_grad(x, models, RngStream(11))
    elbo_surrogate_grad(x, models, RngStream(12))
    assert models.stale_count == 2
    models.score_fresh = True
    elbo_surrogate_grad(x, models, RngStream(13))
    assert models.stale_count == 2


def test_training_refreshes_score_every_step(wae_run, vae_run):
    assert wae_run[0].stale_count == 0 and vae_run[0].stale_count == 0


def test_score_model_health(wae_run):
    hist, _ = wae_run
    assert all(math.isfinite(v) for v in hist.column("score_loss")[1:])
    rows = hist.rows
    first = [r["score_gap"] for r in rows if r["iteration"] <= 150]
    second = [r["score_gap"] for r in rows if 150 < r["iteration"] <= 300]
    assert np.mean(second) < np.mean(first)


def test_same_seed_same_history():
    a, _ = train_ae(AEConfig(mode="implicit_vae", iterations=20, log_every=5, seed=3))
    b, _ = train_ae(AEConfig(mode="implicit_vae", iterations=20, log_every=5, seed=3))
    np.testing.assert_equal(a.rows, b.rows)


def test_euclidean_latent_pipeline_runs():
    h, models = train_ae(AEConfig(mode="implicit_vae", latent="euclidean", iterations=40, log_every=20, seed=1))
    assert h.rows[-1]["recon"] < h.recon_init
    assert math.isnan(h.rows[-1]["kl_term"])


def test_kde_kl_of_uniform_points_is_small():
    ang = torch.linspace(-math.pi, math.pi, 2001, dtype=torch.float64)[:-1]
    ent, kl = kde_kl_uniform(torch.stack([ang.cos(), ang.sin()], 1))
    assert abs(kl) <= 1e-6 and ent == pytest.approx(math.log(2 * math.pi), abs=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        AEConfig(lam=-1.0)
    with pytest.raises(ValueError):
        AEConfig(mode="gan")
    with pytest.raises(ValueError):
        AEConfig(mode="implicit_vae", base_width=0)
