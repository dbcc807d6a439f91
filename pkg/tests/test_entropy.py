import math

import numpy as np
import pytest
import torch

from mvl.core import RngStream
from mvl.energy import GaussianEnergy
from mvl.entropy import (
    ImplicitSampler,
    PushforwardError,
    affine_sampler,
    cross_entropy_grad,
    entropy_grad,
    identity_sampler,
    mlp_sampler,
    model_score_fn,
    pushforward_sample,
    wrapped_angle_sampler,
)
from mvl.estimators import EstimatorConfig, fisher_divergence_analytic
from mvl.manifolds import Circle, Euclidean, Sphere2
from mvl.targets import gaussian
from mvl.training import TrainConfig, train_energy_model


def gauss_score(mu, sigma):
    return lambda z: -(z - mu) / sigma**2


def test_identity_pushforward():
    z, eps = pushforward_sample(identity_sampler(3), 10, RngStream(0))
    assert torch.equal(z, eps)


def test_affine_sample_mean():
    z, _ = pushforward_sample(affine_sampler(1.5, 0.5), 100_000, RngStream(1))
    assert abs(float(z.mean()) - 1.5) <= 3 * 0.5 / math.sqrt(100_000)


def test_sphere_outputs_unit_norm():
    s = mlp_sampler(3, Sphere2(), (16,), stream=RngStream(2))
    z, _ = pushforward_sample(s, 1000, RngStream(3))
    assert float((z.norm(dim=1) - 1).abs().max()) <= 1e-12


def test_resample_guard():
    # raw output vanishes whenever eps is negative; those draws must be replaced
    fn = lambda e, p, c=None: torch.cat([torch.clamp(e, min=0.0), torch.zeros_like(e)], dim=1)
    s = ImplicitSampler(fn, torch.zeros(1, dtype=torch.float64), 1, Circle())
    z, eps = pushforward_sample(s, 8, RngStream(4))
    assert torch.all(eps > 0) and float((z.norm(dim=1) - 1).abs().max()) <= 1e-12
    dead = ImplicitSampler(lambda e, p, c=None: torch.zeros(e.shape[0], 2, dtype=torch.float64), torch.zeros(1, dtype=torch.float64), 1, Circle())
    with pytest.raises(PushforwardError):
        pushforward_sample(dead, 4, RngStream(5))


def test_entropy_gradient_gaussian_scale():
    g = entropy_grad(affine_sampler(0.3, 2.0), gauss_score(0.3, 2.0), 100_000, RngStream(6))
    assert abs(float(g[1]) - 0.5) <= 0.005
    assert abs(float(g[0])) <= 3 * 0.5 / math.sqrt(100_000)


def wrapped_normal_logpdf(theta, mu, sigma, terms=8):
    k = torch.arange(-terms, terms + 1, dtype=torch.float64)
    d = theta[:, None] - mu + 2 * math.pi * k[None]
    return torch.logsumexp(-0.5 * (d / sigma) ** 2, dim=1) - math.log(sigma * math.sqrt(2 * math.pi))


def wrapped_entropy(mu, sigma, n=4096):
    th = -math.pi + 2 * math.pi * torch.arange(n, dtype=torch.float64) / n
    lp = wrapped_normal_logpdf(th, mu, sigma)
    return float(-(torch.exp(lp) * lp).sum() * 2 * math.pi / n)


def wrapped_score(mu, sigma):
    def fn(z):
        th = torch.atan2(z[:, 1], z[:, 0]).detach().requires_grad_(True)
        (d,) = torch.autograd.grad(wrapped_normal_logpdf(th, mu, sigma).sum(), th)
        return d[:, None] * torch.stack([-torch.sin(th), torch.cos(th)], 1).detach()

    return fn


def test_entropy_gradient_wrapped_normal_matches_quadrature():
    mu, sigma = 0.4, 1.2
    g = entropy_grad(wrapped_angle_sampler(mu, sigma), wrapped_score(mu, sigma), 100_000, RngStream(7))
    h = 1e-4
    fd_sigma = (wrapped_entropy(mu, sigma + h) - wrapped_entropy(mu, sigma - h)) / (2 * h)
    fd_mu = (wrapped_entropy(mu + h, sigma) - wrapped_entropy(mu - h, sigma)) / (2 * h)
    assert abs(float(g[1]) - fd_sigma) <= 0.02 * abs(fd_sigma)
    assert abs(fd_mu) <= 1e-8 and abs(float(g[0])) <= 0.02


def test_cross_entropy_uniform_sphere_is_zero():
    s = mlp_sampler(3, Sphere2(), (16,), stream=RngStream(8))
    g = cross_entropy_grad(s, lambda z: torch.zeros_like(z), 100, RngStream(9))
    assert torch.equal(g, torch.zeros_like(g))


def test_cross_entropy_gaussian_prior():
    # E[log N(z; 0, 1)] = -(mu^2 + sigma^2) / 2 + const for z = mu + sigma eps
    mu, sigma = 0.7, 1.3
    grads = torch.stack([cross_entropy_grad(affine_sampler(mu, sigma), lambda z: -z, 20_000, RngStream(10 + i)) for i in range(10)])
    se = grads.std(0) / math.sqrt(10)
    assert torch.all((grads.mean(0) - torch.tensor([-mu, -sigma], dtype=torch.float64)).abs() <= 3 * se + 1e-12)


def test_score_shape_mismatch():
    with pytest.raises(ValueError):
        entropy_grad(affine_sampler(0.0, 1.0), lambda z: torch.zeros(z.shape[0], 2, dtype=torch.float64), 10, RngStream(0))


def test_plug_in_consistency_over_batches():
    mu, sigma = -0.5, 0.8
    grads = torch.stack([entropy_grad(affine_sampler(mu, sigma), gauss_score(mu, sigma), 5000, RngStream(20 + i)) for i in range(20)])
    se = grads.std(0) / math.sqrt(20)
    exact = torch.tensor([0.0, 1 / sigma], dtype=torch.float64)
    assert torch.all((grads.mean(0) - exact).abs() <= 3 * se + 1e-12)


def test_trained_score_model_substitution():
    """|grad with model score - grad with exact score| <= sqrt(2 D_F) * sqrt(E[eps^2]) plus MC error (Cauchy-Schwarz)."""
    mu, sigma = 0.5, 2.0
    target = gaussian([mu], sigma)
    model = GaussianEnergy([0.0], 1.0)
    train_energy_model(model, target, TrainConfig(EstimatorConfig("mvl_langevin", 1e-3), learning_rate=3e-3, iterations=1500, seed=1))
    d_f = fisher_divergence_analytic(target.sample(100_000, RngStream(30)), target, model).mean
    s = affine_sampler(mu, sigma)
    g_model = entropy_grad(s, model_score_fn(model), 100_000, RngStream(31))
    g_exact = entropy_grad(s, gauss_score(mu, sigma), 100_000, RngStream(31))
    bound = math.sqrt(2 * d_f) * 1.0 + 3 * 2 / math.sqrt(100_000)
    assert abs(float(g_model[1] - g_exact[1])) <= bound
    assert d_f < 0.01


def test_conditional_sampler_requires_condition():
    s = mlp_sampler(1, Euclidean(2), (8,), cond_width=2, stream=RngStream(0))
    with pytest.raises(ValueError):
        pushforward_sample(s, 4, RngStream(1))
    z, _ = pushforward_sample(s, 4, RngStream(1), cond=torch.zeros(4, 2, dtype=torch.float64))
    assert z.shape == (4, 2)
