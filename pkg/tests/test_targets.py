import math

import numpy as np
import pytest
import torch
from scipy import stats

from mvl.core import RngStream
from mvl.manifolds import ChartPoint, Circle, Sphere2
from mvl.targets import (
    ZeroDensityError,
    banana,
    chart_score,
    cosine,
    default_s1_target,
    direction_to_angle,
    gaussian,
    gaussian_mixture,
    normalize_by_quadrature,
    ring_mixture,
    target_from_config,
    tetrahedral_vmf,
    uniform_circle,
    uniform_sphere,
    von_mises_from_sigma,
    von_mises_mixture,
)

ALL_TARGETS = {
    "gaussian": lambda: gaussian([0.5, -1.0], [1.0, 2.0]),
    "mixture": lambda: gaussian_mixture([0.3, 0.7], [[-1.0, 0.0], [1.5, 0.5]], 0.7),
    "ring": lambda: ring_mixture(8, 2.0, 0.3),
    "banana": banana,
    "cosine": cosine,
    "vm_s1": default_s1_target,
    "vmf_s2": lambda: tetrahedral_vmf(10.0),
}


def sample_points(t, n, seed):
    return t.sample(n, RngStream(seed))


def test_gaussian_sample_mean():
    x = gaussian([0.0, 0.0], 1.0).sample(100_000, RngStream(0))
    assert float(x.mean(0).abs().max()) <= 0.015


def test_von_mises_component_frequencies():
    t = von_mises_mixture([0.7, 0.3], [-2.0, 1.0], [50.0, 50.0])
    ang = torch.atan2(*t.sample(100_000, RngStream(1)).T.flip(0)).numpy()
    near_first = np.abs(np.angle(np.exp(1j * (ang + 2.0)))) < 1.5
    assert abs(near_first.mean() - 0.7) <= 0.01
    assert 0 < t.acceptance_rate <= 1


def test_banana_second_coordinate_mean():
    x = banana().sample(100_000, RngStream(2))
    assert abs(float(x[:, 1].mean()) - 1.0) <= 0.05


def test_sample_rejects_empty():
    with pytest.raises(ValueError):
        banana().sample(0, RngStream(0))


def test_weights_validated():
    with pytest.raises(ValueError):
        gaussian_mixture([0.5, 0.6], [[0.0], [1.0]], 1.0)
    with pytest.raises(ValueError):
        gaussian_mixture([1.2, -0.2], [[0.0], [1.0]], 1.0)


def test_gaussian_score():
    s = gaussian([0.0, 0.0], 1.0).score(torch.tensor([[1.0, -1.0]], dtype=torch.float64))
    assert torch.allclose(s, torch.tensor([[-1.0, 1.0]], dtype=torch.float64))


def test_von_mises_score_vanishes_at_mode():
    t = von_mises_mixture([1.0], [math.pi / 2], [4.0])
    s = t.score(torch.tensor([[0.0, 1.0]], dtype=torch.float64))
    assert float(s.abs().max()) <= 1e-15


def test_symmetric_mixture_score_vanishes_in_between():
    t = gaussian_mixture([0.5, 0.5], [[-1.0, 2.0], [1.0, 2.0]], 0.5)
    s = t.score(torch.tensor([[0.0, 2.0]], dtype=torch.float64))
    assert float(s.abs().max()) <= 1e-15


def test_far_point_score_is_finite_and_zero_density_raises():
    t = gaussian_mixture([0.5, 0.5], [[-1.0], [1.0]], 1e-3)
    # responsibilities are formed in log space, so underflowing densities still work
    s = t.score(torch.tensor([[1e3]], dtype=torch.float64))
    assert float(s) == pytest.approx(-(1e3 - 1.0) / 1e-6)
    with pytest.raises(ZeroDensityError):
        t.score(torch.tensor([[math.inf]], dtype=torch.float64))


def test_von_mises_sigma_convention():
    t = von_mises_from_sigma([1.0], [(0.0, 1.0)], [2.0])
    x = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    lp = t.unnorm_log_density(x)
    assert float(lp[0] - lp[1]) == pytest.approx(0.25, abs=1e-12)


def test_mean_direction_conversion():
    assert direction_to_angle((0.0, 1.0)) == pytest.approx(math.pi / 2)
    assert direction_to_angle((0.5, -0.5)) == pytest.approx(-math.pi / 4)


def test_uniform_circle_constant():
    ang = torch.linspace(-3, 3, 7, dtype=torch.float64)
    lp = uniform_circle().unnorm_log_density(torch.stack([ang.cos(), ang.sin()], 1))
    assert float(lp.max() - lp.min()) == 0.0


@pytest.mark.parametrize("t", [default_s1_target(), uniform_circle(), tetrahedral_vmf(10.0), uniform_sphere()], ids=["vm", "u1", "vmf", "u2"])
def test_normalized_density_integrates_to_one(t):
    m = t.manifold
    nodes, w = m.quadrature_grid(720 if m.dim == 1 else 400)
    dens = torch.exp(t.log_density(m.embed(ChartPoint(nodes))))
    assert abs(float((dens * w).sum()) - 1.0) <= (1e-8 if m.dim == 1 else 1e-4)
    assert normalize_by_quadrature(t, 720 if m.dim == 1 else 400) == pytest.approx(t.log_normalizer(), abs=1e-4)


@pytest.mark.parametrize("name", list(ALL_TARGETS))
def test_score_matches_density_gradient(name):
    t = ALL_TARGETS[name]()
    x = sample_points(t, 10_000, 3)
    xr = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(t.unnorm_log_density(xr).sum(), xr)
    if t.manifold.dim < t.dim:
        g = t.manifold.tangent_project(x, g)
    s = t.score(x)
    rel = (s - g).norm(dim=1) / g.norm(dim=1).clamp_min(1e-8)
    assert float(rel.max()) <= 1e-6


@pytest.mark.parametrize("name", ["gaussian", "banana", "cosine", "vm_s1"])
def test_score_matches_finite_differences(name):
    t = ALL_TARGETS[name]()
    if t.manifold.dim == 1:
        ang = (2 * RngStream(4).uniform((200,)) - 1) * math.pi
        h = 1e-5
        f = lambda a: t.unnorm_log_density(torch.stack([a.cos(), a.sin()], 1))
        fd = (f(ang + h) - f(ang - h)) / (2 * h)
        y = ChartPoint(ang.reshape(-1, 1))
        assert torch.allclose(chart_score(t, y)[:, 0], fd, rtol=1e-6, atol=1e-8)
        return
    x = sample_points(t, 200, 4)
    h = 1e-5
    fd = torch.stack([(t.unnorm_log_density(x + h * e) - t.unnorm_log_density(x - h * e)) / (2 * h) for e in torch.eye(2, dtype=torch.float64)], 1)
    assert torch.allclose(t.score(x), fd, rtol=1e-6, atol=1e-6)


def test_von_mises_histogram_matches_density():
    t = default_s1_target()
    ang = torch.atan2(*t.sample(100_000, RngStream(5)).T.flip(0)).numpy()
    edges = np.linspace(-math.pi, math.pi, 41)
    obs, _ = np.histogram(ang, edges)
    fine = np.linspace(-math.pi, math.pi, 40 * 50 + 1)
    mid = 0.5 * (fine[1:] + fine[:-1])
    dens = torch.exp(t.log_density(torch.tensor(np.stack([np.cos(mid), np.sin(mid)], 1)))).numpy()
    probs = (dens * (fine[1] - fine[0])).reshape(40, 50).sum(1)
    exp = probs / probs.sum() * obs.sum()
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_vmf_polar_histogram_matches_density():
    t = tetrahedral_vmf(10.0)
    x = t.sample(100_000, RngStream(6))
    th = torch.acos(x[:, 2].clamp(-1, 1)).numpy()
    edges = np.linspace(0, math.pi, 31)
    obs, _ = np.histogram(th, edges)
    nodes, w = Sphere2().quadrature_grid((30 * 20, 120))
    dens = torch.exp(t.log_density(Sphere2.standard_embed(nodes))) * w
    probs = dens.reshape(600, 120).sum(1).reshape(30, 20).sum(1).numpy()
    exp = probs / probs.sum() * obs.sum()
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_banana_marginal_matches_density():
    x = banana().sample(100_000, RngStream(7))[:, 0].numpy()
    assert stats.kstest(x, stats.norm(scale=2.0).cdf).pvalue > 1e-3


def test_target_from_config():
    t = target_from_config({"kind": "von_mises_mixture_s1", "weights": [0.7, 0.3], "locs": [0.0, 1.0, 0.5, -0.5], "sigmas": [2.0, 3.0]})
    ref = default_s1_target()
    assert np.allclose(t.locs, ref.locs) and np.allclose(t.scales, ref.scales)
    assert target_from_config({"kind": "vmf_mixture_s2"}).manifold == Sphere2()
    assert isinstance(target_from_config({"kind": "uniform_s1"}).manifold, Circle)
    with pytest.raises(ValueError):
        target_from_config({"kind": "nope"})
