"""Analytic ground-truth distributions: exact samplers, exact scores, log densities.

Manifold targets take ambient points (unit vectors). Their ``score`` is the
Riemannian gradient of the log density (w.r.t. the Hausdorff measure),
returned as an ambient tangent vector; :func:`chart_score` pulls it back to
chart coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import special

from .core import DTYPE, RngStream, as_tensor
from .manifolds import ChartPoint, Circle, Euclidean, Manifold, Sphere2, _frame_from_point

LOG_2PI = math.log(2 * math.pi)


class ZeroDensityError(ArithmeticError):
    pass


def _log_i0(kappa: float) -> float:
    return float(math.log(special.i0e(kappa)) + kappa)


def _log_vmf_norm(kappa: float) -> float:
    """log of the S^2 vMF normalizer 4 pi sinh(k) / k."""
    if kappa < 1e-8:
        return math.log(4 * math.pi)
    return LOG_2PI + kappa + math.log1p(-math.exp(-2 * kappa)) - math.log(kappa)


@dataclass
class Target:
    kind: str
    manifold: Manifold
    weights: np.ndarray = field(default_factory=lambda: np.ones(1))
    # per-component parameters; meaning depends on kind
    locs: np.ndarray | None = None
    scales: np.ndarray | None = None
    accept_stats: dict = field(default_factory=lambda: {"proposed": 0, "accepted": 0})

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1) > 1e-12:
            raise ValueError(f"mixture weights must be positive and sum to 1, got {self.weights}")

    @property
    def dim(self) -> int:
        return self.manifold.ambient_dim

    # -- density -----------------------------------------------------------
    def unnorm_log_density(self, x: torch.Tensor) -> torch.Tensor:
        x = as_tensor(x).reshape(-1, self.dim)
        k = self.kind
        if k == "banana":
            x1, x2 = x[:, 0], x[:, 1]
            return -(x1**2) / 8 - 0.5 * (x2 - x1**2 / 4) ** 2
        if k == "cosine":
            x1, x2 = x[:, 0], x[:, 1]
            return -(x1**2) / 8 - 0.5 * (x2 - torch.cos(2 * x1)) ** 2 / 0.09
        if k in ("gaussian", "gaussian_mixture"):
            mu = torch.as_tensor(self.locs, dtype=DTYPE)  # (K, d)
            sd = torch.as_tensor(self.scales, dtype=DTYPE)
            z = (x[:, None, :] - mu[None]) / sd[None]
            comp = -0.5 * (z**2).sum(-1) - torch.log(sd).sum(-1)[None]
            if len(self.weights) == 1:
                return comp[:, 0] + torch.log(sd).sum()
            return torch.logsumexp(comp + torch.as_tensor(np.log(self.weights)), dim=1)
        if k == "von_mises_mixture_s1":
            ang = torch.atan2(x[:, 1], x[:, 0])
            mu = torch.as_tensor(self.locs, dtype=DTYPE)
            kap = np.asarray(self.scales, dtype=np.float64)
            lognorm = torch.as_tensor([_log_i0(c) for c in kap], dtype=DTYPE)
            comp = torch.as_tensor(kap) * torch.cos(ang[:, None] - mu[None]) - lognorm[None]
            return torch.logsumexp(comp + torch.as_tensor(np.log(self.weights)), dim=1) + lognorm[0]
        if k == "vmf_mixture_s2":
            mu = torch.as_tensor(self.locs, dtype=DTYPE)  # (K, 3)
            kap = np.asarray(self.scales, dtype=np.float64)
            lognorm = torch.as_tensor([_log_vmf_norm(c) for c in kap], dtype=DTYPE)
            comp = torch.as_tensor(kap)[None] * (x @ mu.T) - lognorm[None]
            return torch.logsumexp(comp + torch.as_tensor(np.log(self.weights)), dim=1) + lognorm[0]
        raise ValueError(f"unknown target kind {k!r}")

    def log_normalizer(self) -> float:
        """log Z with p = exp(unnorm_log_density) / Z."""
        k = self.kind
        if k in ("banana", "cosine"):
            noise_var = 1.0 if k == "banana" else 0.09
            return 0.5 * math.log(2 * math.pi * 4) + 0.5 * math.log(2 * math.pi * noise_var)
        if k in ("gaussian", "gaussian_mixture"):
            d = self.dim
            extra = float(np.log(self.scales[0]).sum()) if len(self.weights) == 1 else 0.0
            return 0.5 * d * LOG_2PI + extra
        if k == "von_mises_mixture_s1":
            return LOG_2PI + _log_i0(float(self.scales[0]))
        if k == "vmf_mixture_s2":
            return _log_vmf_norm(float(self.scales[0]))
        raise ValueError(k)

    def log_density(self, x) -> torch.Tensor:
        return self.unnorm_log_density(x) - self.log_normalizer()

    # -- score -------------------------------------------------------------
    def score(self, x) -> torch.Tensor:
        x = as_tensor(x).reshape(-1, self.dim)
        k = self.kind
        if k == "banana":
            x1, x2 = x[:, 0], x[:, 1]
            r = x2 - x1**2 / 4
            return torch.stack([-x1 / 4 + r * x1 / 2, -r], dim=1)
        if k == "cosine":
            x1, x2 = x[:, 0], x[:, 1]
            r = (x2 - torch.cos(2 * x1)) / 0.09
            return torch.stack([-x1 / 4 - 2 * torch.sin(2 * x1) * r, -r], dim=1)
        if k in ("gaussian", "gaussian_mixture"):
            mu = torch.as_tensor(self.locs, dtype=DTYPE)
            sd = torch.as_tensor(self.scales, dtype=DTYPE)
            z = (x[:, None, :] - mu[None]) / sd[None]
            comp = -0.5 * (z**2).sum(-1) - torch.log(sd).sum(-1)[None] + torch.as_tensor(np.log(self.weights))
            resp = self._responsibilities(comp)
            return (resp[:, :, None] * (-z / sd[None])).sum(1)
        if k == "von_mises_mixture_s1":
            ang = torch.atan2(x[:, 1], x[:, 0])
            mu = torch.as_tensor(self.locs, dtype=DTYPE)
            kap = torch.as_tensor(np.asarray(self.scales, dtype=np.float64))
            lognorm = torch.as_tensor([_log_i0(float(c)) for c in kap], dtype=DTYPE)
            comp = kap * torch.cos(ang[:, None] - mu[None]) - lognorm + torch.as_tensor(np.log(self.weights))
            resp = self._responsibilities(comp)
            d_ang = (resp * (-kap * torch.sin(ang[:, None] - mu[None]))).sum(1)
            return d_ang[:, None] * torch.stack([-torch.sin(ang), torch.cos(ang)], dim=1)
        if k == "vmf_mixture_s2":
            mu = torch.as_tensor(self.locs, dtype=DTYPE)
            kap = torch.as_tensor(np.asarray(self.scales, dtype=np.float64))
            lognorm = torch.as_tensor([_log_vmf_norm(float(c)) for c in kap], dtype=DTYPE)
            comp = kap * (x @ mu.T) - lognorm + torch.as_tensor(np.log(self.weights))
            resp = self._responsibilities(comp)
            g = (resp[:, :, None] * (kap[None, :, None] * mu[None])).sum(1)
            return g - (g * x).sum(1, keepdim=True) * x
        raise ValueError(k)

    @staticmethod
    def _responsibilities(comp: torch.Tensor) -> torch.Tensor:
        top = comp.max(dim=1, keepdim=True).values
        if torch.any(~torch.isfinite(top)):
            raise ZeroDensityError("mixture density underflows to zero")
        return torch.softmax(comp, dim=1)

    # -- sampling ----------------------------------------------------------
    def sample(self, n: int, stream: RngStream) -> torch.Tensor:
        if n < 1:
            raise ValueError("n must be >= 1")
        k = self.kind
        g = stream.generator
        if k in ("banana", "cosine"):
            x1 = 2.0 * g.standard_normal(n)
            if k == "banana":
                x2 = x1**2 / 4 + g.standard_normal(n)
            else:
                x2 = np.cos(2 * x1) + 0.3 * g.standard_normal(n)
            return torch.tensor(np.stack([x1, x2], axis=1), dtype=DTYPE)
        comp = self._sample_components(n, g)
        if k in ("gaussian", "gaussian_mixture"):
            mu, sd = np.asarray(self.locs)[comp], np.asarray(self.scales)[comp]
            return torch.tensor(mu + sd * g.standard_normal((n, self.dim)), dtype=DTYPE)
        if k == "von_mises_mixture_s1":
            ang = np.empty(n)
            for c in range(len(self.weights)):
                idx = np.flatnonzero(comp == c)
                ang[idx] = self._von_mises(g, float(self.locs[c]), float(self.scales[c]), idx.size)
            return torch.tensor(np.stack([np.cos(ang), np.sin(ang)], axis=1), dtype=DTYPE)
        if k == "vmf_mixture_s2":
            out = np.empty((n, 3))
            for c in range(len(self.weights)):
                idx = np.flatnonzero(comp == c)
                out[idx] = _sample_vmf_s2(g, np.asarray(self.locs[c]), float(self.scales[c]), idx.size)
            return torch.tensor(out, dtype=DTYPE)
        raise ValueError(k)

    def _sample_components(self, n, g):
        if len(self.weights) == 1:
            return np.zeros(n, dtype=np.int64)
        return np.searchsorted(np.cumsum(self.weights), g.random(n), side="right").clip(0, len(self.weights) - 1)

    def _von_mises(self, g, mu, kappa, n):
        """Best-Fisher rejection sampler (wrapped-Cauchy envelope)."""
        if n == 0:
            return np.empty(0)
        if kappa < 1e-8:
            return g.uniform(-math.pi, math.pi, n)
        tau = 1 + math.sqrt(1 + 4 * kappa**2)
        rho = (tau - math.sqrt(2 * tau)) / (2 * kappa)
        r = (1 + rho**2) / (2 * rho)
        out = np.empty(n)
        todo = np.arange(n)
        while todo.size:
            m = todo.size
            u1, u2, u3 = g.random(m), g.random(m), g.random(m)
            z = np.cos(math.pi * u1)
            f = (1 + r * z) / (r + z)
            c = kappa * (r - f)
            with np.errstate(divide="ignore"):
                ok = (c * (2 - c) - u2 > 0) | (np.log(c / u2) + 1 - c >= 0)
            self.accept_stats["proposed"] += m
            self.accept_stats["accepted"] += int(ok.sum())
            theta = mu + np.sign(u3 - 0.5) * np.arccos(np.clip(f, -1, 1))
            out[todo[ok]] = theta[ok]
            todo = todo[~ok]
        return np.angle(np.exp(1j * out))

    @property
    def acceptance_rate(self) -> float:
        p = self.accept_stats["proposed"]
        return float("nan") if p == 0 else self.accept_stats["accepted"] / p


def _sample_vmf_s2(g, mu, kappa, n):
    if n == 0:
        return np.empty((0, 3))
    u = g.random(n)
    if kappa < 1e-8:
        w = 2 * u - 1
    else:
        w = 1 + np.log(u + (1 - u) * np.exp(-2 * kappa)) / kappa
    psi = g.uniform(-math.pi, math.pi, n)
    frame = _frame_from_point(torch.tensor(mu, dtype=DTYPE).reshape(1, 3))[0].numpy()
    s = np.sqrt(np.clip(1 - w**2, 0, None))
    local = np.stack([w, s * np.cos(psi), s * np.sin(psi)], axis=1)
    return local @ frame.T


# -- public functional API --------------------------------------------------


def sample(t: Target, n: int, stream: RngStream) -> torch.Tensor:
    return t.sample(n, stream)


def score(t: Target, x) -> torch.Tensor:
    if isinstance(x, ChartPoint):
        return chart_score(t, x)
    return t.score(x)


def unnorm_log_density(t: Target, x) -> torch.Tensor:
    if isinstance(x, ChartPoint):
        x = t.manifold.embed(x)
    return t.unnorm_log_density(x)


def chart_score(t: Target, y: ChartPoint) -> torch.Tensor:
    """Score in chart coordinates: the ambient gradient contracted with d embed / d y."""
    coords = y.coords.detach().requires_grad_(True)
    amb = t.manifold.embed(y.with_coords(coords))
    s = t.score(amb.detach())
    (out,) = torch.autograd.grad((amb * s).sum(), coords)
    return out


def normalize_by_quadrature(t: Target, resolution=720) -> float:
    """log of the quadrature integral of exp(unnorm_log_density) on S^1 / S^2."""
    m = t.manifold
    nodes, w = m.quadrature_grid(resolution)
    amb = m.embed(ChartPoint(nodes))
    lp = t.unnorm_log_density(amb)
    top = lp.max()
    return float(top + torch.log((torch.exp(lp - top) * w).sum()))


# -- constructors -----------------------------------------------------------


def gaussian(mean, std) -> Target:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape).copy()
    return Target("gaussian", Euclidean(mean.size), np.ones(1), mean[None], std[None])


def gaussian_mixture(weights, means, stds) -> Target:
    means = np.asarray(means, dtype=np.float64)
    stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), means.shape).copy()
    return Target("gaussian_mixture", Euclidean(means.shape[1]), np.asarray(weights), means, stds)


def banana() -> Target:
    return Target("banana", Euclidean(2))


def cosine() -> Target:
    return Target("cosine", Euclidean(2))


def ring_mixture(n_modes=8, radius=2.0, std=0.1) -> Target:
    ang = 2 * math.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return gaussian_mixture(np.full(n_modes, 1.0 / n_modes), means, std)


def direction_to_angle(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return float(math.atan2(v[1], v[0]))


def von_mises_mixture(weights, locs, kappas) -> Target:
    """Mixture on S^1; ``locs`` are angles or ambient 2-vectors (normalized first)."""
    angs = [direction_to_angle(m) if np.ndim(m) else float(m) for m in locs]
    return Target("von_mises_mixture_s1", Circle(), np.asarray(weights), np.asarray(angs), np.asarray(kappas, dtype=np.float64))


def von_mises_from_sigma(weights, locs, sigmas) -> Target:
    """Same mixture with concentration 1/sigma^2."""
    return von_mises_mixture(weights, locs, [1.0 / s**2 for s in sigmas])


def uniform_circle() -> Target:
    return von_mises_mixture([1.0], [0.0], [0.0])


def default_s1_target() -> Target:
    """0.7 vM((0,1), sigma=2) + 0.3 vM((0.5,-0.5), sigma=3)."""
    return von_mises_from_sigma([0.7, 0.3], [(0.0, 1.0), (0.5, -0.5)], [2.0, 3.0])


def vmf_mixture(weights, locs, kappas) -> Target:
    locs = np.asarray(locs, dtype=np.float64)
    locs = locs / np.linalg.norm(locs, axis=1, keepdims=True)
    return Target("vmf_mixture_s2", Sphere2(), np.asarray(weights), locs, np.asarray(kappas, dtype=np.float64))


def tetrahedral_vmf(kappa=10.0) -> Target:
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    return vmf_mixture(np.full(4, 0.25), verts, np.full(4, kappa))


def uniform_sphere() -> Target:
    return vmf_mixture([1.0], [[0.0, 0.0, 1.0]], [0.0])


def target_from_config(cfg: dict) -> Target:
    """Build a target from a config section (see README for keys)."""
    kind = cfg.get("kind", "banana")
    if kind == "banana":
        return banana()
    if kind == "cosine":
        return cosine()
    if kind == "ring":
        return ring_mixture(int(cfg.get("modes", 8)), float(cfg.get("radius", 2.0)), float(cfg.get("std", 0.1)))
    if kind == "gaussian":
        return gaussian(cfg.get("mean", [0.0, 0.0]), cfg.get("std", 1.0))
    if kind == "von_mises_mixture_s1":
        if "angles" in cfg:
            locs = list(cfg["angles"])
        elif "locs" in cfg:
            locs = _pairs(cfg["locs"])
        else:
            return default_s1_target()
        if "kappas" in cfg:
            return von_mises_mixture(cfg["weights"], locs, cfg["kappas"])
        return von_mises_from_sigma(cfg["weights"], locs, cfg["sigmas"])
    if kind == "vmf_mixture_s2":
        if "locs" in cfg:
            locs = np.asarray(cfg["locs"], dtype=np.float64).reshape(-1, 3)
            return vmf_mixture(cfg["weights"], locs, cfg["kappas"])
        return tetrahedral_vmf(float(cfg.get("kappa", 10.0)))
    if kind == "uniform_s1":
        return uniform_circle()
    if kind == "uniform_s2":
        return uniform_sphere()
    raise ValueError(f"unknown target kind {kind!r}")


def _pairs(flat):
    """Ambient 2-vectors given either nested or flattened."""
    flat = list(flat)
    if flat and isinstance(flat[0], (list, tuple)):
        return flat
    if len(flat) % 2:
        raise ValueError("locs must hold 2-vectors; use 'angles' for plain angles")
    return [tuple(flat[i : i + 2]) for i in range(0, len(flat), 2)]
