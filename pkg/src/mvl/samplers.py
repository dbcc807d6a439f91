"""One-step transition kernels: Langevin, Riemannian Langevin, SVGD and SPOS.

The target is ``q^a`` with ``q = exp(-E)``; the power ``a`` is always explicit
(MVL uses 1/2, CD-1 uses 1). Each step records its standard-normal driver and
the diffusion increment that the control variates contract against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import DTYPE, RngStream
from .energy import EnergyModel, grad_energy
from .manifolds import ChartPoint


@dataclass
class StepOutcome:
    x_minus: torch.Tensor | ChartPoint
    noise_driver: torch.Tensor | None
    diffusion_increment: torch.Tensor
    escaped: torch.Tensor
    # quantities at the starting point, kept so estimators need not recompute them
    grad: torch.Tensor | None = None
    energy: torch.Tensor | None = None
    drift: torch.Tensor | None = None


@dataclass(frozen=True)
class KernelConfig:
    kernel: str = "rbf"  # "rbf" or "zero"
    bandwidth: float | None = None  # None -> median heuristic

    def __post_init__(self):
        if self.kernel not in ("rbf", "zero"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")


class DegenerateBandwidth(ValueError):
    pass


def _driver(stream, driver, shape):
    if driver is not None:
        return driver
    if stream is None:
        raise ValueError("need an RngStream or an explicit driver")
    return stream.normal(shape)


def _check_finite(g):
    if not torch.all(torch.isfinite(g)):
        raise FloatingPointError("non-finite energy gradient in sampler step")


def langevin_step(x, model: EnergyModel, a: float, eps: float, stream: RngStream | None = None, *, driver=None, params=None) -> StepOutcome:
    """x- = x - eps * a * grad E(x) + sqrt(2 eps) Z."""
    if not eps > 0:
        raise ValueError("step size must be positive")
    g, e = grad_energy(model, x, params)
    _check_finite(g)
    z = _driver(stream, driver, tuple(x.shape))
    inc = math.sqrt(2 * eps) * z
    x_minus = x - eps * (a * g) + inc
    return StepOutcome(x_minus, z, inc, torch.zeros(x.shape[0], dtype=torch.bool), g, e, -(a * g))


def riemannian_langevin_step(y: ChartPoint, model: EnergyModel, a: float, eps: float, stream: RngStream | None = None, *, driver=None, params=None) -> StepOutcome:
    """Euler-Maruyama step of Riemannian Langevin dynamics in the chart of each sample."""
    if not eps > 0:
        raise ValueError("step size must be positive")
    m = model.manifold
    g, e = grad_energy(model, y, params)
    _check_finite(g)
    d = _driver(stream, driver, (len(y), m.dim))
    drift = m.riemannian_drift(y, -(a * g))
    inc = math.sqrt(2 * eps) * m.noise_from_driver(y, d)
    coords = y.coords + eps * drift + inc
    escaped = ~m.in_domain(coords)
    coords = m.normalize_coords(coords)
    return StepOutcome(y.with_coords(coords), d, inc, escaped, g, e, drift)


def median_bandwidth(batch: torch.Tensor) -> float:
    """h = med^2 / log(B + 1), med the median pairwise distance."""
    b = batch.shape[0]
    if b < 2:
        raise DegenerateBandwidth("median heuristic needs at least two points")
    x = batch.detach()
    d = torch.cdist(x, x)
    iu = torch.triu_indices(b, b, offset=1)
    med = float(torch.quantile(d[iu[0], iu[1]], 0.5)) if b > 2 else float(d[0, 1])
    if med == 0.0:
        raise DegenerateBandwidth("all points coincide")
    return med**2 / math.log(b + 1)


def rbf_kernel(x: torch.Tensor, h: float) -> torch.Tensor:
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    return torch.exp(-sq / h)


def svgd_direction(batch: torch.Tensor, model: EnergyModel, a: float, kcfg: KernelConfig, params=None, grad=None):
    """phi*(x_i) = (1/B) sum_j [k(x_j, x_i) (-a grad E(x_j)) + grad_{x_j} k(x_j, x_i)].

    Returns ``(phi, grad E, energies)``. The j = i term is included (V-form).
    """
    if grad is None:
        grad, e = grad_energy(model, batch, params)
    else:
        e = None
    _check_finite(grad)
    b = batch.shape[0]
    if kcfg.kernel == "zero":
        return torch.zeros_like(batch), grad, e
    h = kcfg.bandwidth if kcfg.bandwidth is not None else median_bandwidth(batch)
    if not h > 0:
        raise DegenerateBandwidth(f"bad bandwidth {h}")
    if math.isinf(h):
        return (-a * grad).mean(0, keepdim=True).expand_as(batch), grad, e
    x = batch.detach()
    k = rbf_kernel(x, h)
    drive = k @ (-a * grad)
    repulse = (2.0 / h) * (k.sum(1, keepdim=True) * x - k @ x)
    return (drive + repulse) / b, grad, e


def svgd_step(batch, model, a, eps, kcfg: KernelConfig, params=None) -> StepOutcome:
    phi, g, e = svgd_direction(batch, model, a, kcfg, params)
    zero = torch.zeros_like(batch)
    return StepOutcome(batch + eps * phi, None, zero, torch.zeros(batch.shape[0], dtype=torch.bool), g, e, phi)


def spos_step(batch, model, a, alpha, eps, kcfg: KernelConfig, stream: RngStream | None = None, *, driver=None, params=None) -> StepOutcome:
    """x- = x + eps (phi*(x) - alpha a grad E(x)) + sqrt(2 alpha eps) Z."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not eps > 0:
        raise ValueError("step size must be positive")
    phi, g, e = svgd_direction(batch, model, a, kcfg, params)
    if alpha == 0:
        zero = torch.zeros_like(batch)
        return StepOutcome(batch + eps * phi, None, zero, torch.zeros(batch.shape[0], dtype=torch.bool), g, e, phi)
    z = _driver(stream, driver, tuple(batch.shape))
    inc = math.sqrt(2 * alpha * eps) * z
    drift = phi - alpha * (a * g)
    return StepOutcome(batch + eps * drift + inc, z, inc, torch.zeros(batch.shape[0], dtype=torch.bool), g, e, drift)


def fresh_driver(stream: RngStream, n: int, d: int) -> torch.Tensor:
    return stream.normal((n, d)).to(DTYPE)
