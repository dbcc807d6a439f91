"""Score-matching estimators built from one sampler step, plus exact oracles.

Canonical scale: every loss-type estimator here has small-step mean equal to
``2 * J`` where ``J = E_p[-lap E + |grad E|^2 / 2]`` is the (Hyvarinen) score
matching objective, so they can be compared with each other directly.

All losses are graphs over ``params`` (the sampler noise is a fixed,
reparameterized driver), so ``report.value`` can be back-propagated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .core import RngStream, gradient
from .energy import EnergyModel, grad_energy
from .manifolds import ChartPoint, Euclidean
from .samplers import (
    KernelConfig,
    langevin_step,
    median_bandwidth,
    rbf_kernel,
    riemannian_langevin_step,
    spos_step,
    svgd_step,
)

LOSS_KINDS = (
    "mvl_langevin",
    "mvl_riemannian",
    "mvl_svgd",
    "mvl_spos",
    "dsm",
    "exact_hutchinson",
    "exact_fd",
    "fisher_analytic",
    "ksd",
)
SAMPLER_KINDS = ("mvl_langevin", "mvl_riemannian", "mvl_svgd", "mvl_spos", "dsm", "cd1")


@dataclass
class EstimatorReport:
    value: torch.Tensor
    per_sample: torch.Tensor
    std_err: float
    cv_contribution: float = 0.0
    escaped_count: int = 0

    @property
    def mean(self) -> float:
        return float(self.value.detach())

    def __float__(self):
        return self.mean


def _report(per_sample: torch.Tensor, cv: torch.Tensor | None = None, escaped: int = 0) -> EstimatorReport:
    if not torch.all(torch.isfinite(per_sample.detach())):
        raise FloatingPointError("non-finite per-sample estimator values")
    n = per_sample.shape[0]
    se = float(per_sample.detach().std() / math.sqrt(n)) if n > 1 else float("nan")
    cvm = 0.0 if cv is None else float(cv.detach().mean())
    return EstimatorReport(per_sample.mean(), per_sample, se, cvm, int(escaped))


@dataclass
class EstimatorConfig:
    kind: str = "mvl_langevin"
    eps: float = 1e-3
    with_cv: bool = True
    alpha: float = 1.0
    kernel: KernelConfig = field(default_factory=KernelConfig)
    probes: int = 1
    fd_h: float = 1e-4
    # +1: canonical (2/eps)(E(x) - E(x-)); -1 flips to the (E(x-) - E(x)) form
    sign: int = 1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS + ("cd1",):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind in SAMPLER_KINDS and not self.eps > 0:
            raise ValueError("step size must be positive for sampler-based estimators")

    @property
    def label(self) -> str:
        if self.kind in SAMPLER_KINDS:
            return f"{self.kind}{'+cv' if self.with_cv else ''}"
        return self.kind

    def evaluate(self, batch, model: EnergyModel, stream: RngStream | None = None, params=None, target=None, driver=None) -> EstimatorReport:
        k = self.kind
        if k == "mvl_langevin":
            r = mvl_langevin_loss(batch, model, self.eps, self.with_cv, stream, driver=driver, params=params)
        elif k == "mvl_riemannian":
            r = mvl_riemannian_loss(batch, model, self.eps, self.with_cv, stream, driver=driver, params=params)
        elif k == "mvl_svgd":
            r = mvl_svgd_loss(batch, model, self.kernel, self.eps, params=params)
        elif k == "mvl_spos":
            r = mvl_spos_loss(batch, model, self.kernel, self.alpha, self.eps, self.with_cv, stream, driver=driver, params=params)
        elif k == "dsm":
            return dsm_loss(batch, model, self.eps, self.with_cv, stream, driver=driver, params=params)
        elif k == "exact_hutchinson":
            return exact_sm_hutchinson(batch, model, self.probes, stream, params=params, scale=2.0)
        elif k == "exact_fd":
            return exact_sm_fd(batch, model, self.fd_h, params=params, scale=2.0)
        elif k == "fisher_analytic":
            return fisher_divergence_analytic(batch, target, model, params=params)
        elif k == "ksd":
            v = ksd_vstat(batch, target, model, self.kernel, params=params)
            return EstimatorReport(v, v.reshape(1), float("nan"))
        else:
            raise ValueError(f"{k} is a gradient rule, not a loss")
        if self.sign == -1:
            r = EstimatorReport(-r.value, -r.per_sample, r.std_err, -r.cv_contribution, r.escaped_count)
        return r


# ---------------------------------------------------------------------------
# MVL estimators


def _as_input(batch):
    return batch.detach() if isinstance(batch, torch.Tensor) else batch


def mvl_langevin_loss(batch, model: EnergyModel, eps: float, with_cv: bool = True, stream: RngStream | None = None, *, driver=None, params=None) -> EstimatorReport:
    """Per sample ``(2/eps)(E(x) - E(x-)) [+ 2 sqrt(2/eps) <Z, grad E(x)>]``, x- one Langevin step towards q^(1/2)."""
    x = _as_input(batch)
    step = langevin_step(x, model, 0.5, eps, stream, driver=driver, params=params)
    e_minus = model.energy(step.x_minus, params)
    per = (2.0 / eps) * (step.energy - e_minus)
    cv = (2.0 / eps) * (step.grad * step.diffusion_increment).sum(1)
    if with_cv:
        per = per + cv
    return _report(per, cv)


def _charts_for(model: EnergyModel, batch):
    if isinstance(batch, ChartPoint):
        return batch
    return model.manifold.chart_at(batch.detach())


def mvl_riemannian_loss(batch, model: EnergyModel, eps: float, with_cv: bool = True, stream: RngStream | None = None, *, driver=None, params=None) -> EstimatorReport:
    """Riemannian counterpart of :func:`mvl_langevin_loss` in per-sample charts.

    ``batch`` is a :class:`ChartPoint` or ambient points (recentered charts are
    built). Escaped samples get energy 0 after the step and are counted.
    """
    y = _charts_for(model, batch)
    step = riemannian_langevin_step(y, model, 0.5, eps, stream, driver=driver, params=params)
    e_minus = model.energy(model.manifold.embed(step.x_minus), params)
    n_esc = int(step.escaped.sum())
    if n_esc:
        e_minus = torch.where(step.escaped, torch.zeros_like(e_minus), e_minus)
    per = (2.0 / eps) * (step.energy - e_minus)
    cv = (2.0 / eps) * (step.grad * step.diffusion_increment).sum(1)
    if with_cv:
        per = per + cv
    return _report(per, cv, n_esc)


def mvl_svgd_loss(batch, model: EnergyModel, kcfg: KernelConfig, eps: float, params=None) -> EstimatorReport:
    """``(2/eps)(E(x) - E(x-))`` with x- a deterministic SVGD step towards q^(1/2)."""
    x = _as_input(batch)
    step = svgd_step(x, model, 0.5, eps, kcfg, params)
    per = (2.0 / eps) * (step.energy - model.energy(step.x_minus, params))
    return _report(per)


def mvl_spos_loss(batch, model, kcfg: KernelConfig, alpha: float, eps: float, with_cv: bool = True, stream=None, *, driver=None, params=None) -> EstimatorReport:
    x = _as_input(batch)
    step = spos_step(x, model, 0.5, alpha, eps, kcfg, stream, driver=driver, params=params)
    per = (2.0 / eps) * (step.energy - model.energy(step.x_minus, params))
    cv = (2.0 / eps) * (step.grad * step.diffusion_increment).sum(1)
    if with_cv:
        per = per + cv
    return _report(per, cv)


# ---------------------------------------------------------------------------
# DSM and CD-1


def dsm_loss(batch, model: EnergyModel, eps: float, with_cv: bool = True, stream: RngStream | None = None, *, driver=None, params=None, center: bool = True) -> EstimatorReport:
    """Denoising score matching with noise variance ``eps``, rescaled by 1/eps^2.

    With ``L = |sqrt(eps) Z - eps grad E(x + sqrt(eps) Z)|^2`` the per-sample value
    is ``(L - eps |Z|^2 + [cv] 2 eps^1.5 <Z, grad E(x)>) / eps^2``, evaluated in the
    algebraically expanded form to avoid cancellation. ``eps |Z|^2`` does not
    depend on the model; ``center=False`` keeps it (mean then carries d/eps).
    """
    x = _as_input(batch)
    z = driver if driver is not None else stream.normal(tuple(x.shape))
    g_t, _ = grad_energy(model, x + math.sqrt(eps) * z, params)
    per = (g_t**2).sum(1) - (2.0 / math.sqrt(eps)) * (z * g_t).sum(1)
    cv = torch.zeros_like(per)
    if with_cv:
        g_x, _ = grad_energy(model, x, params)
        cv = (2.0 / math.sqrt(eps)) * (z * g_x).sum(1)
        per = per + cv
    if not center:
        per = per + (z**2).sum(1) / eps
    return _report(per, cv)


def cd1_param_grad(batch, model: EnergyModel, eps: float, with_cv: bool = True, stream: RngStream | None = None, *, driver=None, params=None) -> torch.Tensor:
    """CD-1 gradient ``(1/eps) mean[d_theta E(x) - d_theta E(x-)]`` with x- held fixed.

    x- is one Langevin step towards q (power 1). The control variate adds
    ``(1/eps) mean[d_theta <sqrt(2 eps) Z, grad_x E(x)>]``, the increment actually
    applied by that step. Its expectation tends to the gradient of J (not 2J).
    """
    theta = (model.params if params is None else params).detach().clone().requires_grad_(True)
    x = _as_input(batch)
    step = langevin_step(x, model, 1.0, eps, stream, driver=driver, params=theta)
    x_minus = step.x_minus.detach()
    surrogate = (step.energy - model.energy(x_minus, theta)).mean() / eps
    if with_cv:
        surrogate = surrogate + (step.grad * step.diffusion_increment).sum(1).mean() / eps
    (g,) = gradient(surrogate, [theta], create_graph=False)
    return g.detach()


# ---------------------------------------------------------------------------
# exact oracles


def exact_sm_hutchinson(batch, model: EnergyModel, probes: int = 1, stream: RngStream | None = None, *, params=None, driver=None, scale: float = 1.0) -> EstimatorReport:
    """Per sample mean over probes of ``-v^T H v + |grad E|^2 / 2`` (Hessian-vector products).

    Unbiased for J; ``scale=2`` puts it on the canonical scale.
    """
    x = batch.detach().requires_grad_(True)
    g, _ = grad_energy(model, x, params)
    acc = torch.zeros(x.shape[0], dtype=x.dtype)
    for p in range(probes):
        v = driver[p] if driver is not None else stream.normal(tuple(x.shape))
        (hv,) = gradient((g * v).sum(), [x])
        acc = acc + (v * hv).sum(1)
    per = scale * (-acc / probes + 0.5 * (g**2).sum(1))
    return _report(per)


def laplacian_fd(model: EnergyModel, x: torch.Tensor, h: float = 1e-4, params=None, create_graph: bool = True) -> torch.Tensor:
    if not h > 0:
        raise ValueError("finite-difference stencil must be positive")
    d = x.shape[1]
    lap = torch.zeros(x.shape[0], dtype=x.dtype)
    for i in range(d):
        e = torch.zeros(d, dtype=x.dtype)
        e[i] = h
        gp, _ = grad_energy(model, x + e, params, create_graph=create_graph)
        gm, _ = grad_energy(model, x - e, params, create_graph=create_graph)
        lap = lap + (gp[:, i] - gm[:, i]) / (2 * h)
    return lap


def exact_sm_fd(batch, model: EnergyModel, h: float = 1e-4, *, params=None, scale: float = 1.0) -> EstimatorReport:
    """J per sample with the Laplacian from central differences of grad E (desk dimensions only)."""
    if not h > 0:
        raise ValueError("finite-difference stencil must be positive")
    x = batch.detach()
    if x.shape[1] > 3:
        raise ValueError("finite-difference oracle is limited to dimension <= 3")
    g, _ = grad_energy(model, x, params)
    per = scale * (-laplacian_fd(model, x, h, params) + 0.5 * (g**2).sum(1))
    return _report(per)


def _model_score(model, x, params):
    g, _ = grad_energy(model, x, params)
    return -model.manifold.tangent_project(x, g) if not isinstance(model.manifold, Euclidean) else -g


def fisher_divergence_analytic(batch, target, model: EnergyModel, *, params=None) -> EstimatorReport:
    """``1/2 mean |score_p(x) - score_q(x)|^2`` with the exact target score."""
    x = batch.detach()
    diff = target.score(x) - _model_score(model, x, params)
    return _report(0.5 * (diff**2).sum(1))


def sm_reference_value(target, model: EnergyModel, n: int, stream: RngStream, *, params=None, batch=None) -> EstimatorReport:
    """First-order-only reference for the canonical scale: ``2 (D_F - 1/2 E|score_p|^2)``.

    Per sample this is ``|grad E|^2 + 2 <grad E, score_p>``.
    """
    x = target.sample(n, stream) if batch is None else batch.detach()
    s_p = target.score(x)
    s_q = _model_score(model, x, params)
    return _report(((s_q - s_p) ** 2).sum(1) - (s_p**2).sum(1))


def ksd_vstat(batch, target, model: EnergyModel, kcfg: KernelConfig, *, params=None) -> torch.Tensor:
    """V-statistic ``(1/B^2) sum_ij delta_i^T k(x_i, x_j) delta_j``, delta = score_q - score_p."""
    x = batch.detach()
    delta = _model_score(model, x, params) - target.score(x)
    if kcfg.kernel == "zero":
        return torch.zeros((), dtype=x.dtype)
    h = kcfg.bandwidth if kcfg.bandwidth is not None else median_bandwidth(x)
    k = rbf_kernel(x, h)
    b = x.shape[0]
    return (k * (delta @ delta.T)).sum() / b**2


def svgd_mvl_reference(batch, target, model, kcfg: KernelConfig, *, params=None) -> torch.Tensor:
    """KSD-based value the SVGD estimator tracks: KSD(p, q) minus the model-free score term."""
    x = batch.detach()
    s_p = target.score(x)
    h = kcfg.bandwidth if kcfg.bandwidth is not None else median_bandwidth(x)
    k = rbf_kernel(x, h)
    b = x.shape[0]
    return ksd_vstat(x, target, model, KernelConfig(kcfg.kernel, h), params=params) - (k * (s_p @ s_p.T)).sum() / b**2


# ---------------------------------------------------------------------------
# bias / variance protocol


def bias_oracle_draws(model: EnergyModel, target, K: int, M: int, stream: RngStream, probes: int = 1):
    """K outer points and, for each, M Hutchinson oracle values on the canonical scale."""
    xs = target.sample(K, stream.child("outer"))
    oracle = []
    for k in range(K):
        xk = xs[k : k + 1].expand(M, -1).contiguous()
        oracle.append(exact_sm_hutchinson(xk, model, probes, stream.child(f"oracle:{k}"), scale=2.0).per_sample.detach())
    return xs, oracle


def bias_row(cfg: EstimatorConfig, model: EnergyModel, target, xs, oracle, stream: RngStream) -> dict:
    """Bias/variance statistics of one estimator config against precomputed oracle draws.

    The config's noise stream is derived from its own key, not its position in a grid.
    """
    K, M = len(oracle), oracle[0].shape[0]
    cs = stream.child(f"config:{cfg.kind}:{cfg.eps!r}:{cfg.with_cv}")
    m_k, s2_k, values = [], [], []
    for k in range(K):
        xk = xs[k : k + 1].expand(M, -1).contiguous()
        est = cfg.evaluate(xk, model, cs.child(k), target=target).per_sample.detach()
        diff = oracle[k] - est
        m_k.append(float(diff.mean()))
        s2_k.append(float(diff.var()))
        values.append(est)
    m_k, s2_k = np.asarray(m_k), np.asarray(s2_k)
    allv = torch.cat(values)
    return {
        "estimator": cfg.kind,
        "epsilon": float(cfg.eps),
        "with_cv": bool(cfg.with_cv),
        "mean": float(allv.mean()),
        "sq_bias_ub": float(np.mean(m_k**2)),
        "sq_bias_stderr": float((m_k**2 - s2_k / M).std(ddof=1) / math.sqrt(K)),
        "variance": float(allv.var()),
        "n_outer": K,
        "n_inner": M,
        "mc_floor": float(s2_k.mean() / M),
    }


def bias_variance_report(configs, model: EnergyModel, target, K: int, M: int, stream: RngStream, probes: int = 1) -> list[dict]:
    """Squared-bias upper bound and variance of each estimator config.

    K outer points are drawn once and shared by every config. For each point,
    M inner noise draws feed the estimator; the Hutchinson oracle (on the
    canonical scale) gets its own M probes. With ``m_k`` the inner mean of
    ``oracle - estimator``, ``sq_bias_ub = mean_k m_k^2``. Its Monte Carlo floor
    (expected value under zero bias) is ``mean_k s_k^2 / M``;
    ``sq_bias_stderr`` is the standard error of ``m_k^2 - s_k^2 / M``.
    """
    if K < 2 or M < 2:
        raise ValueError("K and M must be at least 2")
    xs, oracle = bias_oracle_draws(model, target, K, M, stream, probes)
    return [bias_row(cfg, model, target, xs, oracle, stream) for cfg in configs]


def bias_consistent_with_zero(row: dict, n_sigma: float = 2.0) -> bool:
    """Floor-corrected squared bias within ``n_sigma`` standard errors of zero."""
    return row["sq_bias_ub"] - row["mc_floor"] <= n_sigma * row["sq_bias_stderr"]


def with_eps(cfg: EstimatorConfig, eps: float, with_cv: bool | None = None) -> EstimatorConfig:
    return replace(cfg, eps=eps, with_cv=cfg.with_cv if with_cv is None else with_cv)
