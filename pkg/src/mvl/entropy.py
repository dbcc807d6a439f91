"""Entropy gradients of implicit (pushforward) distributions from a score estimate.

For z = f(eps; phi) the entropy gradient is ``-E[<score_q(z), d z / d phi>]``
with the score held fixed, so any score model (exact or a trained energy)
can be plugged in. On spheres the score is an ambient tangent vector and the
projection u / |u| is part of f.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .core import DTYPE, MlpSpec, RngStream, as_tensor, gradient, mlp_forward
from .energy import EnergyModel, ambient_score
from .manifolds import Euclidean, Manifold

MIN_NORM = 1e-12
MAX_RESAMPLE = 16


class PushforwardError(ValueError):
    pass


@dataclass
class ImplicitSampler:
    """z = f(eps; phi) with eps ~ N(0, I_base_width), optionally conditioned on c."""

    fn: Callable  # fn(eps, params, cond) -> raw output u (B, ambient)
    params: torch.Tensor
    base_width: int
    manifold: Manifold = field(default_factory=lambda: Euclidean(1))
    cond_width: int = 0
    spec: MlpSpec | None = None

    def push(self, eps: torch.Tensor, params=None, cond=None) -> torch.Tensor:
        params = self.params if params is None else params
        if self.cond_width and cond is None:
            raise ValueError("conditional sampler needs a condition")
        if cond is not None and cond.shape != (eps.shape[0], self.cond_width):
            raise ValueError(f"condition shape {tuple(cond.shape)} does not match ({eps.shape[0]}, {self.cond_width})")
        u = self.fn(eps, params, cond)
        if u.shape[1] != self.manifold.ambient_dim:
            raise ValueError(f"pushforward output width {u.shape[1]} != manifold ambient width {self.manifold.ambient_dim}")
        if isinstance(self.manifold, Euclidean):
            return u
        return u / u.norm(dim=1, keepdim=True)

    def raw(self, eps, params=None, cond=None):
        return self.fn(eps, self.params if params is None else params, cond)

    def copy(self):
        return ImplicitSampler(self.fn, self.params.detach().clone(), self.base_width, self.manifold, self.cond_width, self.spec)


def mlp_sampler(base_width: int, manifold: Manifold, hidden=(64, 64), activation="tanh", cond_width: int = 0, stream: RngStream | None = None) -> ImplicitSampler:
    spec = MlpSpec([base_width + cond_width, *hidden, manifold.ambient_dim], activation)
    params = spec.init_params(stream or RngStream(0))

    def fn(eps, p, cond=None):
        inp = eps if cond is None else torch.cat([eps, cond], dim=1)
        return mlp_forward(spec, inp, p)

    return ImplicitSampler(fn, params, base_width, manifold, cond_width, spec)


def affine_sampler(mu, sigma) -> ImplicitSampler:
    """1-D Euclidean z = mu + sigma * eps; params (mu, sigma)."""
    return ImplicitSampler(lambda e, p, c=None: p[0] + p[1] * e, as_tensor([mu, sigma]), 1, Euclidean(1))


def identity_sampler(d: int) -> ImplicitSampler:
    return ImplicitSampler(lambda e, p, c=None: e + 0.0 * p.sum(), torch.zeros(1, dtype=DTYPE), d, Euclidean(d))


def wrapped_angle_sampler(mu, sigma) -> ImplicitSampler:
    """S^1 point at angle mu + sigma * eps (a wrapped normal); params (mu, sigma)."""
    from .manifolds import Circle

    def fn(e, p, c=None):
        a = p[0] + p[1] * e[:, 0]
        return torch.stack([torch.cos(a), torch.sin(a)], dim=1)

    return ImplicitSampler(fn, as_tensor([mu, sigma]), 1, Circle())


def pushforward_sample(s: ImplicitSampler, n: int, stream: RngStream, params=None, cond=None):
    """Returns ``(z, eps)``; z is a graph node in ``params`` when it requires grad.

    Base draws whose pre-projection output vanishes are redrawn (sphere outputs).
    """
    eps = stream.normal((n, s.base_width))
    if not isinstance(s.manifold, Euclidean):
        for attempt in range(MAX_RESAMPLE):
            with torch.no_grad():
                bad = s.raw(eps, params, cond).norm(dim=1) < MIN_NORM
            if not bool(bad.any()):
                break
            eps[bad] = stream.child(f"resample:{attempt}").normal((int(bad.sum()), s.base_width))
        else:
            raise PushforwardError("pushforward output keeps vanishing before projection")
    return s.push(eps, params, cond), eps


def _contract(s: ImplicitSampler, score_fn, n, stream, cond, sign: float):
    phi = s.params.detach().clone().requires_grad_(True)
    z, _ = pushforward_sample(s, n, stream, phi, cond)
    sc = torch.as_tensor(score_fn(z.detach()), dtype=z.dtype).detach()
    if sc.shape != z.shape:
        raise ValueError(f"score shape {tuple(sc.shape)} does not match sample shape {tuple(z.shape)}")
    surrogate = sign * (sc * z).sum(1).mean()
    (g,) = gradient(surrogate, [phi], create_graph=False)
    return g


def entropy_grad(s: ImplicitSampler, score_fn: Callable, n: int, stream: RngStream, cond=None) -> torch.Tensor:
    """d/dphi of the entropy: ``-mean <score(z), dz/dphi>`` with the score held fixed."""
    return _contract(s, score_fn, n, stream, cond, -1.0)


def cross_entropy_grad(s: ImplicitSampler, prior_score: Callable, n: int, stream: RngStream, cond=None) -> torch.Tensor:
    """d/dphi of ``E_q[log p(z)]``: ``mean <score_p(z), dz/dphi>``."""
    return _contract(s, prior_score, n, stream, cond, 1.0)


def model_score_fn(model: EnergyModel, cond=None) -> Callable:
    """-grad E as an ambient tangent vector, usable as ``score_fn``."""

    def fn(z):
        with torch.enable_grad():
            return ambient_score(model, z, cond=cond).detach()

    return fn
