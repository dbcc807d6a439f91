"""Parameterized energies E(x; theta) on R^d, S^1 and S^2.

Every model keeps its parameters as one flat double tensor; all evaluation
functions accept an explicit ``params`` override so estimators can build
graphs over a ``requires_grad`` copy. Manifold models are functions of the
ambient coordinates; chart inputs are embedded first.
"""
from __future__ import annotations

import json
from typing import Callable

import torch

from .core import DTYPE, FORMAT_VERSION, MlpSpec, RngStream, as_tensor, gradient, mlp_forward, params_from_json, params_to_json
from .manifolds import ChartPoint, Euclidean, Manifold, manifold_from_dict, manifold_to_dict


class EnergyModel:
    manifold: Manifold
    params: torch.Tensor
    cond_width: int = 0

    def ambient_energy(self, x: torch.Tensor, params: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        raise NotImplementedError

    @property
    def input_width(self) -> int:
        return self.manifold.ambient_dim

    def energy(self, x, params=None, cond=None) -> torch.Tensor:
        """Per-sample energies, shape (B,)."""
        params = self.params if params is None else params
        if isinstance(x, ChartPoint):
            x = self.manifold.embed(x)
        if x.dim() != 2 or x.shape[1] != self.input_width:
            raise ValueError(f"expected inputs of width {self.input_width}, got shape {tuple(x.shape)}")
        if cond is not None:
            if self.cond_width == 0:
                raise ValueError("model has no conditioning input")
            if cond.shape != (x.shape[0], self.cond_width):
                raise ValueError(f"condition shape {tuple(cond.shape)} does not match ({x.shape[0]}, {self.cond_width})")
        elif self.cond_width:
            raise ValueError("conditional model needs a condition")
        return self.ambient_energy(x, params, cond)

    def refresh(self, params=None) -> None:
        """Per-training-step state update (spectral power iteration)."""

    def copy(self) -> "EnergyModel":
        raise NotImplementedError

    def with_params(self, params: torch.Tensor) -> "EnergyModel":
        out = self.copy()
        out.params = params.detach().clone()
        return out


class MlpEnergy(EnergyModel):
    """``raw_mlp``: scalar network head. ``contraction``: x . psi(x) (conditional: z . psi([z, c]))."""

    def __init__(self, spec: MlpSpec, parameterization: str = "contraction", manifold: Manifold | None = None, cond_width: int = 0):
        self.spec = spec
        self.parameterization = parameterization
        self.manifold = manifold or Euclidean(spec.widths[0] - cond_width)
        self.cond_width = cond_width
        width = self.manifold.ambient_dim
        if spec.widths[0] != width + cond_width:
            raise ValueError(f"network input width {spec.widths[0]} != {width} + {cond_width}")
        if parameterization == "contraction" and spec.widths[-1] != width:
            raise ValueError("contraction form needs psi output width equal to the input width")
        if parameterization == "raw_mlp" and spec.widths[-1] != 1:
            raise ValueError("raw_mlp needs a scalar head")
        if parameterization not in ("contraction", "raw_mlp"):
            raise ValueError(f"unknown parameterization {parameterization!r}")

    @property
    def params(self):
        return self.spec.params

    @params.setter
    def params(self, value):
        self.spec.params = value

    def ambient_energy(self, x, params, cond=None):
        inp = x if cond is None else torch.cat([x, cond], dim=1)
        out = mlp_forward(self.spec, inp, params)
        if self.parameterization == "contraction":
            return (x * out).sum(1)
        return out[:, 0]

    def refresh(self, params=None):
        self.spec.refresh_spectral(params, iters=1)

    def copy(self):
        return MlpEnergy(self.spec.copy(), self.parameterization, self.manifold, self.cond_width)


def build_mlp_energy(
    manifold: Manifold,
    hidden=(100, 100),
    activation="swish",
    parameterization="contraction",
    spectral_norm=False,
    stream: RngStream | None = None,
    cond_width: int = 0,
    zero: bool = False,
) -> MlpEnergy:
    width = manifold.ambient_dim
    head = width if parameterization == "contraction" else 1
    spec = MlpSpec([width + cond_width, *hidden, head], activation, spectral_norm)
    if zero:
        spec.params = torch.zeros(spec.n_params, dtype=DTYPE)
    else:
        spec.init_params(stream or RngStream(0))
    return MlpEnergy(spec, parameterization, manifold, cond_width)


class GaussianEnergy(EnergyModel):
    """E(x) = |x - mu|^2 / (2 s); params = (mu_1..mu_d, log s)."""

    def __init__(self, mean, scale=1.0, manifold: Manifold | None = None):
        mean = as_tensor(mean).reshape(-1)
        self.manifold = manifold or Euclidean(mean.numel())
        self.params = torch.cat([mean, torch.log(as_tensor([scale]))])

    def ambient_energy(self, x, params, cond=None):
        mu, log_s = params[:-1], params[-1]
        return ((x - mu) ** 2).sum(1) / (2 * torch.exp(log_s))

    def copy(self):
        out = GaussianEnergy(self.params[:-1].clone(), 1.0, self.manifold)
        out.params = self.params.detach().clone()
        return out


class FunctionEnergy(EnergyModel):
    """Wrap ``fn(x, params) -> (B,)``; used for analytic test energies."""

    def __init__(self, fn: Callable, params=None, manifold: Manifold | None = None, width: int | None = None, cond_width: int = 0):
        self.fn = fn
        self.params = torch.zeros(0, dtype=DTYPE) if params is None else as_tensor(params).reshape(-1)
        self.manifold = manifold or Euclidean(width or 2)
        self.cond_width = cond_width

    def ambient_energy(self, x, params, cond=None):
        return self.fn(x, params) if cond is None else self.fn(x, params, cond)

    def copy(self):
        return FunctionEnergy(self.fn, self.params.clone(), self.manifold, cond_width=self.cond_width)


class TargetEnergy(EnergyModel):
    """Exact energy -log p~ of an analytic target (no parameters)."""

    def __init__(self, target):
        self.target = target
        self.manifold = target.manifold
        self.params = torch.zeros(0, dtype=DTYPE)

    def ambient_energy(self, x, params, cond=None):
        return -self.target.unnorm_log_density(x)

    def copy(self):
        return TargetEnergy(self.target)


def quadratic_energy(d: int = 2) -> FunctionEnergy:
    return FunctionEnergy(lambda x, p: 0.5 * (x**2).sum(1), width=d)


def zero_energy(manifold: Manifold) -> FunctionEnergy:
    return FunctionEnergy(lambda x, p: torch.zeros(x.shape[0], dtype=DTYPE) + 0.0 * x.sum(1), manifold=manifold)


# ---------------------------------------------------------------------------


def energy(model: EnergyModel, x, params=None) -> torch.Tensor:
    return model.energy(x, params)


def grad_energy(model: EnergyModel, x, params=None, cond=None, create_graph: bool = True):
    """Coordinate gradient of E, plus the energies.

    For a :class:`ChartPoint` the derivative is taken w.r.t. chart coordinates
    through ``embed``; otherwise w.r.t. the Euclidean input. Returns
    ``(grad (B, k), energies (B,))``. The graph is kept so the result can be
    differentiated in ``params`` (and again in x).
    """
    if isinstance(x, ChartPoint):
        coords = x.coords if x.coords.requires_grad else x.coords.detach().requires_grad_(True)
        e = model.energy(model.manifold.embed(x.with_coords(coords)), params, cond)
        (g,) = gradient(e.sum(), [coords], create_graph=create_graph)
        return g, e
    xx = x if x.requires_grad else x.detach().requires_grad_(True)
    e = model.energy(xx, params, cond)
    (g,) = gradient(e.sum(), [xx], create_graph=create_graph)
    return g, e


def conditional_energy(model: EnergyModel, z, cond, params=None) -> torch.Tensor:
    if model.cond_width == 0:
        raise ValueError("model was built without a conditioning width")
    return model.energy(z, params, cond)


def ambient_score(model: EnergyModel, x: torch.Tensor, params=None, cond=None, create_graph: bool = False) -> torch.Tensor:
    """-grad_x E at ambient points, projected onto the tangent space for manifolds."""
    g, _ = grad_energy(model, x, params, cond, create_graph=create_graph)
    return -model.manifold.tangent_project(x, g)


def energy_l2_penalty(model: EnergyModel, x, params=None, cond=None) -> torch.Tensor:
    return (model.energy(x, params, cond) ** 2).mean()


# ---------------------------------------------------------------------------
# serialization


def model_to_json(model: EnergyModel) -> str:
    if isinstance(model, MlpEnergy):
        arch = {
            "model": "mlp",
            **model.spec.to_dict(),
            "parameterization": model.parameterization,
            "manifold": manifold_to_dict(model.manifold),
            "cond_width": model.cond_width,
        }
    elif isinstance(model, GaussianEnergy):
        arch = {"model": "gaussian", "manifold": manifold_to_dict(model.manifold)}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return json.dumps({"format_version": FORMAT_VERSION, "architecture": arch, "params": params_to_json(model.params)}, indent=1)


def model_from_json(text: str) -> EnergyModel:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')!r}")
    arch = doc["architecture"]
    params = params_from_json(doc["params"])
    manifold = manifold_from_dict(arch["manifold"])
    if arch["model"] == "gaussian":
        m = GaussianEnergy(params[:-1], 1.0, manifold)
        m.params = params
        return m
    state = [params_from_json(u) for u in arch.get("spectral_state", [])]
    spec = MlpSpec(list(arch["widths"]), arch["activation"], bool(arch["spectral_norm"]), params, state)
    return MlpEnergy(spec, arch["parameterization"], manifold, int(arch.get("cond_width", 0)))


class BoundCondition(EnergyModel):
    """View of a conditional model with the condition fixed row-by-row to a batch.

    Lets the unconditional estimators and samplers drive a conditional score
    model; parameters are shared with (not copied from) the wrapped model.
    """

    def __init__(self, model: EnergyModel, cond: torch.Tensor):
        if model.cond_width == 0:
            raise ValueError("model was built without a conditioning width")
        self.model = model
        self.cond = cond.detach()
        self.manifold = model.manifold

    @property
    def params(self):
        return self.model.params

    @params.setter
    def params(self, value):
        self.model.params = value

    def ambient_energy(self, x, params, cond=None):
        if x.shape[0] != self.cond.shape[0]:
            raise ValueError(f"bound condition has {self.cond.shape[0]} rows, batch has {x.shape[0]}")
        return self.model.ambient_energy(x, params, self.cond)

    def refresh(self, params=None):
        self.model.refresh(params)

    def copy(self):
        return BoundCondition(self.model.copy(), self.cond)
