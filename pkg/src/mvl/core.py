"""Tensors, nested autodiff helpers, small MLPs, spectral normalization and seeded RNG streams.

Everything runs in double precision on the CPU. Reverse-mode differentiation is
delegated to ``torch.autograd``; every gradient is built with ``create_graph=True``
so it can be differentiated again.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DTYPE = torch.float64
FORMAT_VERSION = 1

ACTIVATIONS = {
    "tanh": torch.tanh,
    "swish": lambda t: t * torch.sigmoid(t),
    "softplus": torch.nn.functional.softplus,
    "identity": lambda t: t,
}


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def gradient(output: torch.Tensor, wrt: Sequence[torch.Tensor], create_graph: bool = True) -> list[torch.Tensor]:
    """Return d(output)/d(w) for each w in ``wrt``.

    The result stays attached to the graph (unless ``create_graph`` is False),
    so it can be differentiated again. Inputs the output does not depend on get
    a zero tensor.
    """
    if output.numel() != 1:
        raise ValueError(f"gradient needs a scalar output, got shape {tuple(output.shape)}")
    for w in wrt:
        if not w.requires_grad:
            raise ValueError("gradient target is not part of the graph (requires_grad is False)")
    if not output.requires_grad:
        return [torch.zeros_like(w) for w in wrt]
    grads = torch.autograd.grad(output.reshape(()), list(wrt), create_graph=create_graph, allow_unused=True)
    return [torch.zeros_like(w) if g is None else g for w, g in zip(wrt, grads)]


# ---------------------------------------------------------------------------
# random streams


class RngStream:
    """Counter-based Gaussian/uniform stream keyed by ``(seed, stream_id)``.

    The Philox key is the first 128 bits of ``blake2b(seed || stream_id)``, so the
    sequence only depends on the pair, not on the host, thread or call order of
    other streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream_id = int(stream_id) & (2**64 - 1)
        digest = hashlib.blake2b(
            self.seed.to_bytes(8, "little") + self.stream_id.to_bytes(8, "little"), digest_size=16
        ).digest()
        key = np.frombuffer(digest, dtype=np.uint64).copy()
        self._bitgen = np.random.Philox(key=key)
        self.generator = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        return int(self._bitgen.state["state"]["counter"][0])

    def child(self, name) -> "RngStream":
        """Derive an independent stream; ``name`` may be an int or a string label."""
        if isinstance(name, str):
            tag = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
        else:
            tag = int(name)
        mixed = int.from_bytes(
            hashlib.blake2b(
                self.stream_id.to_bytes(8, "little") + (tag & (2**64 - 1)).to_bytes(8, "little"), digest_size=8
            ).digest(),
            "little",
        )
        return RngStream(self.seed, mixed)

    def normal(self, shape) -> torch.Tensor:
        return torch.from_numpy(self.generator.standard_normal(shape))

    def uniform(self, shape) -> torch.Tensor:
        return torch.from_numpy(self.generator.random(shape))

    def integers(self, high: int, shape) -> np.ndarray:
        return self.generator.integers(0, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


def gaussian_sample(stream: RngStream, shape) -> torch.Tensor:
    return stream.normal(shape)


# ---------------------------------------------------------------------------
# multilayer perceptrons over a flat parameter vector


@dataclass
class MlpSpec:
    """Architecture plus flat parameter vector.

    Layer ``i`` maps ``widths[i] -> widths[i+1]``; the weight block is stored
    row-major (out, in) followed by the bias. Hidden layers use ``activation``,
    the last layer is affine. With ``spectral_norm`` every weight except the
    final one is divided by its power-iteration estimate of the top singular value.
    """

    widths: list[int]
    activation: str = "swish"
    spectral_norm: bool = False
    params: torch.Tensor | None = None
    sn_state: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"bad widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.params is not None:
            self.params = as_tensor(self.params).reshape(-1)
            if self.params.numel() != self.n_params:
                raise ValueError(f"expected {self.n_params} parameters, got {self.params.numel()}")
        if self.spectral_norm and not self.sn_state:
            # deterministic start vector; refreshed by power iteration during training
            self.sn_state = [torch.ones(w, dtype=DTYPE) / math.sqrt(w) for w in self.widths[1:-1]]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layers(self, params: torch.Tensor):
        out, off = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            w = params[off : off + a * b].reshape(b, a)
            off += a * b
            bias = params[off : off + b]
            off += b
            out.append((w, bias))
        return out

    def init_params(self, stream: RngStream, zero_last: bool = False) -> torch.Tensor:
        """LeCun-uniform weights, zero biases."""
        chunks = []
        n_layers = len(self.widths) - 1
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = math.sqrt(3.0 / a)
            w = (2 * stream.uniform((b, a)) - 1) * bound
            if zero_last and i == n_layers - 1:
                w = torch.zeros_like(w)
            chunks += [w.reshape(-1), torch.zeros(b, dtype=DTYPE)]
        self.params = torch.cat(chunks)
        return self.params

    def refresh_spectral(self, params: torch.Tensor | None = None, iters: int = 1) -> None:
        """Advance the persistent power-iteration vectors (no gradient)."""
        if not self.spectral_norm:
            return
        params = self.params if params is None else params
        with torch.no_grad():
            for i, (w, _) in enumerate(self.layers(params.detach())[:-1]):
                _, self.sn_state[i], _ = _power_iteration(w, self.sn_state[i], iters)

    def copy(self) -> "MlpSpec":
        return MlpSpec(
            list(self.widths),
            self.activation,
            self.spectral_norm,
            None if self.params is None else self.params.detach().clone(),
            [u.clone() for u in self.sn_state],
        )

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "spectral_norm": self.spectral_norm,
            "spectral_state": [[repr(float(v)) for v in u] for u in self.sn_state],
        }


def _power_iteration(w: torch.Tensor, u: torch.Tensor, iters: int):
    v = None
    for _ in range(max(iters, 1)):
        v = w.T @ u
        v = v / v.norm().clamp_min(1e-300)
        u = w @ v
        u = u / u.norm().clamp_min(1e-300)
    sigma = u @ w @ v
    return sigma, u, v


def mlp_forward(spec: MlpSpec, x: torch.Tensor, params: torch.Tensor | None = None) -> torch.Tensor:
    params = spec.params if params is None else params
    if params is None:
        raise ValueError("MLP has no parameters; call init_params first")
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match {spec.widths[0]}")
    act = ACTIVATIONS[spec.activation]
    layers = spec.layers(params)
    h = x
    for i, (w, b) in enumerate(layers):
        if spec.spectral_norm and i < len(layers) - 1:
            u = spec.sn_state[i]
            # u is a constant; sigma = ||W^T u|| stays differentiable in W
            sigma = (w.T @ u).norm()
            w = w / sigma
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = act(h)
    return h


@dataclass
class SpectralResult:
    weight: torch.Tensor
    sigma: float
    degenerate: bool


def spectral_normalize(weight: torch.Tensor, state: torch.Tensor, iters: int = 50) -> SpectralResult:
    """Divide ``weight`` by its power-iteration top singular value; ``state`` is updated in place."""
    if weight.dim() != 2:
        raise ValueError("spectral_normalize needs a matrix")
    if state.shape != (weight.shape[0],):
        raise ValueError(f"state has shape {tuple(state.shape)}, expected ({weight.shape[0]},)")
    with torch.no_grad():
        if float(weight.abs().max()) == 0.0:
            return SpectralResult(weight, 0.0, True)
        sigma, u, _ = _power_iteration(weight, state / state.norm().clamp_min(1e-300), iters)
        state.copy_(u)
    return SpectralResult(weight / sigma, float(sigma), False)


# ---------------------------------------------------------------------------
# serialization


def params_to_json(params: torch.Tensor) -> list[str]:
    return [repr(float(v)) for v in params.detach().reshape(-1)]


def params_from_json(values: list[str]) -> torch.Tensor:
    return torch.tensor([float(v) for v in values], dtype=DTYPE)


def mlp_to_json(spec: MlpSpec, **extra) -> str:
    doc = {"format_version": FORMAT_VERSION, "architecture": {**spec.to_dict(), **extra}, "params": params_to_json(spec.params)}
    return json.dumps(doc, indent=1)


def mlp_from_dict(arch: dict, params: list[str]) -> MlpSpec:
    state = [params_from_json(u) for u in arch.get("spectral_state", [])]
    return MlpSpec(list(arch["widths"]), arch["activation"], bool(arch["spectral_norm"]), params_from_json(params), state)
