"""Optimizers and the minibatch training loop for energy models."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import torch

from .core import RngStream, gradient
from .energy import EnergyModel, energy_l2_penalty
from .estimators import EstimatorConfig, cd1_param_grad
from .targets import Target

RMS_DECAY = 0.9
OPT_EPS = 1e-8
ADAM_BETAS = (0.9, 0.999)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float, grad_norm: float):
        super().__init__(f"non-finite training loss at iteration {iteration}: loss={loss}, |grad|={grad_norm}")
        self.iteration = iteration
        self.loss = loss


def rmsprop_step(state, params: torch.Tensor, grads: torch.Tensor, lr: float):
    """Returns ``(new_params, new_state)``; ``state`` is None on the first call."""
    if params.shape != grads.shape:
        raise ValueError(f"parameter shape {tuple(params.shape)} != gradient shape {tuple(grads.shape)}")
    acc = torch.zeros_like(params) if state is None else state["acc"]
    acc = RMS_DECAY * acc + (1 - RMS_DECAY) * grads**2
    return params - lr * grads / torch.sqrt(acc + OPT_EPS), {"acc": acc}


def adam_step(state, params: torch.Tensor, grads: torch.Tensor, lr: float):
    if params.shape != grads.shape:
        raise ValueError(f"parameter shape {tuple(params.shape)} != gradient shape {tuple(grads.shape)}")
    b1, b2 = ADAM_BETAS
    if state is None:
        state = {"m": torch.zeros_like(params), "v": torch.zeros_like(params), "t": 0}
    t = state["t"] + 1
    m = b1 * state["m"] + (1 - b1) * grads
    v = b2 * state["v"] + (1 - b2) * grads**2
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return params - lr * mhat / (torch.sqrt(vhat) + OPT_EPS), {"m": m, "v": v, "t": t}


OPTIMIZERS = {"rmsprop": rmsprop_step, "adam": adam_step}


@dataclass
class TrainConfig:
    objective: EstimatorConfig = field(default_factory=EstimatorConfig)
    batch_size: int = 200
    learning_rate: float = 4e-3
    iterations: int = 400
    optimizer: str = "rmsprop"
    seed: int = 0
    heldout_fraction: float = 0.1
    early_stop_patience: int = 0  # in heldout evaluations; 0 disables
    energy_l2_coefficient: float = 0.0
    eval_every: int = 50
    heldout_size: int = 1000  # heldout draws when the data source is a Target

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.heldout_fraction < 1:
            raise ValueError("heldout_fraction must lie in [0, 1)")
        if self.iterations < 0 or self.eval_every < 1:
            raise ValueError("iterations must be >= 0 and eval_every >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    heldout: list = field(default_factory=list)  # (iteration, loss)
    wall_clock: float = 0.0
    final_params: torch.Tensor | None = None
    best_iteration: int | None = None
    stopped_early: bool = False

    def heldout_at(self, it: int):
        for i, v in self.heldout:
            if i == it:
                return v
        return None

    def rows(self):
        held = dict(self.heldout)
        return [
            {"iteration": i, "train_loss": loss, "heldout_loss": held.get(i, float("nan"))}
            for i, loss in enumerate(self.train_loss, start=1)
        ]

    def moving_average(self, window: int = 100):
        x = torch.tensor(self.train_loss, dtype=torch.float64)
        if len(x) < window:
            return x.cumsum(0) / torch.arange(1, len(x) + 1)
        c = torch.cat([torch.zeros(1, dtype=x.dtype), x.cumsum(0)])
        return (c[window:] - c[:-window]) / window


def _heldout_objective(obj: EstimatorConfig) -> EstimatorConfig:
    # CD-1 is a gradient rule; monitor it with the MVL loss at the same step size
    if obj.kind == "cd1":
        return EstimatorConfig("mvl_langevin", obj.eps, True)
    return obj


class _Batches:
    """Fresh draws from a Target, or per-epoch shuffles of a fixed dataset."""

    def __init__(self, source, cfg: TrainConfig, stream: RngStream):
        self.cfg = cfg
        self.stream = stream
        if isinstance(source, Target):
            self.target = source
            self.heldout = source.sample(cfg.heldout_size, stream.child("heldout-data"))
            self.data = None
        else:
            self.target = None
            data = torch.as_tensor(source, dtype=torch.float64)
            perm = torch.as_tensor(stream.child("split").permutation(data.shape[0]))
            n_held = int(round(cfg.heldout_fraction * data.shape[0]))
            self.heldout = data[perm[:n_held]] if n_held else data[perm[: min(len(perm), cfg.heldout_size)]]
            self.data = data[perm[n_held:]]
            if self.data.shape[0] == 0:
                raise ValueError("no training data left after the heldout split")
            self._order = None
            self._pos = 0
            self._epoch = 0

    def next(self, it: int) -> torch.Tensor:
        if self.target is not None:
            return self.target.sample(self.cfg.batch_size, self.stream.child(f"batch:{it}"))
        out = []
        need = self.cfg.batch_size
        while need > 0:
            if self._order is None or self._pos >= len(self._order):
                self._order = torch.as_tensor(self.stream.child(f"epoch:{self._epoch}").permutation(self.data.shape[0]))
                self._epoch += 1
                self._pos = 0
            take = self._order[self._pos : self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(self.data[take])
        return torch.cat(out)


def objective_grad(model: EnergyModel, batch, cfg: TrainConfig, stream: RngStream, params: torch.Tensor, target=None):
    """Loss value and parameter gradient for one minibatch."""
    obj = cfg.objective
    if obj.kind == "cd1":
        g = cd1_param_grad(batch, model, obj.eps, obj.with_cv, stream.child("cd1"), params=params)
        # CD-1 has no loss of its own; log the MVL loss on the same batch
        loss = heldout_loss(model, batch, obj, stream.child("monitor"), params=params)
        if cfg.energy_l2_coefficient:
            p = params.detach().clone().requires_grad_(True)
            (g2,) = gradient(cfg.energy_l2_coefficient * energy_l2_penalty(model, batch, p), [p], create_graph=False)
            g = g + g2
        return loss, g
    p = params.detach().clone().requires_grad_(True)
    report = obj.evaluate(batch, model, stream, params=p, target=target)
    loss = report.value
    if cfg.energy_l2_coefficient:
        loss = loss + cfg.energy_l2_coefficient * energy_l2_penalty(model, batch, p)
    (g,) = gradient(loss, [p], create_graph=False)
    return float(loss.detach()), g.detach()


def heldout_loss(model: EnergyModel, data, obj: EstimatorConfig, stream: RngStream, params=None, target=None) -> float:
    """Objective on fixed heldout data with a fixed noise stream (comparable across calls)."""
    return float(_heldout_objective(obj).evaluate(data, model, stream, params=params, target=target).value.detach())


def train_energy_model(model: EnergyModel, source, cfg: TrainConfig, stream: RngStream | None = None, log=None) -> TrainHistory:
    """Minibatch training; updates ``model.params`` in place and returns the history.

    ``source`` is a :class:`Target` (fresh samples each iteration) or a data
    tensor (heldout split, then per-epoch shuffles).
    """
    stream = stream or RngStream(cfg.seed)
    if cfg.objective.kind in ("mvl_langevin", "dsm", "cd1", "exact_fd") and model.manifold.kind != "euclidean":
        raise ValueError(f"objective {cfg.objective.kind} needs a Euclidean model, got {model.manifold.kind}")
    if cfg.objective.kind == "mvl_riemannian" and model.manifold.kind == "euclidean":
        raise ValueError("mvl_riemannian needs a manifold model")
    batches = _Batches(source, cfg, stream.child("data"))
    target = batches.target
    step = OPTIMIZERS[cfg.optimizer]
    params = model.params.detach().clone()
    state = None
    hist = TrainHistory()
    best = (float("inf"), params.clone(), 0)
    bad_evals = 0
    t0 = time.perf_counter()

    def evaluate(it):
        model.params = params
        v = heldout_loss(model, batches.heldout, cfg.objective, stream.child("heldout-noise"), params=params, target=target)
        hist.heldout.append((it, v))
        return v

    for it in range(1, cfg.iterations + 1):
        model.refresh(params)
        batch = batches.next(it)
        loss, g = objective_grad(model, batch, cfg, stream.child(f"noise:{it}"), params, target)
        gnorm = float(g.norm())
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            model.params = params
            raise TrainingDiverged(it, loss, gnorm)
        params, state = step(state, params, g, cfg.learning_rate)
        hist.train_loss.append(loss)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            v = evaluate(it)
            if log:
                log(f"iter {it} train {loss:.5g} heldout {v:.5g}")
            if v < best[0]:
                best = (v, params.clone(), it)
                bad_evals = 0
            else:
                bad_evals += 1
            if cfg.early_stop_patience and bad_evals >= cfg.early_stop_patience:
                hist.stopped_early = True
                break

    if cfg.early_stop_patience and best[0] < float("inf"):
        params = best[1]
        hist.best_iteration = best[2]
    model.params = params.detach().clone()
    hist.final_params = model.params.clone()
    hist.wall_clock = time.perf_counter() - t0
    return hist
