"""Toy implicit VAE / WAE with a circle (or Euclidean) latent, scored by an MVL-trained energy.

The encoder is an implicit sampler; its (conditional or aggregated) entropy
gradient comes from a score model that is refreshed by a few MVL steps per
auto-encoder update. The prior term uses the analytic prior score.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import torch

from .core import DTYPE, MlpSpec, RngStream, gradient, mlp_forward
from .energy import BoundCondition, EnergyModel, ambient_score, build_mlp_energy
from .entropy import ImplicitSampler, mlp_sampler, pushforward_sample
from .estimators import EstimatorConfig
from .manifolds import Circle, Euclidean, Manifold
from .targets import Target, ring_mixture, uniform_circle
from .training import OPTIMIZERS, TrainingDiverged

AE_MODES = ("implicit_vae", "wae_kl", "plain_ae")


@dataclass
class AEConfig:
    mode: str = "wae_kl"
    latent: str = "s1"  # "s1" or "euclidean"
    latent_dim: int = 1  # Euclidean latent only
    base_width: int = 2  # encoder noise width; 0 gives a deterministic encoder
    encoder_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (64, 64)
    score_hidden: tuple = (64, 64)
    activation: str = "tanh"
    lam: float = 1.0
    reconstruction: str = "squared_error"
    n_score_steps: int = 3
    score_objective: EstimatorConfig | None = None
    score_learning_rate: float = 4e-3
    batch_size: int = 200
    learning_rate: float = 2e-3
    iterations: int = 1000
    optimizer: str = "adam"
    seed: int = 0
    n_data: int = 2000
    log_every: int = 10
    kde_concentration: float = 50.0
    quadrature_nodes: int = 360

    def __post_init__(self):
        if self.mode not in AE_MODES:
            raise ValueError(f"unknown AE mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.latent not in ("s1", "euclidean"):
            raise ValueError(f"unknown latent space {self.latent!r}")
        if self.reconstruction != "squared_error":
            raise ValueError("only the squared_error reconstruction cost is supported")
        if self.n_score_steps < 0 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("n_score_steps, batch_size and iterations must be non-negative (batch >= 1)")
        if self.mode == "implicit_vae" and self.base_width < 1:
            raise ValueError("the implicit VAE needs a stochastic encoder (base_width >= 1)")
        if self.score_objective is None:
            kind = "mvl_riemannian" if self.latent == "s1" else "mvl_langevin"
            self.score_objective = EstimatorConfig(kind, 1e-3, True)

    @property
    def manifold(self) -> Manifold:
        return Circle() if self.latent == "s1" else Euclidean(self.latent_dim)


@dataclass
class Decoder:
    fn: Callable  # fn(z, params) -> reconstruction
    params: torch.Tensor
    spec: MlpSpec | None = None

    def __call__(self, z, params=None):
        return self.fn(z, self.params if params is None else params)


def mlp_decoder(latent_width: int, out_width: int, hidden=(64, 64), activation="tanh", stream=None) -> Decoder:
    spec = MlpSpec([latent_width, *hidden, out_width], activation)
    params = spec.init_params(stream or RngStream(0))
    return Decoder(lambda z, p: mlp_forward(spec, z, p), params, spec)


def latent_prior(manifold: Manifold) -> Target | None:
    """Uniform prior on S^1; standard normal on Euclidean latents (score only)."""
    if isinstance(manifold, Circle):
        return uniform_circle()
    return None


def prior_score_fn(manifold: Manifold, prior: Target | None = None) -> Callable:
    if prior is not None:
        return prior.score
    if isinstance(manifold, Euclidean):
        return lambda z: -z
    raise ValueError("prior needs an analytic score")


@dataclass
class AEModels:
    encoder: ImplicitSampler
    decoder: Decoder
    score_model: EnergyModel | None
    prior_score: Callable
    score_fresh: bool = False
    stale_count: int = 0

    def mark_used(self):
        if not self.score_fresh:
            self.stale_count += 1
        self.score_fresh = False


def build_ae(cfg: AEConfig, data_width: int = 2, stream: RngStream | None = None) -> AEModels:
    stream = stream or RngStream(cfg.seed)
    m = cfg.manifold
    enc = mlp_sampler(cfg.base_width, m, cfg.encoder_hidden, cfg.activation, cond_width=data_width, stream=stream.child("encoder"))
    dec = mlp_decoder(m.ambient_dim, data_width, cfg.decoder_hidden, cfg.activation, stream.child("decoder"))
    score = None
    if cfg.mode != "plain_ae":
        cond = data_width if cfg.mode == "implicit_vae" else 0
        score = build_mlp_energy(m, cfg.score_hidden, "swish", "contraction", False, stream.child("score"), cond_width=cond)
    return AEModels(enc, dec, score, prior_score_fn(m, latent_prior(m)))


def _contraction(score: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """mean <score, z> with the score treated as a constant."""
    if score.shape != z.shape:
        raise ValueError(f"score shape {tuple(score.shape)} does not match latent shape {tuple(z.shape)}")
    return (score.detach() * z).sum(1).mean()


def _draw(models: AEModels, x, stream, phi, driver=None):
    enc = models.encoder
    if driver is not None:
        return enc.push(driver, phi, x), driver
    return pushforward_sample(enc, x.shape[0], stream, phi, x)


def elbo_surrogate_grad(x: torch.Tensor, models: AEModels, stream: RngStream, *, driver=None, with_prior: bool = True):
    """Gradients ``(d_theta, d_phi)`` of the negative ELBO, plus logged terms.

    Reconstruction ``1/2 |x - G(z)|^2`` (unit-scale Gaussian decoder) by
    reparameterization; prior term via the analytic prior score; conditional
    entropy via the conditional score model bound to ``x``.
    """
    theta = models.decoder.params.detach().clone().requires_grad_(True)
    phi = models.encoder.params.detach().clone().requires_grad_(True)
    z, _ = _draw(models, x, stream, phi, driver)
    sq = ((x - models.decoder(z, theta)) ** 2).sum(1)
    loss = 0.5 * sq.mean()
    if with_prior:
        loss = loss - _contraction(models.prior_score(z.detach()), z)
    models.mark_used()
    cond_model = BoundCondition(models.score_model, x)
    s_q = ambient_score(cond_model, z.detach())
    loss = loss + _contraction(s_q, z)
    g_theta, g_phi = gradient(loss, [theta, phi], create_graph=False)
    return g_theta, g_phi, {"recon": float(sq.mean().detach())}


def wae_loss_grad(x: torch.Tensor, models: AEModels, lam: float, stream: RngStream, *, driver=None):
    """Gradients of ``mean c(x, G(z)) + lam KL(q_agg || p)`` with ``c`` the squared error.

    ``d_phi KL = -entropy_grad(q_agg) - cross_entropy_grad(q_agg, prior)``,
    both as fixed-score contractions over the batch of encoded points.
    """
    theta = models.decoder.params.detach().clone().requires_grad_(True)
    phi = models.encoder.params.detach().clone().requires_grad_(True)
    z, _ = _draw(models, x, stream, phi, driver)
    sq = ((x - models.decoder(z, theta)) ** 2).sum(1)
    loss = sq.mean()
    if lam:
        models.mark_used()
        s_q = ambient_score(models.score_model, z.detach())
        s_p = models.prior_score(z.detach())
        loss = loss + lam * _contraction(s_q - s_p, z)
    g_theta, g_phi = gradient(loss, [theta, phi], create_graph=False)
    return g_theta, g_phi, {"recon": float(sq.mean().detach())}


# ---------------------------------------------------------------------------
# monitoring on S^1


def vm_kde_log_density(points: torch.Tensor, nodes: torch.Tensor, kappa: float) -> torch.Tensor:
    """Log of a von Mises kernel density estimate at angles ``nodes`` from unit vectors ``points``."""
    ang = torch.atan2(points[:, 1], points[:, 0])
    logk = kappa * torch.cos(nodes[:, None] - ang[None, :])
    log_norm = math.log(2 * math.pi) + kappa + math.log(torch.special.i0e(torch.tensor(kappa, dtype=DTYPE)).item())
    return torch.logsumexp(logk, 1) - math.log(points.shape[0]) - log_norm


def kde_kl_uniform(points: torch.Tensor, kappa: float = 50.0, n_nodes: int = 360) -> tuple[float, float]:
    """(entropy, KL to the uniform law) of the KDE of encoded points, by quadrature."""
    m = Circle()
    nodes, w = m.quadrature_grid(n_nodes)
    lq = vm_kde_log_density(points, nodes[:, 0], kappa)
    h = float(-(w * lq.exp() * lq).sum())
    return h, math.log(2 * math.pi) - h


def kde_score_gap(points: torch.Tensor, model: EnergyModel, kappa: float = 50.0, n_nodes: int = 360, h: float = 1e-4) -> float:
    """1/2 int q (s_model - s_kde)^2 over the circle, with the KDE score by central differences."""
    m = Circle()
    nodes, w = m.quadrature_grid(n_nodes)
    th = nodes[:, 0]
    lq = vm_kde_log_density(points, th, kappa)
    s_kde = (vm_kde_log_density(points, th + h, kappa) - vm_kde_log_density(points, th - h, kappa)) / (2 * h)
    x = torch.stack([torch.cos(th), torch.sin(th)], 1)
    s_amb = ambient_score(model, x)
    s_mod = (s_amb * torch.stack([-torch.sin(th), torch.cos(th)], 1)).sum(1)
    return float(0.5 * (w * lq.exp() * (s_mod - s_kde) ** 2).sum())


# ---------------------------------------------------------------------------
# training


@dataclass
class AEHistory:
    rows: list = field(default_factory=list)  # iteration, recon, entropy_term, kl_term, score_loss, score_gap
    recon_init: float = float("nan")
    stale_count: int = 0
    wall_clock: float = 0.0
    latents: torch.Tensor | None = None

    def column(self, name):
        return [r[name] for r in self.rows]


def ring_dataset(n: int, stream: RngStream) -> torch.Tensor:
    return ring_mixture().sample(n, stream)


def _score_step(models: AEModels, x, cfg: AEConfig, stream: RngStream, state):
    with torch.no_grad():
        z, _ = pushforward_sample(models.encoder, x.shape[0], stream.child("z"), None, x)
    model = models.score_model
    target_model = BoundCondition(model, x) if cfg.mode == "implicit_vae" else model
    p = model.params.detach().clone().requires_grad_(True)
    model.refresh(p)
    rep = cfg.score_objective.evaluate(z, target_model, stream.child("noise"), params=p)
    (g,) = gradient(rep.value, [p], create_graph=False)
    loss = float(rep.value.detach())
    if not (math.isfinite(loss) and bool(torch.isfinite(g).all())):
        raise TrainingDiverged(-1, loss, float(g.norm()))
    new, state = OPTIMIZERS["rmsprop"](state, model.params.detach(), g, cfg.score_learning_rate)
    model.params = new
    models.score_fresh = True
    return loss, state


def _encode_eval(models: AEModels, x, stream):
    with torch.no_grad():
        z, _ = pushforward_sample(models.encoder, x.shape[0], stream, None, x)
    return z


def train_ae(cfg: AEConfig, dataset: torch.Tensor | None = None, log=None):
    """Alternate ``n_score_steps`` score-model updates with one auto-encoder update.

    Returns ``(history, models)``. Data defaults to the 8-mode ring mixture.
    """
    stream = RngStream(cfg.seed)
    if dataset is None:
        dataset = ring_dataset(cfg.n_data, stream.child("data"))
    dataset = torch.as_tensor(dataset, dtype=DTYPE)
    models = build_ae(cfg, dataset.shape[1], stream.child("init"))
    eval_x = dataset[: min(500, dataset.shape[0])]
    eval_stream = stream.child("eval")
    step = OPTIMIZERS[cfg.optimizer]
    opt_theta = opt_phi = opt_score = None
    hist = AEHistory()
    use_score = cfg.mode == "implicit_vae" or (cfg.mode == "wae_kl" and cfg.lam > 0)
    t0 = time.perf_counter()
    score_loss = float("nan")

    def record(it):
        z = _encode_eval(models, eval_x, eval_stream)
        with torch.no_grad():
            recon = float(((eval_x - models.decoder(z)) ** 2).sum(1).mean())
        ent = kl = gap = float("nan")
        if isinstance(cfg.manifold, Circle):
            ent, kl = kde_kl_uniform(z, cfg.kde_concentration, cfg.quadrature_nodes)
            if use_score and cfg.mode == "wae_kl":
                gap = kde_score_gap(z, models.score_model, cfg.kde_concentration, cfg.quadrature_nodes)
        row = {"iteration": it, "recon": recon, "entropy_term": ent, "kl_term": kl, "score_loss": score_loss, "score_gap": gap}
        hist.rows.append(row)
        if log:
            log(" ".join(f"{k}={v:.4g}" for k, v in row.items()))
        return recon

    hist.recon_init = record(0)
    n = dataset.shape[0]
    for it in range(1, cfg.iterations + 1):
        it_stream = stream.child(f"iter:{it}")
        if use_score:
            for k in range(cfg.n_score_steps):
                idx = torch.as_tensor(it_stream.child(f"score-batch:{k}").integers(n, (cfg.batch_size,)))
                score_loss, opt_score = _score_step(models, dataset[idx], cfg, it_stream.child(f"score:{k}"), opt_score)
        idx = torch.as_tensor(it_stream.child("batch").integers(n, (cfg.batch_size,)))
        x = dataset[idx]
        if cfg.mode == "implicit_vae":
            g_t, g_p, _ = elbo_surrogate_grad(x, models, it_stream.child("ae"))
        else:
            g_t, g_p, _ = wae_loss_grad(x, models, cfg.lam if cfg.mode == "wae_kl" else 0.0, it_stream.child("ae"))
        if not (bool(torch.isfinite(g_t).all()) and bool(torch.isfinite(g_p).all())):
            raise TrainingDiverged(it, float("nan"), float("nan"))
        models.decoder.params, opt_theta = step(opt_theta, models.decoder.params, g_t, cfg.learning_rate)
        models.encoder.params, opt_phi = step(opt_phi, models.encoder.params, g_p, cfg.learning_rate)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            record(it)
    hist.stale_count = models.stale_count
    hist.latents = _encode_eval(models, eval_x, eval_stream)
    hist.wall_clock = time.perf_counter() - t0
    return hist, models
