"""Experiment runners behind the CLI: training, bias/variance sweeps, density grids,
the CD-1 comparison and the auto-encoder demo."""
from __future__ import annotations

import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import figures
from .autoencoder import train_ae
from .config import ExperimentConfig, as_list
from .core import DTYPE, RngStream, mlp_to_json
from .energy import EnergyModel, GaussianEnergy, build_mlp_energy, model_from_json, model_to_json
from .estimators import EstimatorConfig, bias_oracle_draws, bias_row, exact_sm_fd
from .manifolds import Circle, Manifold, Sphere2
from .svg import AxesSpec, svg_plot
from .tables import ResultTable, atomic_write, loglog_slope, max_min_ratio, write_json
from .targets import Target, target_from_config
from .training import TrainConfig, TrainHistory, train_energy_model

SWEEP_COLUMNS = ["estimator", "epsilon", "with_cv", "mean", "sq_bias_ub", "sq_bias_stderr", "variance", "n_outer", "n_inner", "mc_floor"]
CD1_COLUMNS = ["method", "epsilon", "seed", "final_loss"]
CD1_METHODS = ("cd1+cv", "cd1", "mvl+cv", "mvl", "oracle")
DEFAULT_EPS_GRID = [10 ** (-5 + 0.5 * i) for i in range(7)]
LIST_KEYS = ("weights", "angles", "locs", "kappas", "sigmas", "mean", "std")


# ---------------------------------------------------------------------------
# builders


def build_target(sec: dict) -> Target:
    sec = {k: (as_list(v) if k in LIST_KEYS else v) for k, v in sec.items()}
    return target_from_config(sec)


def build_model(sec: dict, manifold: Manifold, stream: RngStream) -> EnergyModel:
    kind = sec.get("kind", "mlp")
    if kind == "gaussian":
        return GaussianEnergy(torch.zeros(manifold.dim, dtype=DTYPE), float(sec.get("scale", 1.0)), manifold)
    if kind != "mlp":
        raise ValueError(f"unknown model kind {kind!r}")
    default_act = "tanh" if manifold.kind != "euclidean" else "swish"
    return build_mlp_energy(
        manifold,
        hidden=tuple(int(h) for h in as_list(sec.get("hidden", [100, 100]))),
        activation=sec.get("activation", default_act),
        parameterization=sec.get("parameterization", "contraction"),
        spectral_norm=bool(sec.get("spectral_norm", manifold.kind == "euclidean")),
        stream=stream,
    )


def metadata(cfg: ExperimentConfig, started: float, **extra) -> dict:
    """Wall-clock and host details; kept out of the reproducible outputs."""
    return {
        "experiment": cfg.kind,
        "config": cfg.source,
        "seed": cfg.seed,
        "wall_clock_seconds": time.perf_counter() - started,
        "python": platform.python_version(),
        "torch": torch.__version__,
        **extra,
    }


def history_table(hist: TrainHistory) -> ResultTable:
    return ResultTable(["iteration", "train_loss", "heldout_loss"], hist.rows())


def train_from_config(cfg: ExperimentConfig, log=None):
    target = build_target(cfg.target)
    stream = RngStream(cfg.seed)
    model = build_model(cfg.model, target.manifold, stream.child("model-init"))
    hist = train_energy_model(model, target, cfg.train, stream.child("train"), log=log)
    return model, target, hist


# ---------------------------------------------------------------------------
# bias / variance sweep


def sweep_grid(eps_list, kinds=("mvl_langevin", "dsm"), cvs=(True, False)) -> list[EstimatorConfig]:
    return [EstimatorConfig(k, float(e), bool(cv)) for k in kinds for cv in cvs for e in eps_list]


def sweep_bias_variance(configs, model: EnergyModel, target: Target, K: int = 50, M: int = 5000, seed: int = 0, workers: int = 1, probes: int = 1) -> ResultTable:
    """One row per (estimator, epsilon, with_cv); the oracle draws are shared by all rows.

    Rows are computed in a worker pool, each from a stream derived from its own
    grid key, and merged in grid order, so ``workers`` never changes the output.
    """
    if K < 2 or M < 2:
        raise ValueError("K and M must be at least 2")
    stream = RngStream(seed).child("sweep")
    xs, oracle = bias_oracle_draws(model, target, K, M, stream, probes)

    def run(c):
        return bias_row(c, model, target, xs, oracle, stream)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, configs))
    else:
        rows = [run(c) for c in configs]
    return ResultTable(SWEEP_COLUMNS, rows)


def sweep_summary(table: ResultTable) -> dict:
    out = {}
    for est in sorted(set(table.column("estimator"))):
        for cv in (True, False):
            sub = table.where(estimator=est, with_cv=cv)
            if len(sub) < 3:
                continue
            key = f"{est}{'+cv' if cv else ''}"
            out[key] = {"variance_slope": loglog_slope(sub, "epsilon", "variance"), "variance_max_min": max_min_ratio(sub.column("variance"))}
    return out


# ---------------------------------------------------------------------------
# density grid


def _grid_points(manifold: Manifold, resolution):
    nodes, w = manifold.quadrature_grid(resolution)
    if isinstance(manifold, Circle):
        th = nodes[:, 0]
        return nodes, w, torch.stack([torch.cos(th), torch.sin(th)], 1)
    if isinstance(manifold, Sphere2):
        return nodes, w, Sphere2.standard_embed(nodes)
    raise ValueError(f"density grids need S^1 or S^2, got {manifold.kind}")


def log_normalized(neg_energy: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return neg_energy - torch.logsumexp(neg_energy + torch.log(w), 0)


def density_grid(model: EnergyModel, manifold: Manifold | None = None, resolution=360, reference: Target | None = None) -> ResultTable:
    """Energy, quadrature-normalized log density (and optional reference) per grid node."""
    manifold = manifold or model.manifold
    nodes, w, amb = _grid_points(manifold, resolution)
    with torch.no_grad():
        e = model.energy(amb).detach()
    lq = log_normalized(-e, w)
    cols = ["theta", "energy", "log_density", "weight"] if isinstance(manifold, Circle) else ["theta", "phi", "energy", "log_density", "weight"]
    ref = None
    if reference is not None:
        cols.append("reference_log_density")
        ref = log_normalized(reference.unnorm_log_density(amb).detach(), w)
    rows = []
    for i in range(nodes.shape[0]):
        r = {"theta": float(nodes[i, 0]), "energy": float(e[i]), "log_density": float(lq[i]), "weight": float(w[i])}
        if not isinstance(manifold, Circle):
            r["phi"] = float(nodes[i, 1])
        if ref is not None:
            r["reference_log_density"] = float(ref[i])
        rows.append(r)
    return ResultTable(cols, rows)


def density_summary(table: ResultTable) -> dict:
    lq = np.asarray(table.column("log_density"))
    w = np.asarray(table.column("weight"))
    out = {"normalization": float((np.exp(lq) * w).sum()), "nodes": len(table)}
    if "reference_log_density" in table.columns:
        lp = np.asarray(table.column("reference_log_density"))
        out["max_abs_log_density_error"] = float(np.abs(lq - lp).max())
        out["weighted_energy_correlation"] = weighted_corr(lq, lp, w)
    return out


def weighted_corr(a, b, w) -> float:
    c = np.cov(np.asarray(a), np.asarray(b), aweights=np.asarray(w))
    return float(c[0, 1] / math.sqrt(c[0, 0] * c[1, 1]))


# ---------------------------------------------------------------------------
# CD-1 comparison


def _method_objective(method: str, eps: float) -> EstimatorConfig:
    if method == "oracle":
        return EstimatorConfig("exact_hutchinson", eps)
    kind, cv = method.split("+")[0], method.endswith("+cv")
    return EstimatorConfig("mvl_langevin" if kind == "mvl" else "cd1", eps, cv)


def cd1_compare(
    target: Target,
    model_sec: dict,
    train: TrainConfig,
    eps_list=(1e-5, 1e-4, 1e-3, 1e-2),
    methods=CD1_METHODS,
    seeds=(0, 1, 2),
    eval_n: int = 2000,
    workers: int = 1,
    log=None,
) -> ResultTable:
    """Final exact score-matching loss (finite-difference oracle) per (method, epsilon, seed).

    The oracle objective does not depend on epsilon; its rows carry epsilon = 0.
    """
    eval_x = target.sample(eval_n, RngStream(0).child("cd1-eval"))
    jobs = []
    for method in methods:
        for seed in seeds:
            for e in ([0.0] if method == "oracle" else eps_list):
                jobs.append((method, float(e), int(seed)))

    def run(job):
        method, e, seed = job
        stream = RngStream(seed)
        model = build_model(model_sec, target.manifold, stream.child("model-init"))
        cfg = replace(train, objective=_method_objective(method, e if e > 0 else 1e-3), seed=seed)
        train_energy_model(model, target, cfg, stream.child(f"train:{method}:{e!r}"))
        loss = float(exact_sm_fd(eval_x, model).value.detach())
        if log:
            log(f"{method} eps={e:g} seed={seed} final_loss={loss:.5g}")
        return {"method": method, "epsilon": e, "seed": seed, "final_loss": loss}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    return ResultTable(CD1_COLUMNS, rows)


def cd1_summary(table: ResultTable) -> dict:
    out = {}
    for method in sorted(set(table.column("method"))):
        for e in sorted(set(table.where(method=method).column("epsilon"))):
            out[f"{method}@{e:g}"] = float(np.mean(table.where(method=method, epsilon=e).column("final_loss")))
    return out


# ---------------------------------------------------------------------------
# CLI-facing runners; each returns a small summary dict


def run_train(cfg: ExperimentConfig, out: Path, log=None) -> dict:
    t0 = time.perf_counter()
    model, target, hist = train_from_config(cfg, log)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "model.json", model_to_json(model))
    table = history_table(hist)
    table.write_csv(out / "history.csv")
    svg_plot(table, AxesSpec("iteration", "train_loss", title="training loss"), out / "history.svg")
    summary = {"final_train_loss": hist.train_loss[-1] if hist.train_loss else float("nan"), "heldout": hist.heldout[-1][1] if hist.heldout else None}
    if model.manifold.kind != "euclidean":
        dens = density_grid(model, reference=target)
        dens.write_csv(out / "density.csv")
        summary.update(density_summary(dens))
        fig = figures.density_s1_figure if isinstance(model.manifold, Circle) else figures.density_s2_figure
        fig(dens, out / "density.png")
    write_json(out / "summary.json", summary)
    write_json(out / "metadata.json", metadata(cfg, t0, train_wall_clock=hist.wall_clock))
    return summary


def run_sweep(cfg: ExperimentConfig, out: Path, log=None) -> dict:
    t0 = time.perf_counter()
    model, target, _ = train_from_config(cfg, log)
    sw = cfg.sweep
    configs = sweep_grid(
        sw.get("eps", DEFAULT_EPS_GRID),
        as_list(sw.get("kinds", ["mvl_langevin", "dsm"])),
        [bool(c) for c in as_list(sw.get("with_cv", [True, False]))],
    )
    table = sweep_bias_variance(configs, model, target, int(sw.get("K", 50)), int(sw.get("M", 5000)), cfg.seed, int(sw.get("workers", 1)))
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "bias_variance.csv")
    svg_plot(table, AxesSpec("epsilon", "variance", ("estimator", "with_cv"), True, True, "variance"), out / "variance.svg")
    pos = ResultTable(table.columns, [r for r in table.rows if r["sq_bias_ub"] > 0])
    if len(pos):
        svg_plot(pos, AxesSpec("epsilon", "sq_bias_ub", ("estimator", "with_cv"), True, True, "squared bias upper bound"), out / "bias.svg")
    figures.sweep_figure(table, out / "bias_variance.png")
    atomic_write(out / "model.json", model_to_json(model))
    summary = sweep_summary(table)
    write_json(out / "summary.json", summary)
    write_json(out / "metadata.json", metadata(cfg, t0))
    return summary


def run_density(cfg: ExperimentConfig, out: Path, model_path=None, resolution=None, log=None) -> dict:
    t0 = time.perf_counter()
    reference = build_target(cfg.target) if cfg.target and cfg.source else None
    if model_path is not None:
        model = model_from_json(Path(model_path).read_text())
        if reference is not None and reference.manifold != model.manifold:
            reference = None
    else:
        model, reference, _ = train_from_config(cfg, log)
    res = resolution or cfg.density.get("resolution")
    if res is None:
        res = 360 if isinstance(model.manifold, Circle) else 60
    table = density_grid(model, resolution=res, reference=reference)
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "density.csv")
    if isinstance(model.manifold, Circle):
        svg_plot(table, AxesSpec("theta", "log_density", title="log density"), out / "density.svg")
        figures.density_s1_figure(table, out / "density.png")
    else:
        figures.density_s2_figure(table, out / "density.png")
    if model_path is None:
        atomic_write(out / "model.json", model_to_json(model))
    summary = density_summary(table)
    write_json(out / "summary.json", summary)
    write_json(out / "metadata.json", metadata(cfg, t0))
    return summary


def run_cd1(cfg: ExperimentConfig, out: Path, log=None) -> dict:
    t0 = time.perf_counter()
    sec = cfg.cd1
    target = build_target(cfg.target if cfg.target.get("kind") else {"kind": "cosine"})
    table = cd1_compare(
        target,
        cfg.model,
        cfg.train,
        sec.get("eps", [1e-5, 1e-4, 1e-3, 1e-2]),
        tuple(as_list(sec.get("methods", list(CD1_METHODS)))),
        tuple(int(s) for s in as_list(sec.get("seeds", [0, 1, 2]))),
        int(sec.get("eval_n", 2000)),
        int(sec.get("workers", 1)),
        log,
    )
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "cd1_compare.csv")
    figures.cd1_figure(table, out / "cd1_compare.png")
    summary = cd1_summary(table)
    write_json(out / "summary.json", summary)
    write_json(out / "metadata.json", metadata(cfg, t0))
    return summary


def run_demo_ae(cfg: ExperimentConfig, out: Path, log=None) -> dict:
    t0 = time.perf_counter()
    hist, models = train_ae(cfg.ae, log=log)
    out.mkdir(parents=True, exist_ok=True)
    table = ResultTable(["iteration", "recon", "entropy_term", "kl_term", "score_loss", "score_gap"], hist.rows)
    table.write_csv(out / "history.csv")
    z = hist.latents
    lat = ResultTable([f"z{i}" for i in range(z.shape[1])], [{f"z{i}": float(v) for i, v in enumerate(row)} for row in z.tolist()])
    lat.write_csv(out / "latents.csv")
    for name, obj in (("encoder", models.encoder), ("decoder", models.decoder)):
        spec = obj.spec.copy()
        spec.params = obj.params.detach().clone()
        atomic_write(out / f"{name}.json", mlp_to_json(spec, manifold=cfg.ae.latent, mode=cfg.ae.mode))
    if models.score_model is not None:
        atomic_write(out / "score_model.json", model_to_json(models.score_model))
    from .autoencoder import ring_dataset

    data = ring_dataset(cfg.ae.n_data, RngStream(cfg.ae.seed).child("data"))[: z.shape[0]]
    figures.ae_figure(table, z.numpy(), data.numpy(), out / "ae.png")
    summary = {
        "recon_init": hist.recon_init,
        "recon_final": hist.rows[-1]["recon"],
        "kl_final": hist.rows[-1]["kl_term"],
        "stale_score_warnings": hist.stale_count,
    }
    write_json(out / "summary.json", summary)
    write_json(out / "metadata.json", metadata(cfg, t0, train_wall_clock=hist.wall_clock))
    return summary


RUNNERS = {
    "train": run_train,
    "sweep-bias-variance": run_sweep,
    "cd1-compare": run_cd1,
    "demo-ae": run_demo_ae,
}
