"""Matplotlib report figures written next to the CSV outputs."""
from __future__ import annotations

import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .tables import ResultTable, atomic_write  # noqa: E402

PNG_META = {"Software": None}


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata=PNG_META)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def sweep_figure(table: ResultTable, path):
    """Squared bias (left) and variance (right) against epsilon, log-log."""
    fig, (ax_b, ax_v) = plt.subplots(1, 2, figsize=(10, 4))
    keys = sorted({(r["estimator"], r["with_cv"]) for r in table.rows})
    for est, cv in keys:
        sub = sorted((r for r in table.rows if r["estimator"] == est and r["with_cv"] == cv), key=lambda r: r["epsilon"])
        eps = [r["epsilon"] for r in sub]
        label = f"{est}{' + CV' if cv else ''}"
        ax_b.plot(eps, [max(r["sq_bias_ub"], 1e-300) for r in sub], marker="o", label=label)
        ax_v.plot(eps, [r["variance"] for r in sub], marker="o", label=label)
    for ax, name in ((ax_b, "squared bias (upper bound)"), (ax_v, "variance")):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("epsilon")
        ax.set_ylabel(name)
    ax_v.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def density_s1_figure(table: ResultTable, path):
    """Learned density (and reference when present) in polar form."""
    th = np.asarray(table.column("theta"))
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="polar")
    ax.plot(th, np.exp(table.column("log_density")), label="model")
    if "reference_log_density" in table.columns:
        ax.plot(th, np.exp(table.column("reference_log_density")), "--", label="target")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def density_s2_figure(table: ResultTable, path):
    th = np.asarray(table.column("theta"))
    ph = np.asarray(table.column("phi"))
    cols = [("log_density", "model")]
    if "reference_log_density" in table.columns:
        cols.append(("reference_log_density", "target"))
    fig, axes = plt.subplots(1, len(cols), figsize=(5 * len(cols), 3.2), squeeze=False)
    nt = len(np.unique(th))
    for ax, (col, name) in zip(axes[0], cols):
        z = np.asarray(table.column(col)).reshape(nt, -1)
        im = ax.imshow(z, extent=(-math.pi, math.pi, math.pi, 0), aspect="auto", cmap="viridis")
        ax.set_xlabel("phi")
        ax.set_ylabel("theta")
        ax.set_title(name)
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)


def cd1_figure(table: ResultTable, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(set(table.column("method"))):
        rows = [r for r in table.rows if r["method"] == method]
        eps = sorted(set(r["epsilon"] for r in rows))
        means = [np.mean([r["final_loss"] for r in rows if r["epsilon"] == e]) for e in eps]
        ax.plot(eps, means, marker="o", label=method)
    ax.set_xscale("log")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("final exact score matching loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def ae_figure(history: ResultTable, latents: np.ndarray, data: np.ndarray, path):
    fig, (ax_h, ax_d) = plt.subplots(1, 2, figsize=(10, 4))
    it = history.column("iteration")
    ax_h.plot(it, history.column("recon"), label="reconstruction")
    kl = history.column("kl_term")
    if not all(math.isnan(v) for v in kl):
        ax_h.plot(it, kl, label="KL (quadrature)")
    ax_h.set_yscale("log")
    ax_h.set_xlabel("iteration")
    ax_h.legend(fontsize=8)
    ang = np.arctan2(latents[:, 1], latents[:, 0]) if latents.shape[1] == 2 else latents[:, 0]
    sc = ax_d.scatter(data[:, 0], data[:, 1], c=ang, cmap="twilight", s=6)
    ax_d.set_aspect("equal")
    ax_d.set_title("data coloured by latent")
    fig.colorbar(sc, ax=ax_d)
    fig.tight_layout()
    _save(fig, path)
