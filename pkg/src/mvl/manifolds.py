"""Charts, metrics, Langevin drift/noise and quadrature for R^d, the circle and the 2-sphere.

All operations are batched: chart coordinates have shape (B, dim) and ambient
points (B, ambient_dim). Sphere points carry a per-sample rotation ``frame``
so every sample can sit at the equator of its own chart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import DTYPE, RngStream, as_tensor

POLE_GUARD = 1e-3
ON_MANIFOLD_TOL = 1e-8


class ChartError(ValueError):
    """Point lies outside (or too close to the edge of) its chart."""


@dataclass
class ChartPoint:
    coords: torch.Tensor
    # None (identity), (B,) angle offsets for the circle, (B, 3, 3) rotations for the sphere
    frame: torch.Tensor | None = None

    def __len__(self):
        return self.coords.shape[0]

    def with_coords(self, coords: torch.Tensor) -> "ChartPoint":
        return ChartPoint(coords, self.frame)


@dataclass
class MetricEval:
    G: torch.Tensor
    G_inv: torch.Tensor
    log_det: torch.Tensor
    inv_metric_divergence: torch.Tensor


def wrap_angle(a: torch.Tensor) -> torch.Tensor:
    """Reduce to (-pi, pi]."""
    return math.pi - torch.remainder(math.pi - a, 2 * math.pi)


class Manifold:
    kind: str
    dim: int
    ambient_dim: int

    def metric_eval(self, y: ChartPoint) -> MetricEval:
        raise NotImplementedError

    def chart_at(self, p) -> ChartPoint:
        raise NotImplementedError

    def embed(self, y: ChartPoint) -> torch.Tensor:
        raise NotImplementedError

    def in_domain(self, coords: torch.Tensor) -> torch.Tensor:
        return torch.ones(coords.shape[0], dtype=torch.bool)

    def normalize_coords(self, coords: torch.Tensor) -> torch.Tensor:
        return coords

    def riemannian_drift(self, y: ChartPoint, grad_log_target: torch.Tensor) -> torch.Tensor:
        """Coordinate drift g^{ij}(d_j log target + 1/2 d_j log|G|) + d_j g^{ij}.

        ``grad_log_target`` already includes the target power, e.g. ``-a * dE``.
        The log-determinant term makes the dynamics stationary for densities
        taken with respect to the Hausdorff (volume) measure.
        """
        m = self.metric_eval(y)
        corrected = grad_log_target + 0.5 * self.grad_log_det(y.coords)
        return torch.einsum("bij,bj->bi", m.G_inv, corrected) + m.inv_metric_divergence

    def grad_log_det(self, coords: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(coords)

    def metric_noise(self, y: ChartPoint, stream: RngStream | None = None, driver: torch.Tensor | None = None):
        """Draw z ~ N(0, G^{-1}(y)); returns ``(z, driver)`` with ``driver`` standard normal."""
        if driver is None:
            driver = stream.normal((len(y), self.dim))
        return self.noise_from_driver(y, driver), driver

    def noise_from_driver(self, y: ChartPoint, driver: torch.Tensor) -> torch.Tensor:
        m = self.metric_eval(y)
        root = torch.linalg.cholesky(m.G_inv)
        return torch.einsum("bij,bj->bi", root, driver)

    def hausdorff_quadrature(self, f, resolution) -> float:
        nodes, weights = self.quadrature_grid(resolution)
        vals = f(nodes)
        return float((as_tensor(vals).reshape(-1) * weights).sum())

    def quadrature_grid(self, resolution):
        raise ValueError(f"quadrature is unsupported on {self.kind} (unbounded or high-dimensional)")

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Nearest point of the manifold (identity for Euclidean space)."""
        return x

    def tangent_project(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return v

    def __eq__(self, other):
        return isinstance(other, Manifold) and (self.kind, self.dim) == (other.kind, other.dim)

    def __hash__(self):
        return hash((self.kind, self.dim))

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class Euclidean(Manifold):
    kind = "euclidean"

    def __init__(self, d: int):
        self.dim = self.ambient_dim = int(d)

    def metric_eval(self, y):
        b = len(y)
        eye = torch.eye(self.dim, dtype=DTYPE).expand(b, -1, -1)
        return MetricEval(eye, eye, torch.zeros(b, dtype=DTYPE), torch.zeros(b, self.dim, dtype=DTYPE))

    def noise_from_driver(self, y, driver):
        return driver

    def riemannian_drift(self, y, grad_log_target):
        return grad_log_target

    def chart_at(self, p):
        p = as_tensor(p).reshape(-1, self.dim)
        return ChartPoint(p.clone())

    def embed(self, y):
        return y.coords


class Circle(Manifold):
    """S^1 with the angular chart; ``frame`` shifts the chart origin per sample."""

    kind = "circle_s1"
    dim = 1
    ambient_dim = 2

    def metric_eval(self, y):
        b = len(y)
        one = torch.ones(b, 1, 1, dtype=DTYPE)
        return MetricEval(one, one, torch.zeros(b, dtype=DTYPE), torch.zeros(b, 1, dtype=DTYPE))

    def noise_from_driver(self, y, driver):
        return driver

    def riemannian_drift(self, y, grad_log_target):
        return grad_log_target

    def normalize_coords(self, coords):
        return wrap_angle(coords)

    def chart_at(self, p, offset=None):
        p = as_tensor(p).reshape(-1, 2)
        r = p.norm(dim=1)
        if torch.any((r - 1).abs() > ON_MANIFOLD_TOL):
            raise ChartError("point is not on the unit circle")
        angle = torch.atan2(p[:, 1], p[:, 0])
        if offset is None:
            return ChartPoint(angle.reshape(-1, 1))
        offset = as_tensor(offset).reshape(-1).expand(p.shape[0])
        return ChartPoint(wrap_angle(angle - offset).reshape(-1, 1), offset.clone())

    def angles(self, y: ChartPoint) -> torch.Tensor:
        a = y.coords[:, 0]
        return a if y.frame is None else a + y.frame

    def embed(self, y):
        a = self.angles(y)
        return torch.stack([torch.cos(a), torch.sin(a)], dim=1)

    def project(self, x):
        return x / x.norm(dim=-1, keepdim=True)

    def tangent_project(self, x, v):
        return v - (v * x).sum(-1, keepdim=True) * x

    def quadrature_grid(self, resolution):
        n = int(resolution)
        nodes = -math.pi + 2 * math.pi * torch.arange(n, dtype=DTYPE) / n
        return nodes.reshape(-1, 1), torch.full((n,), 2 * math.pi / n, dtype=DTYPE)


def _frame_from_point(p: torch.Tensor) -> torch.Tensor:
    """Rotations R with R e1 = p (batched, det +1)."""
    helper = torch.zeros_like(p)
    use_x = p[:, 2].abs() > 0.9
    helper[~use_x, 2] = 1.0
    helper[use_x, 0] = 1.0
    t1 = helper - (helper * p).sum(1, keepdim=True) * p
    t1 = t1 / t1.norm(dim=1, keepdim=True)
    t2 = torch.cross(p, t1, dim=1)
    return torch.stack([p, t1, t2], dim=2)


class Sphere2(Manifold):
    """S^2 in polar coordinates (theta, phi); each chart is a rotation of the standard one."""

    kind = "sphere_s2"
    dim = 2
    ambient_dim = 3

    def __init__(self, pole_guard: float = POLE_GUARD):
        self.pole_guard = pole_guard

    def _check(self, coords):
        th = coords[:, 0]
        bad = (th <= self.pole_guard) | (th >= math.pi - self.pole_guard)
        if torch.any(bad):
            raise ChartError(f"polar angle within {self.pole_guard} of a pole; recenter the chart")

    def in_domain(self, coords):
        th, ph = coords[:, 0], coords[:, 1]
        return (th > self.pole_guard) & (th < math.pi - self.pole_guard) & (ph > -math.pi) & (ph <= math.pi)

    def metric_eval(self, y):
        coords = y.coords
        self._check(coords)
        s2 = torch.sin(coords[:, 0]) ** 2
        b = coords.shape[0]
        G = torch.zeros(b, 2, 2, dtype=DTYPE)
        G[:, 0, 0] = 1.0
        G[:, 1, 1] = s2
        G_inv = torch.zeros_like(G)
        G_inv[:, 0, 0] = 1.0
        G_inv[:, 1, 1] = 1.0 / s2
        # g^{ij} depends on theta only through g^{phi phi}, and d_phi of it vanishes
        return MetricEval(G, G_inv, torch.log(s2), torch.zeros(b, 2, dtype=DTYPE))

    def grad_log_det(self, coords):
        th = coords[:, 0]
        out = torch.zeros_like(coords)
        out[:, 0] = 2 * torch.cos(th) / torch.sin(th)
        return out

    def noise_from_driver(self, y, driver):
        self._check(y.coords)
        return torch.stack([driver[:, 0], driver[:, 1] / torch.sin(y.coords[:, 0])], dim=1)

    def chart_at(self, p):
        p = as_tensor(p).reshape(-1, 3)
        if torch.any((p.norm(dim=1) - 1).abs() > ON_MANIFOLD_TOL):
            raise ChartError("point is not on the unit sphere")
        frame = _frame_from_point(p)
        coords = torch.zeros(p.shape[0], 2, dtype=DTYPE)
        coords[:, 0] = math.pi / 2
        return ChartPoint(coords, frame)

    @staticmethod
    def standard_embed(coords):
        th, ph = coords[:, 0], coords[:, 1]
        return torch.stack([torch.sin(th) * torch.cos(ph), torch.sin(th) * torch.sin(ph), torch.cos(th)], dim=1)

    @staticmethod
    def standard_coords(p):
        p = as_tensor(p).reshape(-1, 3)
        return torch.stack([torch.acos(p[:, 2].clamp(-1, 1)), torch.atan2(p[:, 1], p[:, 0])], dim=1)

    def embed(self, y):
        e = self.standard_embed(y.coords)
        if y.frame is None:
            return e
        return torch.einsum("bij,bj->bi", y.frame, e)

    def project(self, x):
        return x / x.norm(dim=-1, keepdim=True)

    def tangent_project(self, x, v):
        return v - (v * x).sum(-1, keepdim=True) * x

    def quadrature_grid(self, resolution):
        """Midpoint latitude-longitude grid with exact cell-area weights.

        ``resolution`` is ``n_theta`` (giving ``n_theta x 2 n_theta``) or a pair.
        """
        if isinstance(resolution, (tuple, list)):
            nt, nph = int(resolution[0]), int(resolution[1])
        else:
            nt, nph = int(resolution), 2 * int(resolution)
        edges = np.linspace(0.0, math.pi, nt + 1)
        th = 0.5 * (edges[1:] + edges[:-1])
        band = np.cos(edges[:-1]) - np.cos(edges[1:])
        ph = -math.pi + (np.arange(nph) + 0.5) * 2 * math.pi / nph
        T, P = np.meshgrid(th, ph, indexing="ij")
        W = np.repeat(band[:, None], nph, axis=1) * (2 * math.pi / nph)
        nodes = torch.tensor(np.stack([T.ravel(), P.ravel()], axis=1), dtype=DTYPE)
        return nodes, torch.tensor(W.ravel(), dtype=DTYPE)


def make_manifold(kind: str, d: int | None = None) -> Manifold:
    if kind in ("euclidean", "r", "rd"):
        return Euclidean(d or 2)
    if kind in ("circle_s1", "s1", "circle"):
        return Circle()
    if kind in ("sphere_s2", "s2", "sphere"):
        return Sphere2()
    raise ValueError(f"unknown manifold {kind!r}")


def manifold_to_dict(m: Manifold) -> dict:
    return {"kind": m.kind, "dim": m.dim}


def manifold_from_dict(d: dict) -> Manifold:
    return make_manifold(d["kind"], d.get("dim"))
