"""Computational domains and simple metrics on a planar chart.

The inner disc of radius ``radius_M`` and the surrounding disc of radius
``radius_M1`` live on one global Cartesian grid. Metrics are supplied in
closed form with exact first and second derivatives, so Christoffel
symbols and Gaussian curvature are analytic; finite differences appear
only in test oracles and in the third-derivative part of the C^3 distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .functions import ScalarFunction, SymMatrixFunction

REGION_M = 0
REGION_ANNULUS = 1
REGION_EXTERIOR = 2

_EDGE_TOL = 1e-12


@dataclass(eq=False)
class Domain:
    """Concentric discs on a Cartesian grid symmetric through the origin."""

    radius_M: float = 1.0
    radius_M1: float = 1.3
    h: float = 1.0 / 64

    def __post_init__(self):
        if not (0 < self.radius_M < self.radius_M1):
            raise ValueError("need 0 < radius_M < radius_M1")
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")
        # one ghost ring beyond the outermost in-disc node
        self.n_half = int(np.floor(self.radius_M1 / self.h - _EDGE_TOL)) + 1
        self.xs = self.h * np.arange(-self.n_half, self.n_half + 1)
        self.n_side = self.xs.size
        # axis 0 of every grid array is x1, axis 1 is x2
        self.X1, self.X2 = np.meshgrid(self.xs, self.xs, indexing="ij")
        self.r = np.hypot(self.X1, self.X2)
        self.mask_M = self.r < self.radius_M - _EDGE_TOL
        self.mask_M1 = self.r < self.radius_M1 - _EDGE_TOL
        self.mask_annulus = self.mask_M1 & ~self.mask_M
        self.region_flag = np.full(self.r.shape, REGION_EXTERIOR, dtype=np.int8)
        self.region_flag[self.mask_annulus] = REGION_ANNULUS
        self.region_flag[self.mask_M] = REGION_M

    def region_mask(self, region: str) -> np.ndarray:
        try:
            return {"M": self.mask_M, "M1": self.mask_M1,
                    "annulus": self.mask_annulus}[region]
        except KeyError:
            raise ValueError(f"unknown region {region!r}") from None

    def region_radius(self, region: str) -> float:
        return {"M": self.radius_M, "M1": self.radius_M1}[region]

    def points(self, mask=None) -> np.ndarray:
        """Grid nodes as an (N, 2) array, optionally restricted to a mask."""
        pts = np.stack([self.X1, self.X2], axis=-1)
        if mask is None:
            return pts.reshape(-1, 2)
        return pts[mask]

    @property
    def grid_points(self) -> np.ndarray:
        """All nodes as an (n_side, n_side, 2) array."""
        return np.stack([self.X1, self.X2], axis=-1)


# ---------------------------------------------------------------------------
# metric families
# ---------------------------------------------------------------------------

class Metric:
    """A Riemannian metric on the chart, with exact derivatives.

    Subclasses supply g, g^{-1}, dg[...,k,i,j] = d_k g_ij and
    d2g[...,k,l,i,j] = d_k d_l g_ij at arrays of points (..., 2).
    """

    is_flat = False
    name = "metric"

    def g(self, pts):
        raise NotImplementedError

    def ginv(self, pts):
        raise NotImplementedError

    def dg(self, pts):
        raise NotImplementedError

    def d2g(self, pts):
        raise NotImplementedError

    # -- derived quantities -------------------------------------------------

    def sqrt_det(self, pts):
        G = self.g(pts)
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] ** 2
        return np.sqrt(det)

    @staticmethod
    def _first_kind(dg):
        """t[..., i, j, l] = d_i g_jl + d_j g_il - d_l g_ij."""
        return (dg
                + np.einsum("...jil->...ijl", dg)
                - np.einsum("...lij->...ijl", dg))

    def christoffel(self, pts):
        """Gamma[..., k, i, j] = Gamma^k_ij, symmetric in (i, j)."""
        t = self._first_kind(self.dg(pts))
        return 0.5 * np.einsum("...kl,...ijl->...kij", self.ginv(pts), t)

    def _dchristoffel(self, pts):
        """dGamma[..., m, k, i, j] = d_m Gamma^k_ij."""
        ginv = self.ginv(pts)
        dg = self.dg(pts)
        d2g = self.d2g(pts)
        t = self._first_kind(dg)
        # d_m g^{kl} = -g^{ka} (d_m g_ab) g^{bl}
        dginv = -np.einsum("...ka,...mab,...bl->...mkl", ginv, dg, ginv)
        # dt[..., m, i, j, l] = d_m (d_i g_jl + d_j g_il - d_l g_ij)
        dt = (d2g
              + np.einsum("...mjil->...mijl", d2g)
              - np.einsum("...mlij->...mijl", d2g))
        return 0.5 * (np.einsum("...mkl,...ijl->...mkij", dginv, t)
                      + np.einsum("...kl,...mijl->...mkij", ginv, dt))

    def gauss_curvature(self, pts):
        """Gaussian curvature from g and its first two derivatives."""
        pts = np.asarray(pts, dtype=float)
        G = self.g(pts)
        Gam = self.christoffel(pts)
        dGam = self._dchristoffel(pts)
        # R^l_{k i j} = d_i Gam^l_{jk} - d_j Gam^l_{ik}
        #              + Gam^l_{im} Gam^m_{jk} - Gam^l_{jm} Gam^m_{ik}
        # with (k, i, j) = (2, 1, 2); K = g_{1l} R^l_{212} / det g
        Rl = (dGam[..., 0, :, 1, 1] - dGam[..., 1, :, 0, 1]
              + np.einsum("...lm,...m->...l", Gam[..., :, 0, :], Gam[..., :, 1, 1])
              - np.einsum("...lm,...m->...l", Gam[..., :, 1, :], Gam[..., :, 0, 1]))
        R1212 = np.einsum("...l,...l->...", G[..., 0, :], Rl)
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] ** 2
        return R1212 / det

    # -- algebra helpers ----------------------------------------------------

    def inner(self, pts, u, v):
        return np.einsum("...ij,...i,...j->...", self.g(pts), u, v)

    def norm_vec(self, pts, v):
        return np.sqrt(np.maximum(self.inner(pts, v, v), 0.0))

    def unit(self, pts, v):
        return v / self.norm_vec(pts, v)[..., None]

    def lower(self, pts, v):
        return np.einsum("...ij,...j->...i", self.g(pts), v)

    def raise_(self, pts, cov):
        return np.einsum("...ij,...j->...i", self.ginv(pts), cov)

    def rot90(self, pts, v):
        """g-orthogonal rotation: |rot90 v|_g = |v|_g and <rot90 v, v>_g = 0."""
        Gv = self.lower(pts, v)
        sd = self.sqrt_det(pts)
        e = np.stack([Gv[..., 1], -Gv[..., 0]], axis=-1)
        return e / sd[..., None]

    def conorm(self, pts, cov):
        """|xi|_{g^{-1}}, the natural length of a covector."""
        return np.sqrt(np.einsum("...ij,...i,...j->...", self.ginv(pts), cov, cov))

    def max_speed(self, domain: Domain) -> float:
        """Largest metric stretch over the grid (caps arclength budgets)."""
        pts = domain.points(domain.mask_M1)
        G = self.g(pts)
        tr = G[..., 0, 0] + G[..., 1, 1]
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] ** 2
        lam_max = 0.5 * (tr + np.sqrt(np.maximum(tr * tr - 4 * det, 0.0)))
        return float(np.sqrt(lam_max.max()))


class EuclideanMetric(Metric):
    is_flat = True
    name = "euclidean"

    def g(self, pts):
        return np.broadcast_to(np.eye(2), pts.shape[:-1] + (2, 2)).copy()

    def ginv(self, pts):
        return self.g(pts)

    def dg(self, pts):
        return np.zeros(pts.shape[:-1] + (2, 2, 2))

    def d2g(self, pts):
        return np.zeros(pts.shape[:-1] + (2, 2, 2, 2))

    def sqrt_det(self, pts):
        return np.ones(pts.shape[:-1])

    def christoffel(self, pts):
        return np.zeros(pts.shape[:-1] + (2, 2, 2))

    def gauss_curvature(self, pts):
        return np.zeros(np.asarray(pts).shape[:-1])

    # hot-path shortcuts (identical results, no identity-matrix traffic)

    def inner(self, pts, u, v):
        return np.einsum("...i,...i->...", u, v)

    def norm_vec(self, pts, v):
        return np.linalg.norm(v, axis=-1)

    def lower(self, pts, v):
        return np.array(v, copy=True)

    def raise_(self, pts, cov):
        return np.array(cov, copy=True)

    def rot90(self, pts, v):
        return np.stack([v[..., 1], -v[..., 0]], axis=-1)

    def conorm(self, pts, cov):
        return np.linalg.norm(cov, axis=-1)


@dataclass(eq=False)
class ConformalMetric(Metric):
    """g_ij = exp(2 lambda(x)) delta_ij."""

    lam: ScalarFunction
    name: str = "conformal"

    def g(self, pts):
        e2l = np.exp(2.0 * self.lam.value(pts))
        return e2l[..., None, None] * np.eye(2)

    def ginv(self, pts):
        e2l = np.exp(-2.0 * self.lam.value(pts))
        return e2l[..., None, None] * np.eye(2)

    def dg(self, pts):
        e2l = np.exp(2.0 * self.lam.value(pts))
        dl = self.lam.grad(pts)
        return (2.0 * dl * e2l[..., None])[..., :, None, None] * np.eye(2)

    def d2g(self, pts):
        e2l = np.exp(2.0 * self.lam.value(pts))
        dl = self.lam.grad(pts)
        hl = self.lam.hess(pts)
        fac = 2.0 * hl + 4.0 * np.einsum("...k,...l->...kl", dl, dl)
        return (fac * e2l[..., None, None])[..., :, :, None, None] * np.eye(2)

    def sqrt_det(self, pts):
        return np.exp(2.0 * self.lam.value(pts))

    def christoffel(self, pts):
        # Gamma^k_ij = dl_i delta_jk + dl_j delta_ik - dl_k delta_ij
        dl = self.lam.grad(pts)
        eye = np.eye(2)
        return (np.einsum("...i,jk->...kij", dl, eye)
                + np.einsum("...j,ik->...kij", dl, eye)
                - np.einsum("...k,ij->...kij", dl, eye))

    def gauss_curvature(self, pts):
        pts = np.asarray(pts, dtype=float)
        hl = self.lam.hess(pts)
        lap = hl[..., 0, 0] + hl[..., 1, 1]
        return -np.exp(-2.0 * self.lam.value(pts)) * lap

    # hot-path shortcuts using the conformal factor directly

    def inner(self, pts, u, v):
        return np.exp(2.0 * self.lam.value(pts)) * np.einsum("...i,...i->...", u, v)

    def norm_vec(self, pts, v):
        return np.exp(self.lam.value(pts)) * np.linalg.norm(v, axis=-1)

    def lower(self, pts, v):
        return np.exp(2.0 * self.lam.value(pts))[..., None] * v

    def raise_(self, pts, cov):
        return np.exp(-2.0 * self.lam.value(pts))[..., None] * cov

    def rot90(self, pts, v):
        return np.stack([v[..., 1], -v[..., 0]], axis=-1)

    def conorm(self, pts, cov):
        return np.exp(-self.lam.value(pts)) * np.linalg.norm(cov, axis=-1)


@dataclass(eq=False)
class PerturbedMetric(Metric):
    """g = identity + eps * h(x) with h symmetric-matrix-valued."""

    eps: float
    h: SymMatrixFunction
    name: str = "perturbed"

    def g(self, pts):
        return np.eye(2) + self.eps * self.h.value(pts)

    def ginv(self, pts):
        G = self.g(pts)
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] ** 2
        inv = np.empty_like(G)
        inv[..., 0, 0] = G[..., 1, 1]
        inv[..., 1, 1] = G[..., 0, 0]
        inv[..., 0, 1] = -G[..., 0, 1]
        inv[..., 1, 0] = -G[..., 1, 0]
        return inv / det[..., None, None]

    def dg(self, pts):
        return self.eps * self.h.d(pts)

    def d2g(self, pts):
        return self.eps * self.h.d2(pts)


# ---------------------------------------------------------------------------
# C^3 distance and simplicity certification
# ---------------------------------------------------------------------------

def metric_c3_distance(metric_a: Metric, metric_b: Metric, domain: Domain,
                       fd_step: float | None = None) -> float:
    """Discrete C^3 seminorm of g_a - g_b over the M1 grid nodes.

    Orders 0..2 use the supplied analytic derivatives; third derivatives
    are central differences of the analytic Hessians with step *fd_step*
    (default: the grid spacing).
    """
    step = domain.h if fd_step is None else fd_step
    pts = domain.points(domain.mask_M1)

    def diff(f):
        return f(metric_a) - f(metric_b)

    worst = max(
        np.abs(diff(lambda m: m.g(pts))).max(),
        np.abs(diff(lambda m: m.dg(pts))).max(),
        np.abs(diff(lambda m: m.d2g(pts))).max(),
    )
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = step
        d3 = (diff(lambda m: m.d2g(pts + e)) - diff(lambda m: m.d2g(pts - e))) / (2 * step)
        worst = max(worst, np.abs(d3).max())
    return float(worst)


@dataclass
class SimplicityReport:
    boundary_convexity_min: float
    conjugate_point_found: bool
    min_jacobi: float
    max_diffeo_residual: float
    n_boundary: int = 0
    n_dirs: int = 0

    @property
    def is_simple(self) -> bool:
        return self.boundary_convexity_min > 0 and not self.conjugate_point_found


def _boundary_convexity_min(metric: Metric, radius: float, n_samples: int) -> float:
    """min over the circle of the second fundamental form II(tau, tau).

    The outward g-normal field nu(x) = g^{-1} dr / |dr|_{g^{-1}} is defined
    near the circle; d nu is taken by central differences of the analytic
    formula, which only enters this diagnostic.
    """
    ang = 2 * np.pi * (np.arange(n_samples) + 0.5) / n_samples
    pts = radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def nu(p):
        u = p / np.linalg.norm(p, axis=-1, keepdims=True)  # covector dr
        raised = np.einsum("...ij,...j->...i", metric.ginv(p), u)
        s = np.sqrt(np.einsum("...i,...i->...", u, raised))
        return raised / s[..., None]

    tan_e = np.stack([-pts[..., 1], pts[..., 0]], axis=-1)
    tau = metric.unit(pts, tan_e)

    fd = 1e-6
    dnu = np.empty(pts.shape[:-1] + (2, 2))  # [j, i] = d_j nu^i
    for j in range(2):
        e = np.zeros(2)
        e[j] = fd
        dnu[..., j, :] = (nu(pts + e) - nu(pts - e)) / (2 * fd)

    Gam = metric.christoffel(pts)
    nabla = (np.einsum("...j,...ji->...i", tau, dnu)
             + np.einsum("...ijk,...j,...k->...i", Gam, tau, nu(pts)))
    II = metric.inner(pts, nabla, tau)
    return float(II.min())


def certify_simple(metric: Metric, domain: Domain,
                   n_boundary: int = 48, n_dirs: int = 12,
                   step: float = 2e-3, convexity_samples: int = 256,
                   two_point_samples: int = 8, seed: int = 0) -> SimplicityReport:
    """Certify strict boundary convexity and absence of conjugate points.

    Convexity is sampled on both circles; conjugate points are detected by
    integrating the Jacobi equation J'' + K J = 0, J(0) = 0, J'(0) = 1
    along a fan of geodesics from the outer boundary and flagging any sign
    change after the initial zero. A two-point shooting consistency
    residual is reported alongside.
    """
    from . import geodesics  # deferred: geodesics imports this module

    convexity = min(
        _boundary_convexity_min(metric, domain.radius_M, convexity_samples),
        _boundary_convexity_min(metric, domain.radius_M1, convexity_samples),
    )

    fan = geodesics.boundary_fan(metric, domain, "M1", n_boundary, n_dirs)
    min_j, sign_change = geodesics.jacobi_scan(
        metric, domain, fan.points, fan.dirs, step=step, t_min=10 * step)

    max_resid = 0.0
    if two_point_samples > 0:
        if convexity > 0 and not sign_change:  # shooting assumes no conjugate points
            rng = np.random.default_rng(seed)
            r = domain.radius_M1 * 0.85 * np.sqrt(rng.uniform(0.05, 1.0, 2 * two_point_samples))
            a = rng.uniform(0, 2 * np.pi, 2 * two_point_samples)
            p = np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)
            xs, ys = p[:two_point_samples], p[two_point_samples:]
            sol = geodesics.two_point_batch(metric, domain, xs, ys, step=5e-3)
            if np.all(sol["converged"]):
                max_resid = float(np.linalg.norm(sol["endpoint"] - ys, axis=-1).max())
            else:
                max_resid = np.inf
        else:
            max_resid = np.nan

    return SimplicityReport(
        boundary_convexity_min=convexity,
        conjugate_point_found=bool(sign_change),
        min_jacobi=float(min_j),
        max_diffeo_residual=max_resid,
        n_boundary=n_boundary,
        n_dirs=n_dirs,
    )


# ---------------------------------------------------------------------------
# constructors shared by the CLI, demos, and tests
# ---------------------------------------------------------------------------

def make_metric(kind: str, amplitude: float = 0.1, width: float = 1.0,
                eps: float = 0.0) -> Metric:
    """Standard metric families keyed the way configs spell them."""
    from .functions import Gaussian

    kind = kind.lower()
    if kind == "euclidean":
        return EuclideanMetric()
    if kind == "conformal":
        return ConformalMetric(Gaussian(amplitude=amplitude, width=width))
    if kind == "perturbed":
        return PerturbedMetric(eps, default_perturbation_shape())
    raise ValueError(f"unknown metric kind {kind!r}")


@lru_cache(maxsize=1)
def default_perturbation_shape() -> SymMatrixFunction:
    """A fixed smooth symmetric bump, scaled to unit discrete C^3 norm.

    The scaling grid is the default 1/64 domain, so for the returned shape
    h the perturbation eps * h has discrete C^3 size exactly eps.
    """
    from .functions import Gaussian, ScalarTimesMatrix

    S = np.array([[1.0, 0.5], [0.5, -0.6]])
    raw = ScalarTimesMatrix(Gaussian(amplitude=1.0, width=0.8), S)
    dom = Domain()
    size = metric_c3_distance(PerturbedMetric(1.0, raw), EuclideanMetric(), dom)
    return ScalarTimesMatrix(Gaussian(amplitude=1.0 / size, width=0.8), S)
