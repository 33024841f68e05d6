"""The normal operator of the ray transform, two independent ways.

* ``normal_compose``: the angular route, averaging forward ray integrals
  over the full direction circle at a point (factor 2 for the two ray
  orientations), with geodesics traced to the outer boundary.
* ``normal_kernel``: the explicit distance-function kernel, a grid
  quadrature with the 1/rho singularity excised by a smooth cutoff and
  compensated in closed form with the metric frozen at the target.

For flat metrics the kernel route collapses to a convolution and is
evaluated by FFT (``evaluator="fft"``), which is what makes whole-grid
ensemble studies affordable; the two routes are cross-checked against
each other by the acceptance suite.

The principal symbol is evaluated both by a mollified delta quadrature
and by the exact two-crossing formula: in 2D the delta picks the two unit
directions conormal to xi, each weighted by the inverse angular slope, and
since the fourth tensor power is even this gives
``4 pi (w w w w) / |xi|_{g^{-1}}`` for the g-unit direction w with
xi(w) = 0.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .errors import NoConvergence, UnresolvedFrequency, ZeroCovector
from .fields import SymTensorField, norm_l2
from .geodesics import _sqrtm_spd, geodesic_integrals, two_point_batch
from .geometry import Domain, Metric

_CUT_INNER = 2.0   # cutoff starts at 2h ...
_CUT_OUTER = 4.0   # ... and ends at 4h
_R_EFF = 3.0       # integral of (1 - cutoff), in units of h


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _cutoff(rho, h):
    return _smoothstep((rho - _CUT_INNER * h) / ((_CUT_OUTER - _CUT_INNER) * h))


def _local_compensation(metric: Metric, f: SymTensorField, x):
    """Closed-form contribution of the excised near-singular disc.

    Freezing f and g at x, the kernel integrand over the metric-polar
    region integrates to (pi r_eff / 2)(tr_g f * g + 2 f) with
    r_eff = int (1 - cutoff) d rho = 3h.
    """
    x = np.asarray(x, dtype=float)
    h = f.domain.h
    c = f.interp(x[None])[:, 0]
    fx = np.array([[c[0], c[1]], [c[1], c[2]]])
    G = metric.g(x[None])[0]
    gi = metric.ginv(x[None])[0]
    tr = np.einsum("ab,ab->", gi, fx)
    return (np.pi * _R_EFF * h / 2.0) * (tr * G + 2.0 * fx)


# ---------------------------------------------------------------------------
# angular composition route
# ---------------------------------------------------------------------------

def _compose_comps(metric: Metric, fields, targets, n_dirs, step,
                   domain: Domain):
    """(F, P, 3) lowered components of N f at target points."""
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    p = targets.shape[0]
    theta = 2.0 * np.pi * (np.arange(n_dirs) + 0.5) / n_dirs
    u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    Ainv = np.linalg.inv(_sqrtm_spd(metric.g(targets)))
    # omega[p, j] = Ainv(x_p) u(theta_j): g-unit for every angle
    om = np.einsum("pij,tj->pti", Ainv, u).reshape(-1, 2)
    starts = np.repeat(targets, n_dirs, axis=0)

    ints, _ = geodesic_integrals(metric, domain, starts, om,
                                 domain.radius_M1, step,
                                 [f.quad_comps for f in fields])
    ints = ints.reshape(len(fields), p, n_dirs)
    om = om.reshape(p, n_dirs, 2)

    dtheta = 2.0 * np.pi / n_dirs
    upper = 2.0 * dtheta * np.einsum("fpt,pti,ptj->fpij", ints, om, om)
    G = metric.g(targets)
    low = np.einsum("pki,plj,fpij->fpkl", G, G, upper)
    return np.stack([low[..., 0, 0], low[..., 0, 1], low[..., 1, 1]], axis=-1)


def normal_compose(metric: Metric, f: SymTensorField, x, n_dirs: int = 256,
                   step: float = 1e-3) -> np.ndarray:
    """(N f)(x) by the angular-integral composition; lowered 2x2 matrix."""
    x = np.asarray(x, dtype=float)
    if np.linalg.norm(x) >= f.domain.radius_M1:
        raise ValueError("normal operator target must lie inside the outer disc")
    c = _compose_comps(metric, [f], x[None], n_dirs, step, f.domain)[0, 0]
    return np.array([[c[0], c[1]], [c[1], c[2]]])


def normal_on_grid(metric: Metric, fields, domain: Domain,
                   n_dirs: int = 64, step: float | None = None,
                   evaluator: str = "auto", chunk: int = 4096,
                   threads: int = 1):
    """Evaluate N f on every node of the outer disc for several fields.

    evaluator: "compose" (angular quadrature per node), "fft" (flat-metric
    kernel convolution), or "auto" (fft when the metric is flat).
    Returns a list of SymTensorField on region M1.
    """
    if evaluator == "auto":
        evaluator = "fft" if metric.is_flat else "compose"
    if evaluator == "fft":
        if not metric.is_flat:
            raise ValueError("fft evaluator requires a flat metric")
        return [_kernel_fft_single(f, domain) for f in fields]

    if step is None:
        step = domain.h
    targets = domain.points(domain.mask_M1)
    blocks = [targets[i:i + chunk] for i in range(0, targets.shape[0], chunk)]

    def work(block):
        return _compose_comps(metric, fields, block, n_dirs, step, domain)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    allc = np.concatenate(parts, axis=1)  # (F, P, 3)

    out = []
    for fi in range(len(fields)):
        comps = np.zeros((3, domain.n_side, domain.n_side))
        for c in range(3):
            comps[c][domain.mask_M1] = allc[fi, :, c]
        out.append(SymTensorField(comps, domain, "M1"))
    return out


# ---------------------------------------------------------------------------
# kernel route
# ---------------------------------------------------------------------------

def normal_kernel(metric: Metric, f: SymTensorField, x,
                  step: float = 5e-3) -> np.ndarray:
    """(N f)(x) from the distance-function kernel (grid quadrature).

    Every node y of the inner disc contributes
    f^{ij} drho/dy_i drho/dy_j drho/dx_k drho/dx_l |det d^2(rho^2/2)/dxdy|
    / rho, with the two-point solver supplying all rho factors and the
    mixed-Hessian determinant via the Jacobi field. The near-diagonal is
    handled by the smooth cutoff plus closed-form compensation.
    """
    x = np.asarray(x, dtype=float)
    domain = f.domain
    h = domain.h
    ys = domain.points(domain.mask_M)
    sol = two_point_batch(metric, x[None], ys, step=step)

    usable = ~sol["coincident"]
    if not np.all(sol["converged"] | sol["coincident"]):
        raise NoConvergence("two-point solve failed inside the kernel quadrature")

    rho = sol["rho"]
    chi = _cutoff(rho, h)
    active = usable & (chi > 0)

    gy = metric.ginv(ys[active])
    comps = f.comps[:, domain.mask_M][:, active]
    flow = np.empty(comps.shape[1:] + (2, 2))
    flow[..., 0, 0] = comps[0]
    flow[..., 0, 1] = flow[..., 1, 0] = comps[1]
    flow[..., 1, 1] = comps[2]
    fup = np.einsum("nia,njb,nab->nij", gy, gy, flow)

    xi_y = sol["grad_y"][active]
    xi_x = sol["grad_x"][active]
    s1 = np.einsum("nij,ni,nj->n", fup, xi_y, xi_y)
    w = chi[active] * h * h * sol["hess_det"][active] / rho[active]
    M = np.einsum("n,nk,nl->kl", w * s1, xi_x, xi_x)

    sd = metric.sqrt_det(x[None])[0]
    # the compensation already carries its own prefactors (they cancel in
    # the frozen-metric polar integral)
    return (2.0 / sd) * M + _local_compensation(metric, f, x)


@lru_cache(maxsize=8)
def _fft_kernels(domain: Domain):
    """Five scalar convolution kernels u^a u^b u^c u^d chi(|z|)/|z|.

    Indexed by the number of second-axis factors (0..4); sampled on the
    full offset grid of the domain.
    """
    n = domain.n_side
    off = domain.h * np.arange(-(n - 1), n)
    Z1, Z2 = np.meshgrid(off, off, indexing="ij")
    R = np.hypot(Z1, Z2)
    with np.errstate(divide="ignore", invalid="ignore"):
        u1 = np.where(R > 0, Z1 / R, 0.0)
        u2 = np.where(R > 0, Z2 / R, 0.0)
        base = np.where(R > 0, _cutoff(R, domain.h) / R, 0.0)
    return [base * u1 ** (4 - m) * u2 ** m for m in range(5)]


def _kernel_fft_single(f: SymTensorField, domain: Domain) -> SymTensorField:
    """Flat-metric N f on the whole grid by FFT convolution."""
    K = _fft_kernels(domain)
    h2 = domain.h ** 2
    f11, f12, f22 = f.comps

    def conv(a, k):
        return fftconvolve(a, K[k], mode="same")

    out = np.empty_like(f.comps)
    out[0] = 2 * h2 * (conv(f11, 0) + 2 * conv(f12, 1) + conv(f22, 2))
    out[1] = 2 * h2 * (conv(f11, 1) + 2 * conv(f12, 2) + conv(f22, 3))
    out[2] = 2 * h2 * (conv(f11, 2) + 2 * conv(f12, 3) + conv(f22, 4))

    # frozen-coefficient compensation for the cutoff region
    tr = f11 + f22
    fac = np.pi * _R_EFF * domain.h / 2.0
    out[0] += fac * (tr + 2 * f11)
    out[1] += fac * (2 * f12)
    out[2] += fac * (tr + 2 * f22)
    return SymTensorField(out, domain, "M1")


# ---------------------------------------------------------------------------
# principal symbol
# ---------------------------------------------------------------------------

@dataclass
class SymbolTensor:
    """Rank-4 principal symbol values s^{ijkl}(x, xi)."""

    s: np.ndarray
    x: np.ndarray
    xi: np.ndarray

    def contract(self, that: np.ndarray) -> np.ndarray:
        """s^{ijkl} t_{kl}: apply to a covariant symmetric 2-tensor."""
        return np.einsum("ijkl,kl->ij", self.s, that)

    def potential_contraction(self, v: np.ndarray) -> np.ndarray:
        """Apply to the symmetrized product of xi with a covector v."""
        pot = 0.5 * (np.outer(self.xi, v) + np.outer(v, self.xi))
        return self.contract(pot)

    def max_symmetry_defect(self) -> float:
        s = self.s
        return float(max(np.abs(s - s.swapaxes(0, 1)).max(),
                         np.abs(s - s.swapaxes(2, 3)).max(),
                         np.abs(s - s.transpose(2, 3, 0, 1)).max()))


def principal_symbol(metric: Metric, x, xi, width: float = 0.05,
                     method: str = "mollified", n_theta: int = 8192) -> SymbolTensor:
    """Principal symbol of N at (x, xi), order -1 and fully symmetric.

    method="exact" sums the two conormal crossings; method="mollified"
    replaces the delta by a Gaussian of the given angular width and
    integrates over the metric direction circle.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.linalg.norm(xi) == 0:
        raise ZeroCovector("principal symbol needs a nonzero covector")

    A = _sqrtm_spd(metric.g(x[None]))[0]
    Ainv = np.linalg.inv(A)
    w = Ainv @ xi                   # xi . omega(theta) = |w| cos(theta - phi0)
    conorm = np.linalg.norm(w)
    phi0 = np.arctan2(w[1], w[0])

    if method == "exact":
        tc = phi0 + 0.5 * np.pi
        om = Ainv @ np.array([np.cos(tc), np.sin(tc)])
        s = (4.0 * np.pi / conorm) * np.einsum("i,j,k,l->ijkl", om, om, om, om)
        return SymbolTensor(s, x, xi)

    if method != "mollified":
        raise ValueError("method must be 'exact' or 'mollified'")
    theta = 2.0 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
    u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    om = u @ Ainv.T
    vals = om @ xi
    ws = conorm * width
    delta = np.exp(-0.5 * (vals / ws) ** 2) / (ws * np.sqrt(2.0 * np.pi))
    dtheta = 2.0 * np.pi / n_theta
    s = 2.0 * np.pi * dtheta * np.einsum("t,ti,tj,tk,tl->ijkl", delta, om, om, om, om)
    return SymbolTensor(s, x, xi)


# ---------------------------------------------------------------------------
# order probe and dense assembly
# ---------------------------------------------------------------------------

@dataclass
class OrderProbeResult:
    ks: np.ndarray
    solenoidal_ratios: np.ndarray
    potential_ratios: np.ndarray

    @property
    def solenoidal_slope(self) -> float:
        return float(np.polyfit(np.log(self.ks), np.log(self.solenoidal_ratios), 1)[0])

    @property
    def potential_slope(self) -> float:
        return float(np.polyfit(np.log(self.ks), np.log(self.potential_ratios), 1)[0])


def symbol_order_probe(metric: Metric, domain: Domain, ks,
                       n_dirs: int = 64, evaluator: str = "auto",
                       step: float | None = None) -> OrderProbeResult:
    """Decay of ||N f_k|| / ||f_k|| for oscillatory test families.

    The solenoidal family chi sin(k x1) e2 (x) e2 should decay like 1/k
    (order -1); the potential family d(chi sin(k x1)/k e1) strictly
    faster. Frequencies must satisfy k h <= 1/4.
    """
    from .fields import OneFormField, sym_d
    from .functions import Bump, PlaneWave

    ks = np.asarray(ks, dtype=float)
    for k in ks:
        if k * domain.h > 0.25 + 1e-12:
            raise UnresolvedFrequency(f"k = {k} needs h <= {0.25 / k:.5f}")

    chi = Bump(radius=0.8)
    pts = domain.grid_points
    zero = np.zeros_like(domain.r)
    sol_fields, pot_fields = [], []
    for k in ks:
        osc = (chi * PlaneWave(k=(k, 0.0), phase=-0.5 * np.pi)).value(pts)
        sol_fields.append(SymTensorField(np.stack([zero, zero, osc]), domain, "M"))
        vk = (chi * PlaneWave(k=(k, 0.0), phase=-0.5 * np.pi, amplitude=1.0 / k)).value(pts)
        v = OneFormField(np.stack([vk, zero]), domain, "M")
        pot_fields.append(sym_d(metric, v))

    nf = normal_on_grid(metric, sol_fields + pot_fields, domain,
                        n_dirs=n_dirs, evaluator=evaluator, step=step)
    ns, npot = nf[:len(ks)], nf[len(ks):]
    sol_r = np.array([norm_l2(metric, a, "M1") / norm_l2(metric, b, "M")
                      for a, b in zip(ns, sol_fields)])
    pot_r = np.array([norm_l2(metric, a, "M1") / norm_l2(metric, b, "M")
                      for a, b in zip(npot, pot_fields)])
    return OrderProbeResult(ks, sol_r, pot_r)


def normal_dense_matrix(metric: Metric, domain: Domain, n_dirs: int = 64,
                        step: float | None = None,
                        evaluator: str = "auto") -> np.ndarray:
    """Dense matrix of N restricted to inner-disc nodes (spectral probes).

    Guarded to small grids: the operator is dense, so columns are built
    field by field. Layout is component-major over the M-node list.
    """
    if domain.n_side > 33:
        raise ValueError("dense assembly is restricted to grids up to 33x33")
    mask = domain.mask_M
    n_m = int(mask.sum())
    cols = []
    basis = []
    for c in range(3):
        for k in range(n_m):
            comps = np.zeros((3, domain.n_side, domain.n_side))
            plane = np.zeros(n_m)
            plane[k] = 1.0
            comps[c][mask] = plane
            basis.append(SymTensorField(comps, domain, "M"))
    batch = 64
    for i in range(0, len(basis), batch):
        for nf in normal_on_grid(metric, basis[i:i + batch], domain,
                                 n_dirs=n_dirs, step=step, evaluator=evaluator):
            cols.append(nf.comps[:, mask].reshape(-1))
    return np.array(cols).T
